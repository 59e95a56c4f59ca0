"""Vector (3 -> 3) and norm (3 -> 1) field maps built from per-axis GPs.

An *intermediate* map optimises hyperparameters on, and predicts from, every
merged training observation. A *compromise* map keeps those hyperparameters
but predicts from the intermediate map's posterior means at a user-chosen
grid, which makes inference cost scale with the grid size instead.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from magmap.gp import GpComponent, Hyperparameters, OptimizerConfig, optimize_hyperparameters
from magmap.ingest import ObservationSet
from magmap.sim import GROUND_Z, WORKSPACE, Box

AXES = ("x", "y", "z")
MAP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned lattice ``min:S:max`` on each axis plus a takeoff column.

    The takeoff column is ``takeoff_points`` evenly spaced points from the
    floor up to ``takeoff_height`` above ``takeoff_xy``. They are always
    appended, even where one coincides with a lattice node.
    """

    spacing: tuple[float, float, float] = (0.5, 0.5, 0.25)
    bounds: Box = WORKSPACE
    takeoff_points: int = 7
    takeoff_height: float = 0.5
    takeoff_xy: tuple[float, float] = (0.0, 0.0)
    ground_z: float = GROUND_Z

    def __post_init__(self):
        s = self.spacing
        if np.isscalar(s):
            s = (float(s),) * 3
        s = tuple(float(v) for v in s)
        if len(s) != 3 or any(v <= 0 for v in s):
            raise ValueError("grid spacings must be three positive numbers")
        object.__setattr__(self, "spacing", s)
        if self.takeoff_points < 0:
            raise ValueError("takeoff_points must be >= 0")

    @classmethod
    def uniform(cls, S: float, **kw) -> "GridSpec":
        return cls(spacing=(S, S, S), **kw)

    def to_dict(self) -> dict:
        return {
            "spacing_m": list(self.spacing),
            "bounds_m": self.bounds.to_list(),
            "takeoff_points": self.takeoff_points,
            "takeoff_height_m": self.takeoff_height,
            "takeoff_xy_m": list(self.takeoff_xy),
            "ground_z_m": self.ground_z,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            spacing=tuple(d["spacing_m"]),
            bounds=Box.from_list(d["bounds_m"]) if "bounds_m" in d else WORKSPACE,
            takeoff_points=int(d.get("takeoff_points", 7)),
            takeoff_height=float(d.get("takeoff_height_m", 0.5)),
            takeoff_xy=tuple(d.get("takeoff_xy_m", (0.0, 0.0))),
            ground_z=float(d.get("ground_z_m", GROUND_Z)),
        )


def axis_points(lo: float, hi: float, step: float) -> np.ndarray:
    """``lo:step:hi``; ``hi`` is included only when it lands on the lattice (within 1e-9)."""
    span = hi - lo
    if step > span + 1e-12:
        raise ValueError(f"spacing {step} is larger than the axis span {span}")
    n = int(np.floor(span / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def generate_grid(spec: GridSpec) -> np.ndarray:
    """Grid locations ordered x-fastest, then y, then z, with the takeoff column last."""
    lo, hi = spec.bounds.lower, spec.bounds.upper
    xs, ys, zs = (axis_points(lo[k], hi[k], spec.spacing[k]) for k in range(3))
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    lattice = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    if spec.takeoff_points == 0:
        return lattice
    # z points down, so "up" from the floor is negative z
    tz = np.linspace(spec.ground_z, spec.ground_z - spec.takeoff_height, spec.takeoff_points)
    column = np.column_stack([np.full_like(tz, spec.takeoff_xy[0]), np.full_like(tz, spec.takeoff_xy[1]), tz])
    return np.vstack([lattice, column])


@dataclass(frozen=True, eq=False)
class VectorFieldMap:
    """Three scalar GPs (x, y, z field components) sharing one set of locations."""

    components: tuple[GpComponent, GpComponent, GpComponent]
    kind: str = "intermediate"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) != 3:
            raise ValueError("a vector map needs exactly three components")
        X0 = comps[0].train_locations
        if any(c.train_locations.shape != X0.shape or not np.array_equal(c.train_locations, X0) for c in comps[1:]):
            raise ValueError("all components must share identical training locations")
        if self.kind not in ("intermediate", "compromise", "single-flight"):
            raise ValueError(f"unknown map kind {self.kind!r}")
        object.__setattr__(self, "components", comps)

    @property
    def locations(self) -> np.ndarray:
        return self.components[0].train_locations

    @property
    def hyperparams(self) -> tuple[Hyperparameters, ...]:
        return tuple(c.hyperparams for c in self.components)

    def __len__(self) -> int:
        return len(self.locations)

    def predict(self, query, *, include_noise: bool = False):
        return predict_vector(self, query, include_noise=include_noise)


@dataclass(frozen=True, eq=False)
class NormFieldMap:
    """Scalar GP trained on measurement magnitudes."""

    component: GpComponent
    kind: str = "intermediate"
    provenance: dict = field(default_factory=dict)

    @property
    def locations(self) -> np.ndarray:
        return self.component.train_locations

    def __len__(self) -> int:
        return len(self.component)

    def predict(self, query, *, include_noise: bool = False):
        return self.component.predict(query, include_noise=include_noise)


def _fit_axis(X, y, config: OptimizerConfig) -> GpComponent:
    res = optimize_hyperparameters(X, y, config, full_output=True)
    return GpComponent.fit(X, y, res.hyperparameters, res.mean_offset,
                           noise_everywhere=config.noise_everywhere)


def build_intermediate(obs: ObservationSet, config: OptimizerConfig | None = None, *,
                       kind: str = "intermediate", workers: int = 1) -> VectorFieldMap:
    """Optimise each axis's hyperparameters on ``obs`` and keep ``obs`` as the inference set.

    ``workers > 1`` fits the three axes concurrently; results do not depend on it.
    """
    config = config or OptimizerConfig()
    if len(obs) < 10:
        raise ValueError(f"need at least 10 observations to build a map, got {len(obs)}")
    cols = [obs.Y[:, k] for k in range(3)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=min(workers, 3)) as pool:
            comps = tuple(pool.map(lambda y: _fit_axis(obs.X, y, config), cols))
    else:
        comps = tuple(_fit_axis(obs.X, y, config) for y in cols)
    prov = {"source_flights": list(obs.sources), "n_observations": len(obs)}
    return VectorFieldMap(comps, kind, prov)


def _compress_component(comp: GpComponent, grid: np.ndarray) -> GpComponent:
    mean, _ = comp.predict(grid)
    return GpComponent.fit(grid, mean, comp.hyperparams, comp.mean_offset,
                           noise_everywhere=comp.noise_everywhere)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).reshape(-1, 3)
    if len(grid) == 0:
        raise ValueError("compromise grid is empty")
    return grid


def build_compromise(inter: VectorFieldMap, grid, grid_spec: GridSpec | None = None) -> VectorFieldMap:
    """Re-base ``inter`` on its own posterior means at ``grid``.

    Hyperparameters and mean offsets are copied, never re-optimised; the
    intermediate posterior variances at the grid are discarded.
    """
    if inter.kind == "compromise":
        raise ValueError("build_compromise expects an intermediate (or single-flight) map")
    grid = _check_grid(grid)
    comps = tuple(_compress_component(c, grid) for c in inter.components)
    prov = dict(inter.provenance)
    prov["n_intermediate"] = len(inter)
    if grid_spec is not None:
        prov["grid"] = grid_spec.to_dict()
    return VectorFieldMap(comps, "compromise", prov)


def build_norm_map(obs: ObservationSet, grid=None, config: OptimizerConfig | None = None, *,
                   grid_spec: GridSpec | None = None) -> NormFieldMap:
    """Norm map trained on ``|y|``; compressed onto ``grid`` when one is given."""
    config = config or OptimizerConfig()
    if len(obs) < 10:
        raise ValueError(f"need at least 10 observations to build a map, got {len(obs)}")
    comp = _fit_axis(obs.X, obs.norms, config)
    prov = {"source_flights": list(obs.sources), "n_observations": len(obs)}
    if grid is None:
        return NormFieldMap(comp, "intermediate", prov)
    return compress_norm_map(NormFieldMap(comp, "intermediate", prov), grid, grid_spec)


def compress_norm_map(inter: NormFieldMap, grid, grid_spec: GridSpec | None = None) -> NormFieldMap:
    grid = _check_grid(grid)
    prov = dict(inter.provenance)
    prov["n_intermediate"] = len(inter)
    if grid_spec is not None:
        prov["grid"] = grid_spec.to_dict()
    return NormFieldMap(_compress_component(inter.component, grid), "compromise", prov)


def predict_vector(fmap: VectorFieldMap, query, *, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Stacked per-axis posterior means and SDs, each (m, 3)."""
    out = [c.predict(query, include_noise=include_noise) for c in fmap.components]
    return np.column_stack([m for m, _ in out]), np.column_stack([s for _, s in out])


# --------------------------------------------------------------------------
# JSON map files


def _component_record(axis: str, comp: GpComponent) -> dict:
    return {
        "axis": axis,
        "hyperparams": comp.hyperparams.to_dict(),
        "mean_offset": comp.mean_offset,
        "targets": comp.train_targets.tolist(),
        "noise_everywhere": comp.noise_everywhere,
    }


def map_to_dict(fmap) -> dict:
    if isinstance(fmap, VectorFieldMap):
        records = [_component_record(a, c) for a, c in zip(AXES, fmap.components)]
        output = "vector"
    elif isinstance(fmap, NormFieldMap):
        records = [_component_record("norm", fmap.component)]
        output = "norm"
    else:
        raise TypeError(f"not a field map: {type(fmap).__name__}")
    return {
        "format_version": MAP_FORMAT_VERSION,
        "output": output,
        "kind": fmap.kind,
        "locations": fmap.locations.tolist(),
        "components": records,
        "provenance": fmap.provenance,
    }


def map_from_dict(d: dict):
    try:
        X = np.asarray(d["locations"], dtype=float).reshape(-1, 3)
        comps = []
        for rec in d["components"]:
            hp = Hyperparameters(**rec["hyperparams"])
            comps.append(GpComponent.fit(X, rec["targets"], hp, rec["mean_offset"],
                                         noise_everywhere=bool(rec.get("noise_everywhere", False))))
        kind = d["kind"]
        output = d.get("output", "vector" if len(comps) == 3 else "norm")
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed map record: {exc}") from None
    prov = d.get("provenance", {})
    if output == "norm":
        return NormFieldMap(comps[0], kind, prov)
    return VectorFieldMap(tuple(comps), kind, prov)


def save_map(fmap, path) -> None:
    with open(path, "w") as fh:
        json.dump(map_to_dict(fmap), fh, sort_keys=True)


def load_map(path):
    with open(path) as fh:
        return map_from_dict(json.load(fh))


def check_same_sources(a, b) -> bool:
    sa = a.provenance.get("source_flights")
    sb = b.provenance.get("source_flights")
    if sa is not None and sb is not None and sorted(sa) != sorted(sb):
        warnings.warn(f"maps were trained on different source data ({sa} vs {sb})", stacklevel=3)
        return False
    return True

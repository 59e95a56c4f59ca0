"""Map accuracy metrics: per-axis and norm RMSE, 2-sigma capture, the
consistency verdict, the grid-density sweep and vector-vs-norm comparison."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from magmap.ingest import ObservationSet
from magmap.mapping import (AXES, GridSpec, NormFieldMap, VectorFieldMap, build_compromise,
                            check_same_sources, generate_grid)

OUTLIER_THRESHOLD = 2.0  # uT
CONSISTENCY_THRESHOLD = 0.96


def rmse(residuals) -> np.ndarray:
    r = np.asarray(residuals, dtype=float)
    return np.sqrt(np.mean(r * r, axis=0))


def capture_fraction(residuals, sds, n_sigma: float = 2.0) -> np.ndarray:
    """Fraction of rows with ``|residual| <= n_sigma * sd``, per column."""
    r = np.abs(np.asarray(residuals, dtype=float))
    return np.mean(r <= n_sigma * np.asarray(sds, dtype=float), axis=0)


def _map_outputs(fmap, X, include_noise: bool):
    if isinstance(fmap, VectorFieldMap):
        return fmap.predict(X, include_noise=include_noise)
    if isinstance(fmap, NormFieldMap):
        m, s = fmap.predict(X, include_noise=include_noise)
        return m[:, None], s[:, None]
    raise TypeError(f"not a field map: {type(fmap).__name__}")


def _targets(fmap, obs: ObservationSet) -> np.ndarray:
    return obs.norms[:, None] if isinstance(fmap, NormFieldMap) else obs.Y


@dataclass
class ValidationReport:
    rmse: np.ndarray  # per component, uT
    rmse_norm: float  # sqrt of the sum of squared component RMSEs
    capture: np.ndarray  # per component 2-sigma capture fraction
    residuals: np.ndarray = field(repr=False)  # predicted - measured, (n, 3)
    sds: np.ndarray = field(repr=False)
    outliers: tuple = ()  # per component, |residual| values above 2 uT

    def to_dict(self) -> dict:
        return {
            "rmse_norm_uT": float(self.rmse_norm),
            "rmse_uT": {a: float(v) for a, v in zip(AXES, self.rmse)},
            "capture_2sigma": {a: float(v) for a, v in zip(AXES, self.capture)},
            "outliers_uT": {a: [round(float(v), 4) for v in o] for a, o in zip(AXES, self.outliers)},
            "n": int(len(self.residuals)),
        }


def validate(fmap: VectorFieldMap, obs: ObservationSet, *, include_noise: bool = True) -> ValidationReport:
    """Compare map predictions to measured fields.

    The 2-sigma capture uses the predictive SD of a new measurement (noise
    included) unless ``include_noise`` is False.
    """
    if len(obs) == 0:
        raise ValueError("validation set is empty")
    mean, sd = fmap.predict(obs.X, include_noise=include_noise)
    res = mean - obs.Y
    comp = rmse(res)
    abs_res = np.abs(res)
    outliers = tuple(tuple(np.sort(abs_res[abs_res[:, k] > OUTLIER_THRESHOLD, k])) for k in range(3))
    return ValidationReport(comp, float(np.sqrt(np.sum(comp ** 2))), capture_fraction(res, sd),
                            res, sd, outliers)


@dataclass
class Segment:
    start: int
    stop: int
    capture: np.ndarray
    consistent: bool


@dataclass
class ConsistencyReport:
    capture: np.ndarray
    consistent: bool
    threshold: float
    segments: list = field(default_factory=list)

    @property
    def failing_segments(self) -> list:
        return [s for s in self.segments if not s.consistent]

    @property
    def flagged(self) -> bool:
        """Inconsistent over the whole flight or in at least one window."""
        return (not self.consistent) or bool(self.failing_segments)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "capture_2sigma": [float(v) for v in self.capture],
            "consistent": self.consistent,
            "flagged": self.flagged,
            "segments": [{"start": s.start, "stop": s.stop, "capture_2sigma": [float(v) for v in s.capture],
                          "consistent": s.consistent} for s in self.segments],
        }


def _windows(n: int, window: int, stride: int) -> list[tuple[int, int]]:
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return [(s, s + window) for s in starts]


def consistency_check(fmap, obs: ObservationSet, threshold: float = CONSISTENCY_THRESHOLD,
                      window: int = 200, stride: int = 50, *, include_noise: bool = True) -> ConsistencyReport:
    """Whole-flight and sliding-window 2-sigma consistency of ``obs`` with ``fmap``.

    A set is consistent when every map output captures at least ``threshold``
    of its absolute errors within two predicted standard deviations.
    """
    n = len(obs)
    if window > n:
        raise ValueError(f"window {window} is larger than the observation set ({n})")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    mean, sd = _map_outputs(fmap, obs.X, include_noise)
    res = mean - _targets(fmap, obs)
    inside = np.abs(res) <= 2.0 * sd
    cap = inside.mean(axis=0)
    segments = []
    for a, b in _windows(n, window, stride):
        c = inside[a:b].mean(axis=0)
        segments.append(Segment(a, b, c, bool(np.all(c >= threshold))))
    return ConsistencyReport(cap, bool(np.all(cap >= threshold)), threshold, segments)


@dataclass
class DensityRow:
    spacing: float | tuple  # S, or per-axis (Sx, Sy, Sz)
    n1: int
    rmse_norm: list  # one value per validation set


@dataclass
class DensityStudyResult:
    rows: list
    validation_names: list = field(default_factory=list)

    @property
    def spacings(self) -> list:
        return [r.spacing for r in self.rows]

    @property
    def n1(self) -> list:
        return [r.n1 for r in self.rows]

    def table(self) -> np.ndarray:
        return np.array([r.rmse_norm for r in self.rows])

    def to_dict(self) -> dict:
        return {"validation": list(self.validation_names),
                "rows": [{"S_m": list(r.spacing) if isinstance(r.spacing, tuple) else r.spacing, "n1": r.n1,
                          "rmse_norm_uT": list(map(float, r.rmse_norm))} for r in self.rows]}


def density_sweep(intermediate: VectorFieldMap, S_values: Sequence[float],
                  validation: Sequence[ObservationSet], template: GridSpec | None = None,
                  names: Sequence[str] | None = None) -> DensityStudyResult:
    """Compromise-map norm RMSE for a uniform ``S x S x S`` grid at each spacing.

    An entry of ``S_values`` may also be a per-axis triple ``(Sx, Sy, Sz)``.
    """
    template = template or GridSpec()
    rows = []
    for S in S_values:
        S = tuple(float(v) for v in S) if np.ndim(S) else float(S)
        spec = dataclasses.replace(template, spacing=S if isinstance(S, tuple) else (S,) * 3)
        grid = generate_grid(spec)
        comp = build_compromise(intermediate, grid, spec)
        rows.append(DensityRow(S, len(grid), [validate(comp, v).rmse_norm for v in validation]))
    if names is None:
        names = ["+".join(v.sources) or f"set{k}" for k, v in enumerate(validation)]
    return DensityStudyResult(rows, list(names))


def compare_norm_maps(vec_map: VectorFieldMap, nrm_map: NormFieldMap, obs: ObservationSet) -> tuple[float, float]:
    """RMSE of |vector prediction| - |y| and of norm prediction - |y| over ``obs``."""
    check_same_sources(vec_map, nrm_map)
    if len(obs) == 0:
        raise ValueError("validation set is empty")
    vm, _ = vec_map.predict(obs.X)
    nm, _ = nrm_map.predict(obs.X)
    y = obs.norms
    e_vec = np.linalg.norm(vm, axis=1) - y
    e_nrm = nm - y
    return float(rmse(e_vec)), float(rmse(e_nrm))


# --------------------------------------------------------------------------
# reporting


def format_validation_table(rows: Sequence[tuple[str, ValidationReport]]) -> str:
    """Aligned text table: norm|x|y|z RMSE (uT) and x|y|z 2-sigma capture (%)."""
    head = f"{'Flight':<24} | {'Norm':>6} {'X':>6} {'Y':>6} {'Z':>6} || {'X%':>6} {'Y%':>6} {'Z%':>6}"
    lines = [head, "-" * len(head)]
    for name, r in rows:
        lines.append(f"{name:<24} | {r.rmse_norm:6.3f} {r.rmse[0]:6.3f} {r.rmse[1]:6.3f} {r.rmse[2]:6.3f} || "
                     f"{100 * r.capture[0]:6.2f} {100 * r.capture[1]:6.2f} {100 * r.capture[2]:6.2f}")
    return "\n".join(lines)


def format_norm_table(rows: Sequence[tuple[str, float, float]]) -> str:
    head = f"{'Flight':<24} | {'e_vec_nrm':>9} {'e_nrm_nrm':>9}"
    lines = [head, "-" * len(head)]
    lines += [f"{name:<24} | {a:9.3f} {b:9.3f}" for name, a, b in rows]
    return "\n".join(lines)


def _fmt_spacing(S) -> str:
    return ",".join(f"{v:g}" for v in S) if isinstance(S, tuple) else f"{S:.2f}"


def format_density_table(result: DensityStudyResult) -> str:
    names = result.validation_names
    head = f"{'S (m)':>6} {'n1':>6} | " + " ".join(f"{n:>10}" for n in names)
    lines = [head, "-" * len(head)]
    for r in result.rows:
        lines.append(f"{_fmt_spacing(r.spacing):>6} {r.n1:6d} | " + " ".join(f"{v:10.3f}" for v in r.rmse_norm))
    return "\n".join(lines)


def write_residuals(report: ValidationReport, obs: ObservationSet, path) -> None:
    """Per-point residuals and predictive SDs for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "x", "y", "z", "res_x", "res_y", "res_z", "sd_x", "sd_y", "sd_z"])
        for t, x, r, s in zip(obs.t, obs.X, report.residuals, report.sds):
            w.writerow([repr(float(v)) for v in (t, *x, *r, *s)])

"""Synthetic magnetic environments, scanning trajectories and corrupted logs.

The field is a uniform background plus point dipoles standing in for
building steel. Trajectories are boustrophedon ("lawnmower") scans with a
trapezoidal speed profile on every straight stride.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from magmap.calibration import CalibrationParams, forward_model
from magmap.ingest import FlightLog, MagSeries, PoseSeries

MU0_OVER_4PI = 1e-7  # T m / A
TESLA_TO_MICRO = 1e6


class FieldSingularityError(ValueError):
    """Query point coincides with a dipole."""


@dataclass(frozen=True, eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(3)
        hi = np.asarray(self.upper, dtype=float).reshape(3)
        if not np.all(lo < hi):
            raise ValueError("box bounds must satisfy min < max on every axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((p >= self.lower - tol) & (p <= self.upper + tol), axis=1)

    def to_list(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.lower, self.upper)]

    @classmethod
    def from_list(cls, pairs) -> "Box":
        pairs = np.asarray(pairs, dtype=float)
        return cls(pairs[:, 0], pairs[:, 1])


# 4 m x 3 m x 2.25 m flight volume; z points down, the floor is z = 0
WORKSPACE = Box((-2.0, -1.5, -2.25), (2.0, 1.5, -0.5))
GROUND_Z = 0.0


@dataclass(frozen=True, eq=False)
class DipoleSource:
    position: np.ndarray  # m
    moment: np.ndarray  # A m^2

    def __post_init__(self):
        for name in ("position", "moment"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"dipole {name} must be finite")
            object.__setattr__(self, name, v)


@dataclass(frozen=True, eq=False)
class Environment:
    background_field: np.ndarray  # uT
    dipoles: tuple[DipoleSource, ...] = ()
    workspace_bounds: Box = WORKSPACE

    def __post_init__(self):
        object.__setattr__(self, "background_field",
                           np.asarray(self.background_field, dtype=float).reshape(3))
        object.__setattr__(self, "dipoles", tuple(self.dipoles))

    def check_dipoles_outside(self, margin: float = 0.0) -> None:
        """Raise if any dipole lies inside the flight volume (or the takeoff column)."""
        lo = self.workspace_bounds.lower.copy()
        hi = self.workspace_bounds.upper.copy()
        hi[2] = max(hi[2], GROUND_Z)
        box = Box(lo - margin, hi + margin)
        for k, d in enumerate(self.dipoles):
            if box.contains(d.position, tol=0.0)[0]:
                raise ValueError(f"dipole {k} at {d.position.tolist()} lies inside the flight volume")

    def field(self, r) -> np.ndarray:
        return evaluate_field(self, r)

    def to_dict(self) -> dict:
        return {
            "background_field_uT": self.background_field.tolist(),
            "dipoles": [{"position_m": d.position.tolist(), "moment_Am2": d.moment.tolist()}
                        for d in self.dipoles],
            "workspace_bounds_m": self.workspace_bounds.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        dip = tuple(DipoleSource(x["position_m"], x["moment_Am2"]) for x in d.get("dipoles", []))
        bounds = Box.from_list(d["workspace_bounds_m"]) if "workspace_bounds_m" in d else WORKSPACE
        return cls(d["background_field_uT"], dip, bounds)


def dipole_field(dipole: DipoleSource, r) -> np.ndarray:
    """Field of one point dipole at points ``r`` (..., 3), in uT."""
    r = np.asarray(r, dtype=float)
    d = r - dipole.position
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(dist < 1e-12):
        raise FieldSingularityError("query point coincides with a dipole position")
    rhat = d / dist
    mdotr = np.sum(rhat * dipole.moment, axis=-1, keepdims=True)
    return MU0_OVER_4PI * TESLA_TO_MICRO * (3.0 * mdotr * rhat - dipole.moment) / dist ** 3


def evaluate_field(env: Environment, r) -> np.ndarray:
    """Background plus the superposed dipole fields at ``r`` (a 3-vector or (n, 3))."""
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("query position must be finite")
    out = np.broadcast_to(env.background_field, r.shape).copy()
    for dip in env.dipoles:
        out += dipole_field(dip, r)
    return out


# --------------------------------------------------------------------------
# trajectories


def _lattice(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def _segment_profile(length: float, vmax: float, amax: float) -> tuple[float, float, float]:
    """(accel time, cruise time, peak speed) of a rest-to-rest trapezoid."""
    if length <= 0:
        return 0.0, 0.0, 0.0
    if length >= vmax ** 2 / amax:
        ta = vmax / amax
        return ta, (length - vmax ** 2 / amax) / vmax, vmax
    vp = np.sqrt(length * amax)
    return vp / amax, 0.0, vp


def _distance_along(tau, ta, tc, vp, amax):
    tau = np.asarray(tau, dtype=float)
    d_acc = 0.5 * amax * ta ** 2
    s = np.where(tau < ta, 0.5 * amax * tau ** 2, 0.0)
    s = np.where((tau >= ta) & (tau < ta + tc), d_acc + vp * (tau - ta), s)
    td = tau - ta - tc
    s = np.where(tau >= ta + tc, d_acc + vp * tc + vp * td - 0.5 * amax * td ** 2, s)
    return s


def waypoints_to_poses(waypoints, speed_limit: float, sample_rate: float, *,
                       accel_limit: float = 1.0, attitude_sd_deg: float = 0.0,
                       seed: int = 0) -> PoseSeries:
    """Fly straight rest-to-rest strides between waypoints and sample at ``sample_rate``."""
    if not speed_limit > 0 or not accel_limit > 0:
        raise ValueError("speed and acceleration limits must be positive")
    if not sample_rate > 0:
        raise ValueError("sample_rate must be positive")
    wp = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    keep = np.concatenate([[True], np.linalg.norm(np.diff(wp, axis=0), axis=1) > 0])
    wp = wp[keep]
    seg = np.diff(wp, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    profiles = [_segment_profile(L, speed_limit, accel_limit) for L in lengths]
    durations = np.array([2 * ta + tc for ta, tc, _ in profiles])
    starts = np.concatenate([[0.0], np.cumsum(durations)])
    total = starts[-1]

    t = np.arange(int(np.floor(total * sample_rate + 1e-9)) + 1) / sample_rate
    pos = np.empty((len(t), 3))
    if len(lengths) == 0:
        pos[:] = wp[0]
    else:
        k = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(lengths) - 1)
        for j in range(len(lengths)):
            m = k == j
            if not np.any(m):
                continue
            ta, tc, vp = profiles[j]
            tau = np.minimum(t[m] - starts[j], durations[j])
            s = _distance_along(tau, ta, tc, vp, accel_limit)
            pos[m] = wp[j] + np.outer(np.clip(s / lengths[j], 0.0, 1.0), seg[j])

    quat = np.zeros((len(t), 4))
    quat[:, 0] = 1.0
    if attitude_sd_deg > 0:
        rng = np.random.default_rng(seed)
        rotvec = rng.normal(scale=np.deg2rad(attitude_sd_deg), size=(len(t), 3))
        q = Rotation.from_rotvec(rotvec).as_quat()
        quat = q[:, [3, 0, 1, 2]]
        quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return PoseSeries(t, pos, quat)


def lawnmower_waypoints(altitudes: Sequence[float], x_stride: float = 4.0, y_spacing: float = 0.25, *,
                        bounds: Box = WORKSPACE, lane_axis: str = "x", takeoff: bool = True,
                        ground_z: float = GROUND_Z) -> np.ndarray:
    """Corner points of a multi-altitude scan starting and ending over the origin.

    Lanes of length ``x_stride`` run along ``lane_axis`` (centred on 0) and are
    stepped by ``y_spacing`` across the other horizontal axis. One diagonal
    leaves the origin for the first corner at the first altitude; one diagonal
    returns from the last corner at the final altitude.
    """
    altitudes = [float(z) for z in altitudes]
    if not altitudes:
        raise ValueError("at least one altitude is required")
    if not y_spacing > 0:
        raise ValueError("y_spacing must be positive")
    if lane_axis not in ("x", "y"):
        raise ValueError("lane_axis must be 'x' or 'y'")
    zlo, zhi = bounds.lower[2], bounds.upper[2]
    for z in altitudes:
        if not (zlo - 1e-9 <= z <= zhi + 1e-9):
            raise ValueError(f"altitude {z} lies outside the workspace z range [{zlo}, {zhi}]")
    a, c = (0, 1) if lane_axis == "x" else (1, 0)
    if x_stride > bounds.upper[a] - bounds.lower[a] + 1e-9 or x_stride <= 0:
        raise ValueError("stride exceeds the workspace span along the lane axis")
    half = x_stride / 2.0
    if half > min(bounds.upper[a], -bounds.lower[a]) + 1e-9:
        raise ValueError("stride centred on the origin would leave the workspace")
    cross = _lattice(bounds.lower[c], bounds.upper[c], y_spacing)

    def point(along, across, z):
        p = np.zeros(3)
        p[a], p[c], p[2] = along, across, z
        return p

    pts = []
    z0 = altitudes[0]
    if takeoff:
        pts.append(point(0.0, 0.0, ground_z))
    pts.append(point(0.0, 0.0, z0))
    along = -half
    for level, z in enumerate(altitudes):
        lanes = cross if level % 2 == 0 else cross[::-1]
        # diagonal from the origin on the first slice, vertical stride afterwards
        pts.append(point(along, lanes[0], z))
        for lane in lanes:
            pts.append(point(along, lane, z))
            along = -along
            pts.append(point(along, lane, z))
    pts.append(point(0.0, 0.0, altitudes[-1]))
    if takeoff:
        pts.append(point(0.0, 0.0, ground_z))
    return np.array(pts)


def lawnmower_trajectory(altitudes: Sequence[float], x_stride: float = 4.0, y_spacing: float = 0.25,
                         speed_limit: float = 1.9, sample_rate: float = 200.0, *,
                         bounds: Box = WORKSPACE, lane_axis: str = "x", takeoff: bool = True,
                         accel_limit: float = 1.0, attitude_sd_deg: float = 0.0,
                         seed: int = 0) -> PoseSeries:
    """Sampled boustrophedon scan; see :func:`lawnmower_waypoints` for the path.

    With ``takeoff`` the flight also climbs from and descends to the floor above
    the origin, as the real flights do. Attitude is identity unless
    ``attitude_sd_deg`` asks for random small-angle perturbations.
    """
    wp = lawnmower_waypoints(altitudes, x_stride, y_spacing, bounds=bounds,
                             lane_axis=lane_axis, takeoff=takeoff)
    return waypoints_to_poses(wp, speed_limit, sample_rate, accel_limit=accel_limit,
                              attitude_sd_deg=attitude_sd_deg, seed=seed)


def tumble_trajectory(n: int, position=(0.0, 0.0, 0.0), sample_rate: float = 10.0,
                      seed: int = 0, steps: int = 1) -> PoseSeries:
    """Stationary sensor turned through uniformly random attitudes (calibration data).

    With ``steps == 1`` every sample has an independent attitude. Larger values
    draw one key attitude per ``steps`` samples and slerp between keys, which
    mimics a continuous hand tumble.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    if steps == 1:
        rot = Rotation.random(n, random_state=rng)
    else:
        n_keys = int(np.ceil((n - 1) / steps)) + 1
        keys = Rotation.random(n_keys, random_state=rng)
        rot = Slerp(np.arange(n_keys) * steps, keys)(np.arange(n))
    q = rot.as_quat()[:, [3, 0, 1, 2]]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    t = np.arange(n) / sample_rate
    return PoseSeries(t, np.tile(np.asarray(position, dtype=float), (n, 1)), q)


# altitude sets of the multi-altitude scans flown for the compromise-map study
FLIGHT_PROFILES = {
    "lower_four": {"altitudes": [-0.5, -0.75, -1.0, -1.25]},
    "upper_four": {"altitudes": [-1.5, -1.75, -2.0, -2.25]},
    "scan_gamma": {"altitudes": [-0.5, -1.375, -2.25]},
    "scan_epsilon": {"altitudes": [-0.75, -1.5, -2.0]},
    "scan_epsilon_perp": {"altitudes": [-0.75, -1.5, -2.0], "lane_axis": "y", "x_stride": 3.0},
    "single_1_5": {"altitudes": [-1.5]},
}


def profile_trajectory(name: str, sample_rate: float = 200.0, **overrides) -> PoseSeries:
    kw = dict(FLIGHT_PROFILES[name])
    kw.update(overrides)
    return lawnmower_trajectory(sample_rate=sample_rate, **kw)


# --------------------------------------------------------------------------
# corrupted logs


@dataclass(eq=False)
class CorruptionProfile:
    """Sensor and vehicle disturbances applied by :func:`simulate_flight`.

    ``flight_bias`` is a body-frame offset held for the whole flight;
    ``bias_switch = (t, new_bias)`` replaces it from time ``t`` on.
    ``pose_dropouts`` lists ``(t0, t1)`` windows with no motion-capture pose.
    """

    gaussian_noise_sd: float = 0.0
    spurious_rate: float = 0.0
    spurious_magnitude: float = 0.0
    flight_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_switch: tuple[float, np.ndarray] | None = None
    pose_dropouts: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.spurious_rate <= 1.0:
            raise ValueError("spurious_rate must lie in [0, 1]")
        if self.gaussian_noise_sd < 0 or self.spurious_magnitude < 0:
            raise ValueError("noise magnitudes must be non-negative")
        self.flight_bias = np.asarray(self.flight_bias, dtype=float).reshape(3)
        if self.bias_switch is not None:
            ts, b = self.bias_switch
            self.bias_switch = (float(ts), np.asarray(b, dtype=float).reshape(3))
        self.pose_dropouts = tuple((float(a), float(b)) for a, b in self.pose_dropouts)

    def bias_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.tile(self.flight_bias, (len(t), 1))
        if self.bias_switch is not None:
            ts, b = self.bias_switch
            out[t >= ts] = b
        return out

    def to_dict(self) -> dict:
        return {
            "gaussian_noise_sd_uT": self.gaussian_noise_sd,
            "spurious_rate": self.spurious_rate,
            "spurious_magnitude_uT": self.spurious_magnitude,
            "flight_bias_uT": self.flight_bias.tolist(),
            "bias_switch": None if self.bias_switch is None else
            {"t_s": self.bias_switch[0], "bias_uT": self.bias_switch[1].tolist()},
            "pose_dropouts_s": [list(w) for w in self.pose_dropouts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionProfile":
        sw = d.get("bias_switch")
        return cls(
            gaussian_noise_sd=float(d.get("gaussian_noise_sd_uT", 0.0)),
            spurious_rate=float(d.get("spurious_rate", 0.0)),
            spurious_magnitude=float(d.get("spurious_magnitude_uT", 0.0)),
            flight_bias=d.get("flight_bias_uT", [0.0, 0.0, 0.0]),
            bias_switch=None if sw is None else (sw["t_s"], sw["bias_uT"]),
            pose_dropouts=[tuple(w) for w in d.get("pose_dropouts_s", [])],
        )


def simulate_flight(env: Environment, trajectory: PoseSeries, profile: CorruptionProfile | None = None,
                    seed: int = 0, *, flight_id: str = "t0_00",
                    sensor: CalibrationParams | None = None) -> FlightLog:
    """Body-frame magnetometer log for a trajectory through ``env``.

    Each sample is ``R^T B(r) + bias(t)``, passed through the ``sensor`` error
    model if given, plus Gaussian noise; with probability ``spurious_rate`` one
    random axis is pushed by +/- ``spurious_magnitude``. Magnetometer samples
    share the trajectory timestamps; poses inside a dropout window are removed
    and the affected samples carry the age of the last pose received.
    """
    profile = profile or CorruptionProfile()
    n = len(trajectory)
    if n == 0:
        raise ValueError("trajectory is empty")
    rng = np.random.default_rng(seed)
    world = evaluate_field(env, trajectory.position)
    body = trajectory.rotations().inv().apply(world) + profile.bias_at(trajectory.t)
    if sensor is not None:
        body = forward_model(sensor, body)
    noise = rng.normal(size=(n, 3))
    spike = rng.random(n) < profile.spurious_rate
    axis = rng.integers(0, 3, size=n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    if profile.gaussian_noise_sd > 0:
        body = body + profile.gaussian_noise_sd * noise
    if profile.spurious_magnitude > 0 and np.any(spike):
        rows = np.flatnonzero(spike)
        body[rows, axis[rows]] += sign[rows] * profile.spurious_magnitude

    t = trajectory.t
    have_pose = np.ones(n, dtype=bool)
    for t0, t1 in profile.pose_dropouts:
        have_pose &= ~((t >= t0) & (t < t1))
    have_pose[0] = True
    pose_idx = np.flatnonzero(have_pose)
    last = pose_idx[np.searchsorted(pose_idx, np.arange(n), side="right") - 1]
    age = t - t[last]
    return FlightLog(flight_id, trajectory.take(pose_idx), MagSeries(t, body, age))


# profiles of the multi-flight survey: four training and four held-out flights
CAMPAIGN_TRAIN = ("lower_four", "upper_four", "scan_gamma", "scan_epsilon_perp")
CAMPAIGN_VALIDATE = ("lower_four", "upper_four", "scan_gamma", "scan_epsilon")


def survey_campaign(env: Environment, profiles: Sequence[str], *, bias_sd: float = 0.5, seed: int = 0,
                    series: int = 9, first: int = 0, noise_sd: float = 0.15, spurious_rate: float = 0.02,
                    spurious_magnitude: float = 3.0, sample_rate: float = 200.0) -> list[FlightLog]:
    """One simulated flight per profile, each with its own constant bias.

    Biases are drawn i.i.d. ``N(0, bias_sd^2)`` per axis. Flight ids run
    ``tS_FF, tS_FF+1, ...`` for series ``S`` starting at ``first``.
    """
    ss = np.random.SeedSequence(seed)
    bias_seed, *flight_seeds = ss.spawn(len(profiles) + 1)
    biases = np.random.default_rng(bias_seed).normal(scale=bias_sd, size=(len(profiles), 3))
    logs = []
    for k, (name, b, fs) in enumerate(zip(profiles, biases, flight_seeds)):
        prof = CorruptionProfile(gaussian_noise_sd=noise_sd, spurious_rate=spurious_rate,
                                 spurious_magnitude=spurious_magnitude, flight_bias=b)
        logs.append(simulate_flight(env, profile_trajectory(name, sample_rate), prof,
                                    int(fs.generate_state(1)[0]), flight_id=f"t{series}_{first + k:02d}"))
    return logs


# --------------------------------------------------------------------------
# scenarios


@dataclass(eq=False)
class Scenario:
    id: str
    environment: Environment
    trajectory: dict
    corruption: CorruptionProfile
    seed: int = 0
    sensor: CalibrationParams | None = None

    def build_trajectory(self) -> PoseSeries:
        spec = dict(self.trajectory)
        kind = spec.pop("type", "lawnmower")
        if kind == "lawnmower":
            if "profile" in spec:
                name = spec.pop("profile")
                return profile_trajectory(name, **spec)
            return lawnmower_trajectory(**spec)
        if kind == "tumble":
            spec.setdefault("seed", self.seed)
            return tumble_trajectory(**spec)
        raise ValueError(f"unknown trajectory type {kind!r}")

    def run(self) -> FlightLog:
        return simulate_flight(self.environment, self.build_trajectory(), self.corruption,
                               self.seed, flight_id=self.id, sensor=self.sensor)


def scenario_from_dict(d: dict) -> Scenario:
    env = d["environment"]
    if isinstance(env, str):
        env = load_environment(env)
    else:
        env = Environment.from_dict(env)
    env.check_dipoles_outside()
    sensor = d.get("sensor")
    return Scenario(
        id=d.get("id", "t0_00"),
        environment=env,
        trajectory=d.get("trajectory", {"type": "lawnmower", "profile": "single_1_5"}),
        corruption=CorruptionProfile.from_dict(d.get("corruption", {})),
        seed=int(d.get("seed", 0)),
        sensor=None if sensor is None else CalibrationParams.from_dict(sensor),
    )


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def load_environment(name_or_path: str = "robot_fly_lab") -> Environment:
    """Load an environment JSON, either a file path or a bundled name."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        text = resources.files("magmap.data").joinpath(f"{name_or_path}.json").read_text()
    env = Environment.from_dict(json.loads(text))
    env.check_dipoles_outside()
    return env

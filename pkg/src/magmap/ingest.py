"""Flight-log containers and the preprocessing chain that turns raw logs into
world-frame observation sets.

The fixed order is median filter -> downsample -> stale-pose replacement ->
calibration -> rotation into the world frame (see :func:`preprocess`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from magmap.calibration import CalibrationParams, inverse_model

FLIGHT_LOG_COLUMNS = ("t_s", "px", "py", "pz", "qw", "qx", "qy", "qz", "bx_uT", "by_uT", "bz_uT")
POSE_AGE_COLUMN = "pose_age_s"
OBSERVATION_COLUMNS = ("x", "y", "z", "bx_uT", "by_uT", "bz_uT", "t_s")

STALE_POSE_AGE = 0.05
MEDIAN_WINDOW = 5


class LogFormatError(ValueError):
    """Malformed flight-log or observation file."""


@dataclass(frozen=True)
class PoseSample:
    t: float
    position: np.ndarray
    attitude: np.ndarray  # unit quaternion (w, x, y, z), body -> world


@dataclass(frozen=True)
class MagSample:
    t: float
    field_body: np.ndarray
    pose_age: float = 0.0


def _as_strictly_increasing(t: np.ndarray, what: str) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1)
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{what}: non-finite timestamps")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError(f"{what}: timestamps must be strictly increasing")
    return t


@dataclass(frozen=True, eq=False)
class PoseSeries:
    """Columnar pose stream; ``attitude`` rows are (w, x, y, z) quaternions."""

    t: np.ndarray
    position: np.ndarray
    attitude: np.ndarray

    def __post_init__(self):
        t = _as_strictly_increasing(self.t, "poses")
        pos = np.asarray(self.position, dtype=float).reshape(-1, 3)
        q = np.asarray(self.attitude, dtype=float).reshape(-1, 4)
        if not (len(t) == len(pos) == len(q)):
            raise ValueError("pose arrays differ in length")
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("pose attitudes must be unit quaternions (|q| = 1 within 1e-9)")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "attitude", q)

    @classmethod
    def from_samples(cls, samples: Iterable[PoseSample]) -> "PoseSeries":
        samples = list(samples)
        return cls(
            np.array([s.t for s in samples], dtype=float),
            np.array([s.position for s in samples], dtype=float).reshape(-1, 3),
            np.array([s.attitude for s in samples], dtype=float).reshape(-1, 4),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> PoseSample:
        return PoseSample(float(self.t[i]), self.position[i].copy(), self.attitude[i].copy())

    def __iter__(self) -> Iterator[PoseSample]:
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "PoseSeries":
        return PoseSeries(self.t[idx], self.position[idx], self.attitude[idx])

    def rotations(self) -> Rotation:
        return Rotation.from_quat(self.attitude[:, [1, 2, 3, 0]])


@dataclass(frozen=True, eq=False)
class MagSeries:
    """Columnar magnetometer stream (body frame, uT)."""

    t: np.ndarray
    field_body: np.ndarray
    pose_age: np.ndarray | None = None

    def __post_init__(self):
        t = _as_strictly_increasing(self.t, "magnetometer samples")
        b = np.asarray(self.field_body, dtype=float).reshape(-1, 3)
        age = np.zeros(len(t)) if self.pose_age is None else np.asarray(self.pose_age, dtype=float).reshape(-1)
        if not (len(t) == len(b) == len(age)):
            raise ValueError("magnetometer arrays differ in length")
        if np.any(age < 0):
            raise ValueError("pose_age must be >= 0")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "field_body", b)
        object.__setattr__(self, "pose_age", age)

    @classmethod
    def from_samples(cls, samples: Iterable[MagSample]) -> "MagSeries":
        samples = list(samples)
        return cls(
            np.array([s.t for s in samples], dtype=float),
            np.array([s.field_body for s in samples], dtype=float).reshape(-1, 3),
            np.array([s.pose_age for s in samples], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> MagSample:
        return MagSample(float(self.t[i]), self.field_body[i].copy(), float(self.pose_age[i]))

    def __iter__(self) -> Iterator[MagSample]:
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "MagSeries":
        return MagSeries(self.t[idx], self.field_body[idx], self.pose_age[idx])


def _as_mag_series(samples) -> MagSeries:
    if isinstance(samples, MagSeries):
        return samples
    if isinstance(samples, FlightLog):
        return samples.mags
    return MagSeries.from_samples(samples)


@dataclass(frozen=True, eq=False)
class FlightLog:
    """Time-stamped poses and body-frame magnetometer samples from one flight.

    ``id`` follows the ``tY_XX`` naming (series Y, two-digit flight XX).
    """

    id: str
    poses: PoseSeries
    mags: MagSeries


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """World-frame observations: locations ``X`` (n, 3) in m and fields ``Y`` (n, 3) in uT."""

    X: np.ndarray
    Y: np.ndarray
    t: np.ndarray | None = None
    sources: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, 3)
        Y = np.asarray(self.Y, dtype=float).reshape(-1, 3)
        t = np.full(len(X), np.nan) if self.t is None else np.asarray(self.t, dtype=float).reshape(-1)
        if not (len(X) == len(Y) == len(t)):
            raise ValueError("observation arrays differ in length")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "sources", tuple(self.sources))

    def __len__(self) -> int:
        return len(self.X)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.Y, axis=1)

    def take(self, idx) -> "ObservationSet":
        return ObservationSet(self.X[idx], self.Y[idx], self.t[idx], self.sources)


def merge_observations(sets: Sequence[ObservationSet]) -> ObservationSet:
    """Concatenate observation sets (e.g. several training flights) in order."""
    if not sets:
        raise ValueError("nothing to merge")
    sources: list[str] = []
    for s in sets:
        sources.extend(x for x in s.sources if x not in sources)
    return ObservationSet(
        np.vstack([s.X for s in sets]),
        np.vstack([s.Y for s in sets]),
        np.concatenate([s.t for s in sets]),
        tuple(sources),
    )


# --------------------------------------------------------------------------
# preprocessing


def _running_median(x: np.ndarray, window: int) -> np.ndarray:
    n = len(x)
    half = window // 2
    out = np.empty_like(x)
    if n >= window:
        windows = np.lib.stride_tricks.sliding_window_view(x, window, axis=0)
        out[half:n - half] = np.median(windows, axis=-1)
    # shrink symmetrically near the ends so no samples are discarded
    for i in list(range(min(half, n))) + list(range(max(n - half, half), n)):
        h = min(half, i, n - 1 - i)
        out[i] = np.median(x[i - h:i + h + 1], axis=0)
    return out


def median_filter(samples, window: int = MEDIAN_WINDOW) -> MagSeries:
    """Centered per-axis moving median.

    Near the ends the window shrinks symmetrically (i.e. sample ``i`` uses
    ``min(window // 2, i, n - 1 - i)`` neighbours on each side), so the
    output has the same length as the input.
    """
    mags = _as_mag_series(samples)
    if isinstance(window, bool) or int(window) != window or window < 1 or window % 2 == 0:
        raise ValueError(f"median window must be a positive odd integer, got {window!r}")
    if window > len(mags):
        raise ValueError(f"median window {window} exceeds series length {len(mags)}")
    return MagSeries(mags.t, _running_median(mags.field_body, int(window)), mags.pose_age)


def downsample(samples, target_rate: float) -> MagSeries:
    """Select the raw sample nearest to each slot ``t0 + k / target_rate``.

    Repeated picks (gaps in the log) are collapsed, so the output never
    contains duplicates and stays in time order.
    """
    mags = _as_mag_series(samples)
    if len(mags) == 0:
        raise ValueError("cannot downsample an empty log")
    if not target_rate > 0:
        raise ValueError("target_rate must be positive")
    t = mags.t
    if len(t) > 1:
        native = 1.0 / np.median(np.diff(t))
        if target_rate > native * (1 + 1e-6):
            raise ValueError(f"target rate {target_rate} Hz exceeds native rate {native:.6g} Hz")
    n_slots = int(np.floor((t[-1] - t[0]) * target_rate + 1e-9)) + 1
    slots = t[0] + np.arange(n_slots) / target_rate
    right = np.clip(np.searchsorted(t, slots), 1, max(len(t) - 1, 1))
    left = right - 1
    if len(t) == 1:
        idx = np.zeros(n_slots, dtype=int)
    else:
        # ties go to the earlier sample
        idx = np.where(slots - t[left] <= t[right] - slots, left, right)
    idx = np.unique(idx)
    return mags.take(idx)


def replace_stale(samples, max_age: float = STALE_POSE_AGE, pool=None) -> MagSeries:
    """Swap samples whose pose is older than ``max_age`` for the nearest fresh one.

    Replacements are drawn from ``pool`` (normally the full filtered log the
    selection came from; defaults to ``samples`` itself). A replacement that is
    already in the set is kept only once.
    """
    sel = _as_mag_series(samples)
    src = sel if pool is None else _as_mag_series(pool)
    stale = sel.pose_age > max_age
    if not np.any(stale):
        return sel
    fresh_idx = np.flatnonzero(src.pose_age <= max_age)
    if fresh_idx.size == 0:
        raise ValueError("no sample with a fresh pose exists to replace stale samples")
    ft = src.t[fresh_idx]

    t_out = sel.t.copy()
    b_out = sel.field_body.copy()
    a_out = sel.pose_age.copy()
    for i in np.flatnonzero(stale):
        k = np.searchsorted(ft, sel.t[i])
        cands = [c for c in (k - 1, k) if 0 <= c < len(ft)]
        j = fresh_idx[min(cands, key=lambda c: (abs(ft[c] - sel.t[i]), ft[c]))]
        t_out[i], b_out[i], a_out[i] = src.t[j], src.field_body[j], src.pose_age[j]
    order = np.argsort(t_out, kind="stable")
    t_sorted = t_out[order]
    keep = np.concatenate([[True], np.diff(t_sorted) > 0])
    order = order[keep]
    return MagSeries(t_out[order], b_out[order], a_out[order])


def _interp_positions(poses: PoseSeries, t: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(t, poses.t, poses.position[:, k]) for k in range(3)])


def _interp_rotations(poses: PoseSeries, t: np.ndarray) -> Rotation:
    if len(poses) == 1:
        return Rotation.from_quat(np.repeat(poses.attitude[:, [1, 2, 3, 0]], len(t), axis=0))
    return Slerp(poses.t, poses.rotations())(t)


def to_world(samples, poses: PoseSeries, calib: CalibrationParams | None = None, *,
             sources: tuple[str, ...] = ()) -> ObservationSet:
    """Calibrate body-frame samples and rotate them into the world frame.

    Positions (and attitudes, by slerp) are linearly interpolated between the
    poses bracketing each magnetometer timestamp.
    """
    mags = _as_mag_series(samples)
    if len(poses) == 0:
        raise ValueError("no poses")
    t = mags.t
    if len(t) and (t[0] < poses.t[0] - 1e-12 or t[-1] > poses.t[-1] + 1e-12):
        raise ValueError("magnetometer timestamps fall outside the pose time range")
    tq = np.clip(t, poses.t[0], poses.t[-1])
    b = mags.field_body if calib is None else inverse_model(calib, mags.field_body)
    Y = _interp_rotations(poses, tq).apply(b) if len(t) else np.empty((0, 3))
    X = _interp_positions(poses, tq)
    return ObservationSet(X, Y, t, sources)


def preprocess(log: FlightLog, rate: float, calib: CalibrationParams | None = None, *,
               window: int = MEDIAN_WINDOW, max_age: float = STALE_POSE_AGE) -> ObservationSet:
    """Run the full chain on one log and return its world-frame observations."""
    filtered = median_filter(log.mags, window)
    picked = downsample(filtered, rate)
    fresh = replace_stale(picked, max_age, pool=filtered)
    return to_world(fresh, log.poses, calib, sources=(log.id,))


# --------------------------------------------------------------------------
# CSV I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def write_flight_log(log: FlightLog, path) -> None:
    """One row per magnetometer sample, carrying the pose it was logged with.

    The pose written is the latest one at or before the sample; a trailing
    ``pose_age_s`` column is added only when some pose is older than the sample.
    """
    mags, poses = log.mags, log.poses
    idx = np.searchsorted(poses.t, mags.t - mags.pose_age + 1e-12, side="right") - 1
    if np.any(idx < 0):
        raise ValueError("magnetometer sample precedes every pose")
    with_age = bool(np.any(mags.pose_age > 0))
    header = list(FLIGHT_LOG_COLUMNS) + ([POSE_AGE_COLUMN] if with_age else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(mags)):
            j = idx[i]
            row = [mags.t[i], *poses.position[j], *poses.attitude[j], *mags.field_body[i]]
            if with_age:
                row.append(mags.pose_age[i])
            w.writerow([_fmt(v) for v in row])


def _read_table(path, required: Sequence[str]) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LogFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise LogFormatError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
    data = np.empty((len(rows) - 1, len(header)))
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise LogFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        for k, cell in enumerate(row):
            try:
                data[lineno - 2, k] = float(cell)
            except ValueError:
                raise LogFormatError(f"{path}: line {lineno}: field {header[k]!r}: not a number: {cell!r}") from None
    return header, data


def read_flight_log(path, log_id: str | None = None) -> FlightLog:
    header, data = _read_table(path, FLIGHT_LOG_COLUMNS)
    col = {name: data[:, header.index(name)] for name in header}
    t = col["t_s"]
    age = col.get(POSE_AGE_COLUMN, np.zeros(len(t)))
    pose_t = np.round(t - age, 12)
    _, first = np.unique(pose_t, return_index=True)
    pos = np.column_stack([col["px"], col["py"], col["pz"]])
    quat = np.column_stack([col["qw"], col["qx"], col["qy"], col["qz"]])
    try:
        poses = PoseSeries(pose_t[first], pos[first], quat[first])
        mags = MagSeries(t, np.column_stack([col["bx_uT"], col["by_uT"], col["bz_uT"]]), age)
    except ValueError as exc:
        raise LogFormatError(f"{path}: {exc}") from None
    return FlightLog(log_id or Path(path).stem, poses, mags)


def write_observations(obs: ObservationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBSERVATION_COLUMNS)
        for x, y, t in zip(obs.X, obs.Y, obs.t):
            w.writerow([_fmt(v) for v in (*x, *y, t)])


def read_observations(path, sources: tuple[str, ...] = ()) -> ObservationSet:
    header, data = _read_table(path, OBSERVATION_COLUMNS)
    c = [header.index(name) for name in OBSERVATION_COLUMNS]
    try:
        return ObservationSet(data[:, c[:3]], data[:, c[3:6]], data[:, c[6]], sources or (Path(path).stem,))
    except ValueError as exc:
        raise LogFormatError(f"{path}: {exc}") from None

"""Nine-parameter magnetometer error model and its two-step least-squares fit.

Measurement model (noise omitted)::

    mx = a * Bx + x0
    my = b * (By cos(rho) + Bx sin(rho)) + y0
    mz = c * (Bx sin(lam) + By sin(phi) cos(lam) + Bz cos(phi) cos(lam)) + z0

The model is lower triangular in (Bx, By, Bz), so the inverse is solved by
back-substitution. Calibration minimises ``sum((B_R**2 - |g(m; theta)|**2)**2)``,
first over the biases alone and then over all nine terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PARAM_NAMES = ("scale_a", "scale_b", "scale_c", "bias_x0", "bias_y0", "bias_z0",
               "nonorth_rho", "nonorth_lambda", "nonorth_phi")


class CalibrationError(RuntimeError):
    """Calibration did not produce a usable fit."""


class SingularModelError(ValueError):
    """The magnetometer model cannot be inverted for these parameters."""


@dataclass(frozen=True, eq=False)
class CalibrationParams:
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    nonorth: np.ndarray = field(default_factory=lambda: np.zeros(3))  # (rho, lambda, phi), rad

    def __post_init__(self):
        for name in ("scale", "bias", "nonorth"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            object.__setattr__(self, name, v)

    @classmethod
    def identity(cls) -> "CalibrationParams":
        return cls()

    @classmethod
    def from_vector(cls, theta) -> "CalibrationParams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0:3], theta[3:6], theta[6:9])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.scale, self.bias, self.nonorth])

    def check(self) -> None:
        if np.any(self.scale <= 0):
            raise ValueError("scale factors must be positive")
        if np.any(np.abs(self.nonorth) >= np.pi / 2):
            raise ValueError("non-orthogonality angles must lie in (-pi/2, pi/2)")

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in zip(PARAM_NAMES, self.to_vector())}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationParams":
        try:
            return cls.from_vector([float(d[k]) for k in PARAM_NAMES])
        except KeyError as exc:
            raise ValueError(f"calibration record missing field {exc.args[0]!r}") from None


def forward_model(params: CalibrationParams, true_field) -> np.ndarray:
    """Measured field for a true field (rows of ``true_field`` are 3-vectors)."""
    B = np.asarray(true_field, dtype=float)
    a, b, c = params.scale
    rho, lam, phi = params.nonorth
    Bx, By, Bz = B[..., 0], B[..., 1], B[..., 2]
    mx = a * Bx + params.bias[0]
    my = b * (By * np.cos(rho) + Bx * np.sin(rho)) + params.bias[1]
    mz = c * (Bx * np.sin(lam) + By * np.sin(phi) * np.cos(lam)
              + Bz * np.cos(phi) * np.cos(lam)) + params.bias[2]
    return np.stack([mx, my, mz], axis=-1)


def _check_invertible(params: CalibrationParams) -> None:
    rho, lam, phi = params.nonorth
    if np.any(params.scale == 0):
        raise SingularModelError("zero scale factor")
    if abs(np.cos(rho)) < 1e-12 or abs(np.cos(phi) * np.cos(lam)) < 1e-12:
        raise SingularModelError("cos(rho) or cos(phi)cos(lambda) vanishes; model is singular")


def inverse_model(params: CalibrationParams, measured) -> np.ndarray:
    """True field recovered from measurements by back-substitution (x, then y, then z)."""
    _check_invertible(params)
    m = np.asarray(measured, dtype=float)
    a, b, c = params.scale
    rho, lam, phi = params.nonorth
    u = (m[..., 0] - params.bias[0]) / a
    v = (m[..., 1] - params.bias[1]) / b
    w = (m[..., 2] - params.bias[2]) / c
    Bx = u
    By = (v - Bx * np.sin(rho)) / np.cos(rho)
    Bz = (w - Bx * np.sin(lam) - By * np.sin(phi) * np.cos(lam)) / (np.cos(phi) * np.cos(lam))
    return np.stack([Bx, By, Bz], axis=-1)


def residuals(theta, measured, b_ref: float) -> np.ndarray:
    """``B_R**2 - |g(m; theta)|**2`` for every measurement."""
    B = inverse_model(CalibrationParams.from_vector(theta), measured)
    return b_ref ** 2 - np.sum(B * B, axis=-1)


def jacobian(theta, measured) -> np.ndarray:
    """Analytic d(residual)/d(theta), shape (n, 9), theta ordered as ``PARAM_NAMES``."""
    theta = np.asarray(theta, dtype=float)
    a, b, c, x0, y0, z0, rho, lam, phi = theta
    m = np.asarray(measured, dtype=float)
    u, v, w = m[:, 0] - x0, m[:, 1] - y0, m[:, 2] - z0
    cr, sr = np.cos(rho), np.sin(rho)
    cl, sl = np.cos(lam), np.sin(lam)
    cp, sp = np.cos(phi), np.sin(phi)

    Bx = u / a
    By = (v / b - Bx * sr) / cr
    Bz = (w / c - Bx * sl - By * sp * cl) / (cp * cl)

    # how a perturbation in Bx / By propagates down the triangle
    dBy_dBx = -sr / cr
    dBz_dBx = -sl / (cp * cl)
    dBz_dBy = -sp / cp

    n = len(m)
    dB = np.zeros((n, 9, 3))

    def via_bx(k, dbx):
        dby = dBy_dBx * dbx
        dB[:, k, 0] = dbx
        dB[:, k, 1] = dby
        dB[:, k, 2] = dBz_dBx * dbx + dBz_dBy * dby

    def via_by(k, dby):
        dB[:, k, 1] = dby
        dB[:, k, 2] = dBz_dBy * dby

    via_bx(0, -Bx / a)
    via_bx(3, np.full(n, -1.0 / a))
    via_by(1, -v / (b * b * cr))
    via_by(4, np.full(n, -1.0 / (b * cr)))
    via_by(6, (v / b) * sr / cr ** 2 - Bx / cr ** 2)
    dB[:, 2, 2] = -w / (c * c * cp * cl)
    dB[:, 5, 2] = -1.0 / (c * cp * cl)
    dB[:, 7, 2] = ((w / c) * sl - Bx) / (cp * cl ** 2)
    dB[:, 8, 2] = (w / c) * sp / (cp ** 2 * cl) - Bx * sl * sp / (cp ** 2 * cl) - By / cp ** 2

    B = np.stack([Bx, By, Bz], axis=1)
    return -2.0 * np.einsum("nkj,nj->nk", dB, B)


@dataclass
class CalibrationConfig:
    reference_norm: float = 53.1351  # uT
    max_iterations: int = 200
    convergence_tol: float = 1e-10
    min_measurements: int = 50

    def __post_init__(self):
        if not self.reference_norm > 0:
            raise ValueError("reference_norm must be positive")


@dataclass
class LMResult:
    theta: np.ndarray
    cost: float
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)


def levenberg_marquardt(fun, jac, theta0, *, max_iterations=200, tol=1e-10,
                        lam0=1e-3, lam_up=10.0, lam_down=10.0, free=None) -> LMResult:
    """Damped Gauss-Newton with Marquardt diagonal scaling.

    ``free`` optionally masks which entries of ``theta`` move; the others stay at
    their ``theta0`` values. Accepted steps never raise the cost.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    free = np.ones(len(theta), dtype=bool) if free is None else np.asarray(free, dtype=bool)
    r = fun(theta)
    cost = float(r @ r)
    history = [cost]
    lam = lam0
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        J = jac(theta)[:, free]
        g = J.T @ r
        H = J.T @ J
        diag = np.diag(H).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= lam_up
                continue
            trial = theta.copy()
            trial[free] += step
            try:
                r_new = fun(trial)
            except (SingularModelError, FloatingPointError):
                r_new = None
            if r_new is not None and np.all(np.isfinite(r_new)):
                new_cost = float(r_new @ r_new)
                if new_cost <= cost:
                    accepted = True
                    break
            lam *= lam_up
        if not accepted:
            # no descent direction left at working precision
            converged = True
            break
        rel = (cost - new_cost) / max(cost, np.finfo(float).tiny)
        theta, r, cost = trial, r_new, new_cost
        history.append(cost)
        lam = max(lam / lam_down, 1e-15)
        if rel < tol or cost == 0.0:
            converged = True
            break
    return LMResult(theta, cost, it, converged, history)


@dataclass
class CalibrationResult:
    params: CalibrationParams
    rms_residual: float  # uT^2, RMS of B_R^2 - |B|^2
    norm_rms: float  # uT, RMS of |B| - B_R
    step1_cost: float
    step2_cost: float
    iterations: tuple[int, int]
    n_measurements: int
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "fit": {
                "rms_residual_uT2": self.rms_residual,
                "norm_rms_uT": self.norm_rms,
                "step1_cost": self.step1_cost,
                "step2_cost": self.step2_cost,
                "iterations": list(self.iterations),
                "n_measurements": self.n_measurements,
                "notes": list(self.notes),
            },
        }


def _check_geometry(m: np.ndarray) -> None:
    centered = m - m.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= 1e-9 * max(1.0, np.abs(m).max()) or sv[-1] < 1e-6 * sv[0]:
        raise CalibrationError("degenerate geometry: measurements do not span three dimensions of attitude")


def calibrate(measurements, config: CalibrationConfig | None = None) -> CalibrationResult:
    """Fit the nine calibration terms to measurements of a constant-magnitude field.

    Step 1 fits the biases with unit scale and zero non-orthogonality, starting
    from zero. Step 2 fits all nine terms starting from
    ``[1, 1, 1, x0*, y0*, z0*, 0, 0, 0]``.
    """
    config = config or CalibrationConfig()
    m = np.asarray(measurements, dtype=float).reshape(-1, 3)
    if len(m) < config.min_measurements:
        raise ValueError(f"need at least {config.min_measurements} measurements, got {len(m)}")
    if not np.all(np.isfinite(m)):
        raise ValueError("measurements must be finite")
    _check_geometry(m)

    b_ref = config.reference_norm

    def fun(theta):
        return residuals(theta, m, b_ref)

    def jac(theta):
        return jacobian(theta, m)

    theta0 = CalibrationParams.identity().to_vector()
    bias_only = np.zeros(9, dtype=bool)
    bias_only[3:6] = True
    step1 = levenberg_marquardt(fun, jac, theta0, max_iterations=config.max_iterations,
                                tol=config.convergence_tol, free=bias_only)
    if not step1.converged:
        raise CalibrationError(f"bias-only step did not converge in {config.max_iterations} iterations")

    theta1 = CalibrationParams.identity().to_vector()
    theta1[3:6] = step1.theta[3:6]
    step2 = levenberg_marquardt(fun, jac, theta1, max_iterations=config.max_iterations,
                                tol=config.convergence_tol)
    if not step2.converged:
        raise CalibrationError(f"full step did not converge in {config.max_iterations} iterations")

    params = CalibrationParams.from_vector(step2.theta)
    try:
        params.check()
    except ValueError as exc:
        raise CalibrationError(f"fit left the valid parameter region: {exc}") from None
    r = fun(step2.theta)
    B = inverse_model(params, m)
    return CalibrationResult(
        params=params,
        rms_residual=float(np.sqrt(np.mean(r ** 2))),
        norm_rms=float(np.sqrt(np.mean((np.linalg.norm(B, axis=1) - b_ref) ** 2))),
        step1_cost=step1.cost,
        step2_cost=step2.cost,
        iterations=(step1.iterations, step2.iterations),
        n_measurements=len(m),
    )


def save_calibration(params: CalibrationParams, path, extra: dict | None = None) -> None:
    payload = dict(extra or {})
    payload["params"] = params.to_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_calibration(path) -> CalibrationParams:
    with open(path) as fh:
        d = json.load(fh)
    params = CalibrationParams.from_dict(d.get("params", d))
    params.check()
    return params

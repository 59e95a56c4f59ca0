"""Scalar Gaussian-process regression with a squared-exponential kernel.

Targets are mean-centred before fitting (zero-mean prior) and the offset is
added back on prediction. Hyperparameters are handled in log space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
JITTER_START = 1e-10
JITTER_MAX = 1e-4


class GPError(RuntimeError):
    """Raised when a GP cannot be factorised or fitted."""


class NotPositiveDefiniteError(GPError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    sigma_f: float  # signal SD, uT
    length_scale: float  # m
    sigma_n: float  # noise SD, uT

    def __post_init__(self):
        for name in ("sigma_f", "length_scale", "sigma_n"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and strictly positive, got {v}")
            object.__setattr__(self, name, v)

    @property
    def log(self) -> np.ndarray:
        return np.log([self.sigma_f, self.length_scale, self.sigma_n])

    @classmethod
    def from_log(cls, theta) -> "Hyperparameters":
        return cls(*np.exp(np.asarray(theta, dtype=float)))

    def to_dict(self) -> dict:
        return {"sigma_f": self.sigma_f, "length_scale": self.length_scale, "sigma_n": self.sigma_n}


def kernel(hp: Hyperparameters, r, r2, *, noise_everywhere: bool = False) -> float:
    """Squared-exponential covariance between two points.

    With ``noise_everywhere`` the noise variance is added to every evaluation,
    not only to the training diagonal.
    """
    d = np.asarray(r, dtype=float) - np.asarray(r2, dtype=float)
    k = hp.sigma_f ** 2 * np.exp(-0.5 * float(d @ d) / hp.length_scale ** 2)
    return k + hp.sigma_n ** 2 if noise_everywhere else k


def sq_dists(A, B=None) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    if B is None:
        D = cdist(A, A, "sqeuclidean")
        np.fill_diagonal(D, 0.0)
        return D
    return cdist(A, np.asarray(B, dtype=float).reshape(-1, 3), "sqeuclidean")


def kernel_matrix(hp: Hyperparameters, A, B=None, *, noise_everywhere: bool = False) -> np.ndarray:
    K = hp.sigma_f ** 2 * np.exp(-0.5 * sq_dists(A, B) / hp.length_scale ** 2)
    if noise_everywhere:
        K += hp.sigma_n ** 2
    return K


def stable_cholesky(A: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, adding jitter if needed.

    Jitter starts at ``1e-10 * scale`` and grows tenfold up to ``1e-4 * scale``.
    Returns ``(L, jitter)``.
    """
    L, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info == 0:
        return L, 0.0
    n = A.shape[0]
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        L, info = lapack.dpotrf(A + jitter * np.eye(n), lower=1, clean=1, overwrite_a=0)
        if info == 0:
            logger.debug("cholesky needed jitter %.3g", jitter)
            return L, jitter
        jitter *= 10.0
    raise NotPositiveDefiniteError("covariance is not positive definite even with maximum jitter")


def _train_cov(hp: Hyperparameters, D: np.ndarray, noise_everywhere: bool) -> tuple[np.ndarray, np.ndarray]:
    Kse = hp.sigma_f ** 2 * np.exp(-0.5 * D / hp.length_scale ** 2)
    if noise_everywhere:
        return Kse, Kse + hp.sigma_n ** 2
    W = Kse.copy()
    W[np.diag_indices_from(W)] += hp.sigma_n ** 2
    return Kse, W


def nlml(hp: Hyperparameters, X, y, *, noise_everywhere: bool = False,
         _D: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Negative log marginal likelihood and its gradient w.r.t. log(sigma_f, l, sigma_n).

    ``y`` is used as given; centre it first (see :func:`optimize_hyperparameters`).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    n = len(y)
    D = sq_dists(X) if _D is None else _D
    Kse, W = _train_cov(hp, D, noise_everywhere)
    L, _ = stable_cholesky(W, hp.sigma_f ** 2 + hp.sigma_n ** 2)
    alpha = cho_solve((L, True), y)
    value = 0.5 * y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * LOG_2PI

    Winv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError("failed to invert the training covariance")
    Winv = np.tril(Winv) + np.tril(Winv, -1).T
    # grad_j = 0.5 * tr((W^-1 - alpha alpha^T) dW/dtheta_j)
    Q = Winv - np.outer(alpha, alpha)
    g_f = np.sum(Q * Kse)  # dW/dlog sf = 2 Kse
    g_l = 0.5 * np.sum(Q * Kse * D) / hp.length_scale ** 2
    if noise_everywhere:
        g_n = hp.sigma_n ** 2 * np.sum(Q)
    else:
        g_n = hp.sigma_n ** 2 * np.trace(Q)
    return float(value), np.array([g_f, g_l, g_n])


@dataclass
class OptimizerConfig:
    """Start grid, bounds and tolerances for hyperparameter search.

    Bounds on sigma_f and sigma_n are multiples of the target sample SD; the
    length-scale bounds are absolute (metres).
    """

    start_length_scales: tuple[float, ...] = (0.3, 1.0)
    start_signal_factors: tuple[float, ...] = (1.0, 2.0)
    start_noise_factor: float = 0.1
    sigma_f_bounds: tuple[float, float] = (1e-3, 1e2)
    length_scale_bounds: tuple[float, float] = (1e-2, 1e2)
    sigma_n_bounds: tuple[float, float] = (1e-4, 1e1)
    max_iterations: int = 200
    gtol: float = 1e-6
    ftol: float = 1e-12
    noise_everywhere: bool = False


@dataclass
class OptimizationResult:
    hyperparameters: Hyperparameters
    nlml: float
    start_nlml: list = field(default_factory=list)
    final_nlml: list = field(default_factory=list)
    mean_offset: float = 0.0


def optimize_hyperparameters(X, y, config: OptimizerConfig | None = None, *,
                             full_output: bool = False):
    """Minimise the NLML over (sigma_f, l, sigma_n) with L-BFGS-B in log space.

    Four deterministic starts (l in {0.3, 1.0} m, sigma_f in {1, 2} x sample SD,
    sigma_n = 0.1 x sample SD); the lowest final NLML wins.
    """
    config = config or OptimizerConfig()
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) < 2:
        raise ValueError("need at least two observations to optimise hyperparameters")
    offset = float(np.mean(y))
    yc = y - offset
    sd = float(np.std(yc))
    scale = sd if sd > 1e-12 else 1.0
    D = sq_dists(X)
    ne = config.noise_everywhere

    bounds = [
        tuple(np.log(np.array(config.sigma_f_bounds) * scale)),
        tuple(np.log(config.length_scale_bounds)),
        tuple(np.log(np.array(config.sigma_n_bounds) * scale)),
    ]

    def objective(theta):
        try:
            v, g = nlml(Hyperparameters.from_log(theta), X, yc, noise_everywhere=ne, _D=D)
        except (GPError, ValueError):
            return 1e300, np.zeros(3)
        return v, g

    starts = [np.log([f * scale, ell, config.start_noise_factor * scale])
              for ell in config.start_length_scales for f in config.start_signal_factors]
    best = None
    start_vals, final_vals = [], []
    for theta0 in starts:
        v0, _ = objective(theta0)
        start_vals.append(v0)
        res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": config.max_iterations, "gtol": config.gtol,
                                "ftol": config.ftol})
        final_vals.append(float(res.fun))
        if not np.isfinite(res.fun) or res.fun >= 1e300:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise GPError("hyperparameter optimisation failed from every start")
    out = OptimizationResult(Hyperparameters.from_log(best.x), float(best.fun), start_vals, final_vals, offset)
    return out if full_output else out.hyperparameters


@dataclass(frozen=True, eq=False)
class GpComponent:
    """One fitted scalar GP: hyperparameters plus its inference set and factorisation."""

    hyperparams: Hyperparameters
    train_locations: np.ndarray
    train_targets: np.ndarray
    mean_offset: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    noise_everywhere: bool = False

    @classmethod
    def fit(cls, X, y, hp: Hyperparameters, mean_offset: float | None = None, *,
            noise_everywhere: bool = False) -> "GpComponent":
        X = np.array(X, dtype=float).reshape(-1, 3)
        y = np.array(y, dtype=float).reshape(-1)
        if len(X) != len(y):
            raise ValueError("locations and targets differ in length")
        if len(y) == 0:
            raise ValueError("cannot fit a GP to an empty set")
        offset = float(np.mean(y)) if mean_offset is None else float(mean_offset)
        _, W = _train_cov(hp, sq_dists(X), noise_everywhere)
        L, jitter = stable_cholesky(W, hp.sigma_f ** 2 + hp.sigma_n ** 2)
        alpha = cho_solve((L, True), y - offset)
        X.setflags(write=False)
        y.setflags(write=False)
        return cls(hp, X, y, offset, L, alpha, jitter, noise_everywhere)

    def __len__(self) -> int:
        return len(self.train_targets)

    @property
    def prior_variance(self) -> float:
        hp = self.hyperparams
        return hp.sigma_f ** 2 + (hp.sigma_n ** 2 if self.noise_everywhere else 0.0)

    def predict(self, query, *, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, query, include_noise=include_noise)


def predict(gp: GpComponent, query, *, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and SD at ``query`` (m, 3).

    The SD is that of the latent field; ``include_noise`` adds the noise
    variance, giving the spread expected for a new measurement.
    """
    Q = np.asarray(query, dtype=float).reshape(-1, 3)
    Ks = kernel_matrix(gp.hyperparams, Q, gp.train_locations, noise_everywhere=gp.noise_everywhere)
    mean = Ks @ gp.alpha + gp.mean_offset
    V = solve_triangular(gp.chol, Ks.T, lower=True, check_finite=False)
    var = gp.prior_variance - np.sum(V * V, axis=0)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + gp.hyperparams.sigma_n ** 2
    return mean, np.sqrt(var)

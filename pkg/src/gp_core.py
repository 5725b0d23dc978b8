"""
Exact Gaussian process regression
Squared-exponential kernel, Cholesky fitting, posterior prediction,
hold-one-out likelihood and the erf kernel potential used by the storage function
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import erf

logger = logging.getLogger(__name__)

JITTER_FRACTION = 1e-10
JITTER_ATTEMPTS = 3
SQRT_PI_HALF = math.sqrt(math.pi) / 2.0

ArrayLike = Union[float, np.ndarray]


class FactorizationError(np.linalg.LinAlgError):
    """Kernel matrix could not be factorized even after jitter escalation"""


@dataclass(frozen=True)
class GPHyperparams:
    """Kernel parameters {l, σ_y, σ_n} of one mode"""
    length_scale: float
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        for name in ("length_scale", "signal_variance", "noise_variance"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {value}")

    @property
    def prior_variance(self) -> float:
        return self.signal_variance + self.noise_variance

    def to_log(self) -> np.ndarray:
        return np.log([self.length_scale, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log(cls, values) -> "GPHyperparams":
        l, sy, sn = np.exp(np.asarray(values, dtype=float))
        return cls(float(l), float(sy), float(sn))

    def with_noise_floor(self, floor: float) -> "GPHyperparams":
        return replace(self, noise_variance=max(self.noise_variance, floor))

    def to_dict(self) -> Dict[str, float]:
        return {
            "length_scale": self.length_scale,
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "GPHyperparams":
        return cls(float(data["length_scale"]), float(data["signal_variance"]), float(data["noise_variance"]))


@dataclass(frozen=True)
class Posterior:
    """Noise-inclusive predictive distribution N(mean, variance) of one torque"""
    mean: float
    variance: float


@dataclass(frozen=True, eq=False)
class GPModel:
    """Fitted GP: training set, lower Cholesky factor of K_D and weights α = K_D⁻¹y

    Immutable after fit, safe to evaluate from several threads.
    """
    X: np.ndarray
    y: np.ndarray
    hyperparams: GPHyperparams
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @classmethod
    def prior(cls, hyperparams: GPHyperparams, dim: int) -> "GPModel":
        """Model with no training data (zero-mean prior)"""
        return cls(
            X=np.empty((0, dim)),
            y=np.empty(0),
            hyperparams=hyperparams,
            chol=np.empty((0, 0)),
            alpha=np.empty(0),
        )

    def kernel_inverse(self) -> np.ndarray:
        """Dense K_D⁻¹ from the stored factor"""
        if self.n == 0:
            return np.empty((0, 0))
        return linalg.cho_solve((self.chol, True), np.eye(self.n))


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X


def se_kernel(x1, x2, h: GPHyperparams, same_index: bool = False) -> float:
    """σ_y·exp(−‖x1−x2‖²/l²), plus σ_n when both arguments are the same sample"""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise ValueError(f"Feature dimension mismatch: {x1.shape} vs {x2.shape}")
    sq = float(np.sum((x1 - x2) ** 2))
    value = h.signal_variance * math.exp(-sq / h.length_scale ** 2)
    if same_index:
        value += h.noise_variance
    return value


def kernel_matrix(A, B, h: GPHyperparams) -> np.ndarray:
    """Noise-free SE cross-covariance between the rows of A and B"""
    A = _as_matrix(A)
    B = _as_matrix(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"Feature dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.zeros((A.shape[0], B.shape[0]))
    sq = cdist(A, B, "sqeuclidean")
    return h.signal_variance * np.exp(-sq / h.length_scale ** 2)


def fit(X, y, h: GPHyperparams) -> GPModel:
    """Factorize K_D = K + σ_n I and solve K_D α = y

    On Cholesky failure a jitter of 1e-10·(σ_y+σ_n) is added to the diagonal and
    escalated tenfold, at most three times.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] == 0:
        raise ValueError("Cannot fit a GP on an empty training set")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("Training features and targets must be finite")

    K = kernel_matrix(X, X, h)
    K[np.diag_indices_from(K)] += h.noise_variance

    jitter = 0.0
    step = JITTER_FRACTION * h.prior_variance
    for attempt in range(JITTER_ATTEMPTS + 1):
        try:
            if jitter > 0:
                K_try = K.copy()
                K_try[np.diag_indices_from(K_try)] += jitter
            else:
                K_try = K
            L = linalg.cholesky(K_try, lower=True)
            break
        except linalg.LinAlgError:
            if attempt == JITTER_ATTEMPTS:
                raise FactorizationError(
                    f"K_D not positive definite for n={X.shape[0]} even with diagonal jitter {jitter:.3e}"
                )
            jitter = step if jitter == 0 else jitter * 10.0
            logger.warning("Cholesky failed, retrying with jitter %.3e", jitter)

    alpha = linalg.cho_solve((L, True), y)
    return GPModel(X=X, y=y, hyperparams=h, chol=L, alpha=alpha, jitter=jitter)


def predict(m: GPModel, X_star) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior means and noise-inclusive variances at many query points"""
    X_star = _as_matrix(X_star)
    if X_star.shape[1] != m.dim:
        raise ValueError(f"Query dimension {X_star.shape[1]} does not match model dimension {m.dim}")
    h = m.hyperparams
    prior = np.full(X_star.shape[0], h.prior_variance)
    if m.n == 0:
        return np.zeros(X_star.shape[0]), prior
    Ks = kernel_matrix(m.X, X_star, h)
    mean = Ks.T @ m.alpha
    v = linalg.solve_triangular(m.chol, Ks, lower=True)
    var = prior - np.sum(v * v, axis=0)
    # rounding can only remove part of the noise floor
    var = np.maximum(var, h.noise_variance * 1e-12)
    return mean, var


def posterior(m: GPModel, x_star) -> Posterior:
    """Predictive N(μ, Σ) at one feature vector; μ = k*ᵀα, Σ = σ_y+σ_n − k*ᵀK_D⁻¹k*"""
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    if x_star.ndim != 1 or x_star.shape[0] != m.dim:
        raise ValueError(f"Query dimension {x_star.shape} does not match model dimension {m.dim}")
    mean, var = predict(m, x_star[None, :])
    return Posterior(float(mean[0]), float(var[0]))


def loo_residuals(m: GPModel) -> Tuple[np.ndarray, np.ndarray]:
    """Held-out residuals τ_t − μ_t and variances Σ_t for every training sample

    Uses r_t = α_t / [K_D⁻¹]_tt and Σ_t = 1 / [K_D⁻¹]_tt, identical to refitting
    without sample t.
    """
    if m.n < 2:
        raise ValueError("Hold-one-out needs at least two training samples")
    diag = np.diag(m.kernel_inverse())
    return m.alpha / diag, 1.0 / diag


def loo_log_likelihood(m: GPModel, include_normalizer: bool = False) -> float:
    """Hold-one-out likelihood Σ_t −(τ_t−μ_t)²/Σ_t

    With include_normalizer the full held-out Gaussian log density
    Σ_t −½[log(2πΣ_t) + (τ_t−μ_t)²/Σ_t] is returned instead.
    """
    residuals, variances = loo_residuals(m)
    quad = residuals ** 2 / variances
    if include_normalizer:
        return float(-0.5 * np.sum(np.log(2.0 * np.pi * variances) + quad))
    return float(-np.sum(quad))


def fixed_coordinate_factors(m: GPModel, position_index: int, anchor) -> np.ndarray:
    if m.dim == 1:
        return np.ones(m.n)
    if anchor is None:
        raise ValueError(
            f"Kernel potential needs position-only (1-D) features, model has {m.dim}; "
            "pass an anchor for the remaining coordinates"
        )
    anchor = np.asarray(anchor, dtype=float)
    if anchor.shape != (m.dim,):
        raise ValueError(f"Anchor must have shape ({m.dim},)")
    mask = np.ones(m.dim, dtype=bool)
    mask[position_index] = False
    sq = np.sum((m.X[:, mask] - anchor[mask]) ** 2, axis=1)
    return np.exp(-sq / m.hyperparams.length_scale ** 2)


def kernel_potential(m: GPModel, theta: ArrayLike, position_index: int = 0, anchor=None) -> ArrayLike:
    """E(θ)·α with E_i(θ) = σ_y·l·(√π/2)·erf((θ−θ_i)/l)

    ∂/∂θ of the result equals k*(θ)ᵀα exactly. For multi-feature models the
    remaining coordinates are held at `anchor`, which scales each E_i by the
    constant kernel factor of those coordinates.
    """
    h = m.hyperparams
    if m.n == 0:
        return 0.0 * np.asarray(theta, dtype=float)
    weights = m.alpha * fixed_coordinate_factors(m, position_index, anchor)
    theta_arr = np.asarray(theta, dtype=float)
    centres = m.X[:, position_index]
    z = (theta_arr[..., None] - centres) / h.length_scale
    E = h.signal_variance * h.length_scale * SQRT_PI_HALF * erf(z)
    result = E @ weights
    return float(result) if np.ndim(result) == 0 else result


def potential_bound(m: GPModel, position_index: int = 0, anchor=None) -> float:
    """Upper bound of |kernel_potential| over all θ"""
    if m.n == 0:
        return 0.0
    h = m.hyperparams
    weights = m.alpha * fixed_coordinate_factors(m, position_index, anchor)
    return float(h.signal_variance * h.length_scale * SQRT_PI_HALF * np.sum(np.abs(weights)))

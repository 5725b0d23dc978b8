"""
Mixture-of-GP identification with Stochastic EM
Block (forward filtering / backward sampling) and single-site Gibbs draws of
mode labels under a Markov stay prior, per-mode hold-one-out hyperparameter
fits, the inflated-covariance disturbance mode and best-of-n chain restarts
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import optimize
from scipy.special import logsumexp
from scipy.stats import norm

from data_loader import NOMINAL_MODE, PERTURBED_MODE, Dataset, FeatureLayout, FeatureScaler
from gp_core import GPHyperparams, GPModel, fit, loo_log_likelihood, loo_residuals, posterior, predict

logger = logging.getLogger(__name__)

LOG_BOUNDS = (
    (math.log(2e-1), math.log(1e2)),   # length scale, standardised units
    (math.log(1e-6), math.log(1e4)),   # signal variance
    (math.log(1e-8), math.log(1e4)),   # noise variance
)
NOISE_FLOOR = 1e-8
SAMPLERS = ("block", "gibbs")

RandomState = Union[None, int, np.random.Generator]


def check_random_state(seed: RandomState) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SEMOptions:
    """Run options for the Stochastic EM loop

    n_modes counts every mode; with the disturbance mode enabled it is the last
    one and shares the GP of nominal mode `disturbance_parent`.

    With n_init > 1 that many chains run `init_iterations` each and the one with
    the best log joint is carried on to `iterations`. The "block" sampler draws
    the whole label chain by forward filtering / backward sampling before the
    single-site Gibbs pass, "gibbs" runs the single-site pass only.
    """
    n_modes: int = 2
    stay_probability: float = 0.95
    iterations: int = 50
    disturbance: bool = True
    disturbance_parent: int = 0
    min_mode_size: int = 3
    optimizer_maxiter: int = 200
    optimizer_tol: float = 1e-6
    sampler: str = "block"
    n_init: int = 3
    init_iterations: int = 10

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("Need at least one mode")
        if not 0.0 < self.stay_probability < 1.0:
            raise ValueError("Stay probability must lie strictly between 0 and 1")
        if self.iterations < 1:
            raise ValueError("Need at least one SEM iteration")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"Unknown sampler '{self.sampler}', expected one of {SAMPLERS}")
        if self.n_init < 1 or self.init_iterations < 1:
            raise ValueError("Need at least one chain and one warm-up iteration")
        if self.min_mode_size < 2:
            raise ValueError("Minimum mode size must be at least 2 for hold-one-out")
        if self.has_disturbance and not 0 <= self.disturbance_parent < self.n_nominal:
            raise ValueError(f"Disturbance parent {self.disturbance_parent} is not a nominal mode")

    @property
    def has_disturbance(self) -> bool:
        return self.disturbance and self.n_modes >= 2

    @property
    def n_nominal(self) -> int:
        return self.n_modes - 1 if self.has_disturbance else self.n_modes


@dataclass(frozen=True, eq=False)
class MixtureData:
    """Standardised training features and torques"""
    X: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.tau.shape[0]:
            raise ValueError("Features and torques must have matching lengths")

    def __len__(self) -> int:
        return self.tau.shape[0]

    @classmethod
    def prepare(cls, dataset: Dataset, scaler: FeatureScaler, layout: Optional[FeatureLayout] = None) -> "MixtureData":
        X = scaler.transform(dataset.features(layout or dataset.layout))
        return cls(X=X, tau=np.asarray(dataset.tau, dtype=float))


@dataclass(eq=False)
class MixtureState:
    """Labels w (0-based), per-nominal-mode Θ, stay probability π and Σ_d

    disturbance_cov is None when there is no disturbance mode.
    """
    labels: np.ndarray
    hyperparams: List[GPHyperparams]
    stay_probability: float
    scaler: FeatureScaler
    layout: FeatureLayout = field(default_factory=FeatureLayout)
    disturbance_cov: Optional[float] = None
    disturbance_parent: int = 0
    iteration: int = 0
    trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if not 0.0 < self.stay_probability < 1.0:
            raise ValueError("Stay probability must lie strictly between 0 and 1")
        if self.disturbance_cov is not None and not self.disturbance_cov >= 0:
            raise ValueError("Disturbance covariance must be non-negative")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_modes):
            raise ValueError(f"Labels must lie in [0, {self.n_modes})")

    @property
    def n_nominal(self) -> int:
        return len(self.hyperparams)

    @property
    def has_disturbance(self) -> bool:
        return self.disturbance_cov is not None

    @property
    def n_modes(self) -> int:
        return self.n_nominal + (1 if self.has_disturbance else 0)

    @property
    def disturbance_index(self) -> Optional[int]:
        return self.n_nominal if self.has_disturbance else None

    def gp_mode(self, k: int) -> int:
        """Nominal mode whose GP serves mode k"""
        return self.disturbance_parent if k == self.disturbance_index else k

    def mode_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_modes)

    def to_dict(self) -> Dict:
        return {
            "labels": (self.labels + 1).tolist(),
            "hyperparams": [h.to_dict() for h in self.hyperparams],
            "stay_probability": self.stay_probability,
            "disturbance_cov": self.disturbance_cov,
            "disturbance_parent": self.disturbance_parent + 1,
            "scaler": self.scaler.to_dict(),
            "feature_layout": self.layout.label,
            "iteration": self.iteration,
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "MixtureState":
        return cls(
            labels=np.asarray(data["labels"], dtype=int) - 1,
            hyperparams=[GPHyperparams.from_dict(h) for h in data["hyperparams"]],
            stay_probability=float(data["stay_probability"]),
            scaler=FeatureScaler.from_dict(data["scaler"]),
            layout=FeatureLayout.from_label(data["feature_layout"]),
            disturbance_cov=None if data.get("disturbance_cov") is None else float(data["disturbance_cov"]),
            disturbance_parent=int(data.get("disturbance_parent", 1)) - 1,
            iteration=int(data.get("iteration", 0)),
            trace=[float(v) for v in data.get("trace", [])],
        )


def fit_mode_model(state: MixtureState, data: MixtureData, k: int, exclude: Optional[int] = None) -> GPModel:
    """GP of nominal mode k on its members, optionally without sample `exclude`"""
    members = np.flatnonzero(state.labels == k)
    if exclude is not None:
        members = members[members != exclude]
    h = state.hyperparams[k]
    if members.size == 0:
        return GPModel.prior(h, data.X.shape[1])
    return fit(data.X[members], data.tau[members], h)


def mode_log_likelihood(t: int, k: int, state: MixtureState, data: MixtureData) -> float:
    """log p(τ_t | mode k) with sample t held out of the mode's training set

    The disturbance mode evaluates N(μ, Σ+Σ_d) under its parent nominal GP.
    """
    if not 0 <= k < state.n_modes:
        raise ValueError(f"Mode {k} out of range for {state.n_modes} modes")
    model = fit_mode_model(state, data, state.gp_mode(k), exclude=t)
    post = posterior(model, data.X[t])
    var = post.variance
    if k == state.disturbance_index:
        var += state.disturbance_cov
    return float(norm.logpdf(data.tau[t], loc=post.mean, scale=math.sqrt(var)))


def transition_log_prior(labels, stay_probability: float, n_modes: int) -> float:
    """log[(1/K)·π^c₀·(1−π)^((T−1)−c₀)] with c₀ the number of unchanged consecutive labels"""
    labels = np.asarray(labels, dtype=int)
    if labels.size < 1:
        raise ValueError("Label vector must not be empty")
    if n_modes < 1 or labels.min() < 0 or labels.max() >= n_modes:
        raise ValueError(f"Labels must lie in [0, {n_modes})")
    stays = int(np.sum(labels[1:] == labels[:-1]))
    switches = labels.size - 1 - stays
    return -math.log(n_modes) + stays * math.log(stay_probability) + switches * math.log1p(-stay_probability)


def label_conditional(log_likelihoods: np.ndarray,
                      prev_label: Optional[int],
                      next_label: Optional[int],
                      stay_probability: float) -> np.ndarray:
    """Normalised p(w_t = k | neighbours, τ_t) from per-mode log-likelihoods"""
    log_stay = math.log(stay_probability)
    log_switch = math.log1p(-stay_probability)
    modes = np.arange(len(log_likelihoods))
    logp = np.asarray(log_likelihoods, dtype=float).copy()
    for neighbour in (prev_label, next_label):
        if neighbour is not None:
            logp += np.where(modes == neighbour, log_stay, log_switch)
    return np.exp(logp - logsumexp(logp))


def draw_label(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def _log_transitions(n_modes: int, stay_probability: float) -> np.ndarray:
    pair = np.full((n_modes, n_modes), math.log1p(-stay_probability))
    np.fill_diagonal(pair, math.log(stay_probability))
    return pair


def _forward_filter(log_lik: np.ndarray, stay_probability: float) -> np.ndarray:
    """Unnormalised log α_t(k) = log p(τ_1..τ_t, w_t = k) under the uniform initial prior"""
    T, K = log_lik.shape
    pair = _log_transitions(K, stay_probability)
    log_alpha = np.empty((T, K))
    log_alpha[0] = -math.log(K) + log_lik[0]
    for t in range(1, T):
        log_alpha[t] = log_lik[t] + logsumexp(log_alpha[t - 1][:, None] + pair, axis=0)
    return log_alpha


def sample_label_chain(log_lik: np.ndarray, stay_probability: float, rng: RandomState = None) -> np.ndarray:
    """Joint draw of all labels from p(w | τ) of the Markov chain by backward sampling"""
    rng = check_random_state(rng)
    log_lik = np.asarray(log_lik, dtype=float)
    T, K = log_lik.shape
    if K == 1:
        return np.zeros(T, dtype=int)
    log_alpha = _forward_filter(log_lik, stay_probability)
    pair = _log_transitions(K, stay_probability)
    labels = np.empty(T, dtype=int)
    last = log_alpha[-1]
    labels[-1] = draw_label(np.exp(last - logsumexp(last)), rng)
    for t in range(T - 2, -1, -1):
        logp = log_alpha[t] + pair[:, labels[t + 1]]
        labels[t] = draw_label(np.exp(logp - logsumexp(logp)), rng)
    return labels


class HeldOutCache:
    """Held-out predictive mean/variance of every sample under each nominal GP

    For members of a mode the closed-form hold-one-out values are stored, for
    everybody else the plain posterior. A mode is refit only when its
    membership changes.
    """

    def __init__(self, state: MixtureState, data: MixtureData):
        self.state = state
        self.data = data
        self.mean = np.zeros((state.n_nominal, len(data)))
        self.var = np.zeros((state.n_nominal, len(data)))
        for k in range(state.n_nominal):
            self.refresh(k)

    def refresh(self, k: int, labels: Optional[np.ndarray] = None) -> None:
        labels = self.state.labels if labels is None else labels
        members = np.flatnonzero(labels == k)
        h = self.state.hyperparams[k]
        if members.size == 0:
            self.mean[k] = 0.0
            self.var[k] = h.prior_variance
            return
        model = fit(self.data.X[members], self.data.tau[members], h)
        mean, var = predict(model, self.data.X)
        if members.size >= 2:
            residuals, loo_var = loo_residuals(model)
            mean[members] = self.data.tau[members] - residuals
            var[members] = loo_var
        else:
            mean[members] = 0.0
            var[members] = h.prior_variance
        self.mean[k] = mean
        self.var[k] = var

    def log_likelihoods(self, t: int) -> np.ndarray:
        """log p(τ_t | mode k) for every mode k"""
        st = self.state
        means = [self.mean[st.gp_mode(k), t] for k in range(st.n_modes)]
        variances = [self.var[st.gp_mode(k), t] for k in range(st.n_modes)]
        if st.has_disturbance:
            variances[-1] += st.disturbance_cov
        return norm.logpdf(self.data.tau[t], loc=np.array(means), scale=np.sqrt(variances))

    def log_likelihood_matrix(self) -> np.ndarray:
        return np.stack([self.log_likelihoods(t) for t in range(len(self.data))])


def gibbs_sweep(state: MixtureState, data: MixtureData, rng: RandomState = None) -> np.ndarray:
    """One left-to-right Gibbs pass over all labels; returns the new labels"""
    rng = check_random_state(rng)
    labels = state.labels.copy()
    if state.n_modes == 1:
        return labels
    cache = HeldOutCache(replace(state, labels=labels), data)
    T = len(labels)
    for t in range(T):
        probs = label_conditional(
            cache.log_likelihoods(t),
            labels[t - 1] if t > 0 else None,
            labels[t + 1] if t < T - 1 else None,
            state.stay_probability,
        )
        new = draw_label(probs, rng)
        old = labels[t]
        if new != old:
            labels[t] = new
            for k in {old, new}:
                if k < state.n_nominal:
                    cache.refresh(k, labels)
    return labels


def block_sweep(state: MixtureState, data: MixtureData, rng: RandomState = None) -> np.ndarray:
    """Whole-chain label draw from the held-out likelihoods of the current partition"""
    rng = check_random_state(rng)
    if state.n_modes == 1:
        return state.labels.copy()
    log_lik = HeldOutCache(state, data).log_likelihood_matrix()
    return sample_label_chain(log_lik, state.stay_probability, rng)


def _hyperparam_objective(X: np.ndarray, y: np.ndarray, weight: float) -> Callable[[np.ndarray], float]:
    def negative(log_params: np.ndarray) -> float:
        try:
            model = fit(X, y, GPHyperparams.from_log(log_params))
            value = weight * loo_log_likelihood(model, include_normalizer=True)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf
        return -value if np.isfinite(value) else np.inf
    return negative


def optimize_hyperparams(X: np.ndarray, y: np.ndarray, init: GPHyperparams, weight: float = 1.0,
                         maxiter: int = 200, tol: float = 1e-6) -> GPHyperparams:
    """Maximise the weighted hold-one-out log predictive density in log-parameter space

    Returns `init` unless the search found a strictly better objective.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 2:
        raise ValueError("Hyperparameter fit needs at least two samples")
    if weight <= 0:
        raise ValueError("Objective weight must be positive")
    if np.ptp(y) == 0:
        logger.warning("All %d targets identical, keeping initial hyperparameters", y.shape[0])
        return init.with_noise_floor(NOISE_FLOOR)

    objective = _hyperparam_objective(X, y, weight)
    x0 = init.to_log()
    f0 = objective(x0)
    start = np.clip(x0, [b[0] for b in LOG_BOUNDS], [b[1] for b in LOG_BOUNDS])
    result = optimize.minimize(
        objective,
        start,
        method="L-BFGS-B",
        bounds=LOG_BOUNDS,
        options={"maxiter": maxiter, "ftol": tol, "gtol": 1e-8},
    )
    if np.isfinite(result.fun) and result.fun < f0:
        return GPHyperparams.from_log(result.x)
    return init


def disturbance_cov_mle(residuals, variances, weights=None) -> float:
    """Σ_d ≥ 0 maximising Σ −w·½[r²/(Σ_t+Σ_d) + log(Σ_t+Σ_d)]"""
    r2 = np.asarray(residuals, dtype=float) ** 2
    s = np.asarray(variances, dtype=float)
    w = np.ones_like(r2) if weights is None else np.asarray(weights, dtype=float)
    upper = float(r2.max()) if r2.size else 0.0
    if upper <= 0.0:
        return 0.0

    def negative(d: float) -> float:
        total = s + d
        return float(np.sum(w * 0.5 * (r2 / total + np.log(total))))

    result = optimize.minimize_scalar(negative, bounds=(0.0, upper), method="bounded",
                                      options={"xatol": 1e-8})
    best = float(result.x)
    return 0.0 if negative(0.0) <= negative(best) else best


def fit_disturbance_cov(state: MixtureState, data: MixtureData) -> Optional[float]:
    """Re-estimate Σ_d from disturbance-labelled residuals against the parent GP"""
    if not state.has_disturbance:
        return None
    idx = np.flatnonzero(state.labels == state.disturbance_index)
    if idx.size == 0:
        return state.disturbance_cov
    model = fit_mode_model(state, data, state.disturbance_parent)
    mean, var = predict(model, data.X[idx])
    return disturbance_cov_mle(data.tau[idx] - mean, var)


def sample_log_likelihood(state: MixtureState, data: MixtureData, cache: Optional[HeldOutCache] = None) -> float:
    """Held-out data log-likelihood of the current labelling"""
    cache = HeldOutCache(state, data) if cache is None else cache
    return float(sum(cache.log_likelihoods(t)[state.labels[t]] for t in range(len(data))))


def base_hyperparams(data: MixtureData, options: SEMOptions) -> GPHyperparams:
    """Single-GP fit on all samples from h = (1, var τ, 0.1·var τ)"""
    variance = max(float(np.var(data.tau)), NOISE_FLOOR)
    h0 = GPHyperparams(1.0, variance, 0.1 * variance)
    if len(data) < 2:
        return h0
    return optimize_hyperparams(data.X, data.tau, h0,
                                maxiter=options.optimizer_maxiter, tol=options.optimizer_tol)


def segment_labels(n_samples: int, n_modes: int, rng: RandomState = None) -> np.ndarray:
    """Contiguous random segments, two per mode, cycling through the modes from a random offset"""
    rng = check_random_state(rng)
    if n_modes == 1 or n_samples == 0:
        return np.zeros(n_samples, dtype=int)
    n_segments = min(2 * n_modes, n_samples)
    cuts = np.sort(rng.choice(np.arange(1, n_samples), size=n_segments - 1, replace=False))
    segment = np.searchsorted(cuts, np.arange(n_samples), side="right")
    return (segment + int(rng.integers(n_modes))) % n_modes


def initialize_state(data: MixtureData, options: SEMOptions, scaler: FeatureScaler,
                     layout: FeatureLayout, rng: RandomState = None,
                     base: Optional[GPHyperparams] = None) -> MixtureState:
    """Segmented nominal labels sharing the all-data fit, empty disturbance mode

    Σ_d starts at the mean squared hold-one-out residual of the all-data fit.
    """
    rng = check_random_state(rng)
    base = base_hyperparams(data, options) if base is None else base
    labels = segment_labels(len(data), options.n_nominal, rng)
    disturbance_cov = None
    if options.has_disturbance:
        disturbance_cov = max(float(np.var(data.tau)), NOISE_FLOOR)
        if len(data) >= 2:
            residuals, _ = loo_residuals(fit(data.X, data.tau, base))
            spread = float(np.mean(residuals ** 2))
            if np.isfinite(spread) and spread > NOISE_FLOOR:
                disturbance_cov = spread
    return MixtureState(
        labels=labels,
        hyperparams=[base] * options.n_nominal,
        stay_probability=options.stay_probability,
        scaler=scaler,
        layout=layout,
        disturbance_cov=disturbance_cov,
        disturbance_parent=options.disturbance_parent if options.has_disturbance else 0,
    )


def log_joint(state: MixtureState, data: MixtureData) -> float:
    """Held-out data log-likelihood plus the Markov label prior"""
    log_lik = state.trace[-1] if state.trace else sample_log_likelihood(state, data)
    return log_lik + transition_log_prior(state.labels, state.stay_probability, state.n_modes)


def sem_iterate(state: MixtureState, data: MixtureData, rng: RandomState, options: SEMOptions,
                weight: float = 1.0) -> MixtureState:
    """S-step (block draw and/or Gibbs sweep) followed by the M-step on the sampled partition

    `weight` stands for p(w|D,Θ) of the single drawn labelling; it is constant
    within the M-step.
    """
    rng = check_random_state(rng)
    if options.sampler == "block":
        state = replace(state, labels=block_sweep(state, data, rng))
    labels = gibbs_sweep(state, data, rng)
    sampled = replace(state, labels=labels)

    hyperparams = list(state.hyperparams)
    for k in range(state.n_nominal):
        members = np.flatnonzero(labels == k)
        if members.size < options.min_mode_size:
            logger.warning("Mode %d has %d samples, M-step skipped this iteration", k + 1, members.size)
            continue
        hyperparams[k] = optimize_hyperparams(
            data.X[members], data.tau[members], hyperparams[k], weight,
            maxiter=options.optimizer_maxiter, tol=options.optimizer_tol,
        )

    updated = replace(sampled, hyperparams=hyperparams)
    updated = replace(updated, disturbance_cov=fit_disturbance_cov(updated, data))
    log_lik = sample_log_likelihood(updated, data)
    return replace(updated, iteration=state.iteration + 1, trace=state.trace + [log_lik])


def _advance(state: MixtureState, data: MixtureData, rng: np.random.Generator, options: SEMOptions,
             until: int, callback: Optional[Callable[[MixtureState], None]]) -> MixtureState:
    while state.iteration < until:
        state = sem_iterate(state, data, rng, options)
        sizes = state.mode_sizes()
        logger.info(
            "SEM iteration %d: log-lik %.3f, mode sizes %s%s",
            state.iteration, state.trace[-1], sizes.tolist(),
            f", Σ_d={state.disturbance_cov:.4g}" if state.has_disturbance else "",
        )
        if callback:
            callback(state)
    return state


def fit_sem(data: MixtureData, options: SEMOptions, scaler: FeatureScaler, layout: FeatureLayout,
            rng: RandomState = None,
            callback: Optional[Callable[[MixtureState], None]] = None) -> MixtureState:
    """Initialise `n_init` chains on prepared data and iterate the best one

    The callback sees every iteration of every chain.
    """
    rng = check_random_state(rng)
    base = base_hyperparams(data, options)
    logger.info(
        "SEM start: %d samples, %d modes (%s disturbance), π=%.3f, %d chain(s)",
        len(data), options.n_modes, "with" if options.has_disturbance else "no",
        options.stay_probability, options.n_init,
    )

    if options.n_modes == 1:
        state = initialize_state(data, options, scaler, layout, rng, base=base)
        state = replace(state, iteration=1)
        state = replace(state, trace=[sample_log_likelihood(state, data)])
        logger.info("Single mode fit: l=%.4g σ_y=%.4g σ_n=%.4g",
                    base.length_scale, base.signal_variance, base.noise_variance)
        if callback:
            callback(state)
        return state

    warmup = options.iterations if options.n_init == 1 else min(options.init_iterations, options.iterations)
    chains = []
    for chain in range(options.n_init):
        state = initialize_state(data, options, scaler, layout, rng, base=base)
        state = _advance(state, data, rng, options, warmup, callback)
        chains.append(state)
        logger.info("Chain %d/%d warmed up: log joint %.3f", chain + 1, options.n_init, log_joint(state, data))
    scores = [log_joint(s, data) for s in chains]
    best = int(np.argmax(scores))
    if options.n_init > 1:
        logger.info("Continuing chain %d of %d (log joint %.3f)", best + 1, options.n_init, scores[best])
    return _advance(chains[best], data, rng, options, options.iterations, callback)


def run_sem(dataset: Dataset, options: SEMOptions, rng: RandomState = None,
            layout: Optional[FeatureLayout] = None,
            callback: Optional[Callable[[MixtureState], None]] = None) -> MixtureState:
    """Standardise the dataset features and run SEM on them"""
    layout = layout or dataset.layout
    features = dataset.features(layout)
    scaler = FeatureScaler.fit(features, layout)
    data = MixtureData(X=scaler.transform(features), tau=np.asarray(dataset.tau, dtype=float))
    return fit_sem(data, options, scaler, layout, rng, callback)


def _forward_backward(log_lik: np.ndarray, stay_probability: float) -> np.ndarray:
    T, K = log_lik.shape
    pair = _log_transitions(K, stay_probability)
    log_alpha = _forward_filter(log_lik, stay_probability)
    log_beta = np.zeros((T, K))
    for t in range(T - 2, -1, -1):
        log_beta[t] = logsumexp(pair + (log_lik[t + 1] + log_beta[t + 1])[None, :], axis=1)
    log_post = log_alpha + log_beta
    log_post -= logsumexp(log_post, axis=1, keepdims=True)
    probs = np.exp(log_post)
    return probs / probs.sum(axis=1, keepdims=True)


def query_log_likelihoods(state: MixtureState, train: MixtureData, X_query: np.ndarray,
                          tau_query: np.ndarray) -> np.ndarray:
    """(T, K) log-densities of unseen samples under each mode's full-data posterior"""
    columns = []
    models = [fit_mode_model(state, train, k) for k in range(state.n_nominal)]
    for k in range(state.n_modes):
        mean, var = predict(models[state.gp_mode(k)], X_query)
        if k == state.disturbance_index:
            var = var + state.disturbance_cov
        columns.append(norm.logpdf(tau_query, loc=mean, scale=np.sqrt(var)))
    return np.column_stack(columns)


def classify(state: MixtureState, data: MixtureData, query: Optional[MixtureData] = None) -> np.ndarray:
    """Per-sample mode posteriors (T, K) from one forward-backward pass

    Without `query` the training samples are scored held-out against their own
    labels; otherwise `query` is scored against the trained modes.
    """
    if query is None:
        log_lik = HeldOutCache(state, data).log_likelihood_matrix()
    else:
        log_lik = query_log_likelihoods(state, data, query.X, query.tau)
    if state.n_modes == 1:
        return np.ones((log_lik.shape[0], 1))
    return _forward_backward(log_lik, state.stay_probability)


def posterior_labels(probs: np.ndarray) -> np.ndarray:
    """0-based maximum-posterior label per sample"""
    return np.argmax(probs, axis=1)


def mode_ids(state: MixtureState, labels) -> np.ndarray:
    """Data-file mode ids for 0-based labels

    The disturbance mode maps to PERTURBED_MODE, nominal mode 0 to NOMINAL_MODE
    and further nominal modes to 3, 4, ...
    """
    labels = np.asarray(labels, dtype=int)
    if not state.has_disturbance:
        return labels + 1
    ids = np.where(labels == 0, NOMINAL_MODE, labels + 2)
    return np.where(labels == state.disturbance_index, PERTURBED_MODE, ids)


def to_bundle(state: MixtureState, dataset: Dataset, config_hash: Optional[str] = None) -> Dict:
    """Serializable identification result including the training set the GPs need"""
    return {
        "config_hash": config_hash,
        "state": state.to_dict(),
        "training": {
            "time": np.asarray(dataset.time, dtype=float).tolist(),
            "sample_rate": dataset.sample_rate,
            "features": dataset.features(state.layout).tolist(),
            "tau": np.asarray(dataset.tau, dtype=float).tolist(),
        },
        "n_modes": state.n_modes,
    }


def from_bundle(bundle: Dict) -> Tuple[MixtureState, MixtureData]:
    state = MixtureState.from_dict(bundle["state"])
    raw = np.asarray(bundle["training"]["features"], dtype=float)
    tau = np.asarray(bundle["training"]["tau"], dtype=float)
    if raw.ndim != 2 or raw.shape[1] != state.layout.dim:
        raise ValueError(f"Bundle training features do not match the '{state.layout.label}' layout")
    if state.labels.shape[0] != tau.shape[0]:
        raise ValueError("Bundle labels and training torques differ in length")
    return state, MixtureData(X=state.scaler.transform(raw), tau=tau)

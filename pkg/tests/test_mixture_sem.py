import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from data_loader import NOMINAL_MODE, PERTURBED_MODE, FeatureLayout, FeatureScaler
from evaluation import score_classification
from gp_core import GPHyperparams, fit, kernel_matrix, loo_log_likelihood, loo_residuals
from mixture_sem import (
    LOG_BOUNDS,
    NOISE_FLOOR,
    HeldOutCache,
    MixtureData,
    MixtureState,
    SEMOptions,
    base_hyperparams,
    block_sweep,
    classify,
    disturbance_cov_mle,
    draw_label,
    fit_disturbance_cov,
    fit_sem,
    from_bundle,
    gibbs_sweep,
    initialize_state,
    label_conditional,
    log_joint,
    mode_ids,
    mode_log_likelihood,
    optimize_hyperparams,
    posterior_labels,
    run_sem,
    sample_label_chain,
    segment_labels,
    sem_iterate,
    to_bundle,
    transition_log_prior,
)


def two_mode_data(rng, n=80, offset=4.0):
    """Sine torque with a constant offset on alternating blocks of 20 samples"""
    x = rng.uniform(-2.0, 2.0, size=n)
    truth = (np.arange(n) // 20) % 2
    tau = np.sin(x) + offset * truth + 0.05 * rng.normal(size=n)
    return MixtureData(X=x[:, None], tau=tau), truth


def make_state(labels, n_nominal=2, disturbance=True):
    return MixtureState(
        labels=np.asarray(labels),
        hyperparams=[GPHyperparams(1.0, 1.0, 0.1), GPHyperparams(0.7, 2.0, 0.05)][:n_nominal],
        stay_probability=0.9,
        scaler=FeatureScaler.identity(1),
        disturbance_cov=0.5 if disturbance else None,
    )


def test_options_never_give_single_mode_a_disturbance():
    options = SEMOptions(n_modes=1)
    assert not options.has_disturbance
    assert options.n_nominal == 1
    assert SEMOptions(n_modes=3).n_nominal == 2
    assert SEMOptions(n_modes=3, disturbance=False).n_nominal == 3


def test_options_validation():
    with pytest.raises(ValueError):
        SEMOptions(stay_probability=1.0)
    with pytest.raises(ValueError):
        SEMOptions(iterations=0)
    with pytest.raises(ValueError):
        SEMOptions(n_modes=2, disturbance_parent=1)
    with pytest.raises(ValueError):
        SEMOptions(sampler="metropolis")
    with pytest.raises(ValueError):
        SEMOptions(n_init=0)


def test_state_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        make_state([0, 1, 3])
    with pytest.raises(ValueError):
        MixtureState(labels=[0], hyperparams=[GPHyperparams(1, 1, 1)], stay_probability=1.0,
                     scaler=FeatureScaler.identity(1))


def test_disturbance_mode_shares_parent_gp():
    state = make_state([0, 1, 2])
    assert state.n_modes == 3
    assert state.disturbance_index == 2
    assert state.gp_mode(2) == 0
    assert state.gp_mode(1) == 1


def test_transition_log_prior():
    value = transition_log_prior([0, 0, 1, 1, 1], 0.9, n_modes=2)
    expected = -math.log(2) + 3 * math.log(0.9) + math.log(0.1)
    assert value == pytest.approx(expected)
    assert transition_log_prior([2], 0.5, n_modes=3) == pytest.approx(-math.log(3))
    # an unused top mode still counts in the 1/K term
    assert transition_log_prior([0, 0], 0.5, 3) == pytest.approx(-math.log(3) + math.log(0.5))


def test_transition_log_prior_needs_mode_count():
    with pytest.raises(TypeError):
        transition_log_prior([0, 1], 0.9)
    with pytest.raises(ValueError):
        transition_log_prior([0, 2], 0.9, 2)
    with pytest.raises(ValueError):
        transition_log_prior([], 0.9, 2)


def test_label_conditional_uses_both_neighbours():
    probs = label_conditional(np.zeros(2), 0, 0, 0.95)
    assert probs[0] == pytest.approx(0.95 ** 2 / (0.95 ** 2 + 0.05 ** 2))
    assert probs.sum() == pytest.approx(1.0)

    split = label_conditional(np.zeros(2), 0, 1, 0.95)
    np.testing.assert_allclose(split, [0.5, 0.5])

    edge = label_conditional(np.log([0.2, 0.8]), None, None, 0.95)
    np.testing.assert_allclose(edge, [0.2, 0.8])


def test_label_conditional_handles_extreme_likelihoods():
    probs = label_conditional(np.array([-1e4, 0.0, -2e4]), 0, 0, 0.95)
    assert np.all(np.isfinite(probs))
    assert probs[1] == pytest.approx(1.0)


def test_draw_label_follows_distribution(rng):
    assert all(draw_label(np.array([0.0, 1.0, 0.0]), rng) == 1 for _ in range(50))
    draws = [draw_label(np.array([0.25, 0.75]), rng) for _ in range(4000)]
    assert np.mean(draws) == pytest.approx(0.75, abs=0.03)


@pytest.mark.parametrize("stay", [0.9, 1.0 - 1e-3])
def test_gibbs_draw_frequency_matches_sticky_conditional(stay):
    rng = np.random.default_rng(11)
    probs = label_conditional(np.zeros(2), 1, 1, stay)
    expected = stay ** 2 / (stay ** 2 + (1.0 - stay) ** 2)
    n = 10_000
    frequency = np.mean([draw_label(probs, rng) == 1 for _ in range(n)])
    assert abs(frequency - expected) <= 4.0 * math.sqrt(expected * (1.0 - expected) / n) + 1e-4


def test_overwhelming_likelihood_ratio_always_picks_its_mode():
    # neighbours on both sides cancel, leaving a ratio of e^21
    probs = label_conditional(np.array([0.0, 21.0]), 0, 1, 0.95)
    assert all(draw_label(probs, np.random.default_rng(seed)) == 1 for seed in range(1000))


def test_sample_label_chain_matches_enumerated_posterior():
    log_lik = np.log(np.array([[0.7, 0.3], [0.4, 0.6], [0.2, 0.8]]))
    stay = 0.8
    configs = [np.array([a, b, c]) for a in range(2) for b in range(2) for c in range(2)]
    weights = np.array([
        math.exp(transition_log_prior(w, stay, 2) + log_lik[np.arange(3), w].sum()) for w in configs
    ])
    weights /= weights.sum()
    rng = np.random.default_rng(2)
    n = 8000
    counts = np.zeros(len(configs))
    for _ in range(n):
        w = sample_label_chain(log_lik, stay, rng)
        counts[int(w[0] * 4 + w[1] * 2 + w[2])] += 1
    np.testing.assert_allclose(counts / n, weights, atol=0.025)


def test_sample_label_chain_follows_decisive_evidence():
    log_lik = np.zeros((12, 2))
    log_lik[:6, 1] = -50.0
    log_lik[6:, 0] = -50.0
    labels = sample_label_chain(log_lik, 0.95, np.random.default_rng(0))
    np.testing.assert_array_equal(labels, [0] * 6 + [1] * 6)
    assert np.all(sample_label_chain(np.zeros((5, 1)), 0.95) == 0)


def test_held_out_cache_matches_refit_per_sample(rng):
    data, _ = two_mode_data(rng, n=25, offset=1.0)
    labels = rng.integers(0, 3, size=25)
    labels[:2] = 0
    labels[2:4] = 1
    state = make_state(labels)
    cache = HeldOutCache(state, data)
    for t in range(len(data)):
        cached = cache.log_likelihoods(t)
        for k in range(state.n_modes):
            assert cached[k] == pytest.approx(mode_log_likelihood(t, k, state, data), rel=1e-8, abs=1e-10)


def test_held_out_cache_handles_empty_and_singleton_modes(rng):
    data, _ = two_mode_data(rng, n=10, offset=1.0)
    labels = np.zeros(10, dtype=int)
    labels[4] = 1
    state = make_state(labels, disturbance=False)
    cache = HeldOutCache(state, data)
    for t in range(10):
        for k in range(2):
            assert cache.log_likelihoods(t)[k] == pytest.approx(mode_log_likelihood(t, k, state, data))


def test_mode_log_likelihood_rejects_unknown_mode(rng):
    data, _ = two_mode_data(rng, n=10)
    with pytest.raises(ValueError):
        mode_log_likelihood(0, 3, make_state(np.zeros(10, dtype=int)), data)


def test_gibbs_sweep_is_seeded(rng):
    data, _ = two_mode_data(rng, n=30)
    state = make_state(rng.integers(0, 3, size=30))
    first = gibbs_sweep(state, data, np.random.default_rng(5))
    second = gibbs_sweep(state, data, np.random.default_rng(5))
    np.testing.assert_array_equal(first, second)
    assert first.min() >= 0 and first.max() < 3


def test_block_sweep_is_seeded(rng):
    data, _ = two_mode_data(rng, n=30)
    state = make_state(rng.integers(0, 3, size=30))
    first = block_sweep(state, data, np.random.default_rng(5))
    np.testing.assert_array_equal(first, block_sweep(state, data, np.random.default_rng(5)))
    assert first.min() >= 0 and first.max() < 3


def test_indistinguishable_disturbance_mode_gives_uniform_labels():
    rng = np.random.default_rng(21)
    data, _ = two_mode_data(rng, n=40, offset=0.0)
    state = MixtureState(labels=np.zeros(40, dtype=int), hyperparams=[GPHyperparams(1.0, 1.0, 0.01)],
                         stay_probability=0.5, scaler=FeatureScaler.identity(1), disturbance_cov=0.0)
    counts = np.zeros(2)
    for _ in range(50):
        state = replace(state, labels=gibbs_sweep(state, data, rng))
        counts += np.bincount(state.labels, minlength=2)
    assert stats.chisquare(counts).pvalue > 0.01


def test_gibbs_sweep_single_mode_keeps_labels(rng):
    data, _ = two_mode_data(rng, n=10)
    state = MixtureState(labels=np.zeros(10, dtype=int), hyperparams=[GPHyperparams(1, 1, 0.1)],
                         stay_probability=0.9, scaler=FeatureScaler.identity(1))
    np.testing.assert_array_equal(gibbs_sweep(state, data, rng), np.zeros(10))


def test_optimize_hyperparams_never_worsens_objective(rng):
    x = rng.uniform(-2, 2, size=(30, 1))
    y = np.sin(2 * x[:, 0]) + 0.05 * rng.normal(size=30)
    init = GPHyperparams(1.0, 1.0, 0.5)
    best = optimize_hyperparams(x, y, init)
    before = loo_log_likelihood(fit(x, y, init), include_normalizer=True)
    after = loo_log_likelihood(fit(x, y, best), include_normalizer=True)
    assert after >= before
    assert math.exp(LOG_BOUNDS[0][0]) * (1 - 1e-9) <= best.length_scale <= 1e2
    assert best.noise_variance < 0.5


def test_optimize_hyperparams_recovers_length_scale():
    rng = np.random.default_rng(8)
    true = GPHyperparams(1.0, 1.0, 0.01)
    x = np.sort(rng.uniform(-5.0, 5.0, size=100))[:, None]
    K = kernel_matrix(x, x, true) + true.noise_variance * np.eye(100)
    y = np.linalg.cholesky(K) @ rng.normal(size=100)
    best = optimize_hyperparams(x, y, GPHyperparams(0.5, 0.5, 0.1))
    assert 0.5 <= best.length_scale <= 2.0


def test_optimize_hyperparams_identical_targets():
    init = GPHyperparams(1.0, 1.0, 1e-12)
    best = optimize_hyperparams(np.zeros((5, 1)), np.full(5, 3.0), init)
    assert best.length_scale == init.length_scale
    assert best.noise_variance == NOISE_FLOOR


def test_optimize_hyperparams_needs_two_samples():
    with pytest.raises(ValueError):
        optimize_hyperparams(np.zeros((1, 1)), np.ones(1), GPHyperparams(1, 1, 1))


def test_disturbance_cov_mle_closed_form():
    # equal held-out variances give Σ_d = mean(r²) − Σ
    d = disturbance_cov_mle([2.0, -2.0, 2.0, -2.0], [1.0] * 4)
    assert d == pytest.approx(3.0, abs=1e-5)


def test_disturbance_cov_mle_prefers_zero_for_small_residuals():
    assert disturbance_cov_mle([0.1, -0.1], [1.0, 1.0]) == 0.0
    assert disturbance_cov_mle([], []) == 0.0


def test_fit_disturbance_cov_uses_parent_residuals(rng):
    data, truth = two_mode_data(rng)
    state = make_state(truth, n_nominal=1)
    assert state.disturbance_index == 1
    d = fit_disturbance_cov(state, data)
    assert 12.0 < d < 20.0

    nominal_only = make_state(np.zeros(len(data), int), n_nominal=1)
    assert fit_disturbance_cov(nominal_only, data) == 0.5
    assert fit_disturbance_cov(make_state(truth, disturbance=False), data) is None


def test_fit_disturbance_cov_recovers_inflation():
    rng = np.random.default_rng(17)
    inflation = 1.0
    x_nominal = rng.uniform(-3.0, 3.0, size=200)
    x_pushed = rng.uniform(-3.0, 3.0, size=500)
    tau_nominal = np.sin(x_nominal) + 0.05 * rng.normal(size=200)
    tau_pushed = np.sin(x_pushed) + math.sqrt(inflation + 0.0025) * rng.normal(size=500)
    data = MixtureData(X=np.concatenate([x_nominal, x_pushed])[:, None],
                       tau=np.concatenate([tau_nominal, tau_pushed]))
    state = MixtureState(labels=np.r_[np.zeros(200, dtype=int), np.ones(500, dtype=int)],
                         hyperparams=[GPHyperparams(1.5, 1.0, 0.0025)], stay_probability=0.95,
                         scaler=FeatureScaler.identity(1), disturbance_cov=0.1)
    assert fit_disturbance_cov(state, data) == pytest.approx(inflation, rel=0.2)


def test_initialize_state(rng):
    data, _ = two_mode_data(rng)
    options = SEMOptions(n_modes=3, optimizer_maxiter=50)
    base = base_hyperparams(data, options)
    state = initialize_state(data, options, FeatureScaler.identity(1), FeatureLayout(), rng, base=base)
    assert state.n_nominal == 2
    assert state.hyperparams == [base, base]
    residuals, _ = loo_residuals(fit(data.X, data.tau, base))
    assert state.disturbance_cov == pytest.approx(np.mean(residuals ** 2))
    # disturbance mode starts empty, nominal labels in contiguous segments
    assert set(np.unique(state.labels)) <= {0, 1}
    assert np.count_nonzero(np.diff(state.labels)) <= 3


def test_base_hyperparams_fit_all_samples(rng):
    data, _ = two_mode_data(rng, n=40, offset=0.0)
    options = SEMOptions(optimizer_maxiter=50)
    base = base_hyperparams(data, options)
    variance = np.var(data.tau)
    start = GPHyperparams(1.0, variance, 0.1 * variance)
    assert (loo_log_likelihood(fit(data.X, data.tau, base), include_normalizer=True)
            >= loo_log_likelihood(fit(data.X, data.tau, start), include_normalizer=True))


def test_segment_labels(rng):
    labels = segment_labels(100, 2, rng)
    assert set(np.unique(labels)) == {0, 1}
    assert np.count_nonzero(np.diff(labels)) == 3
    np.testing.assert_array_equal(segment_labels(10, 1, rng), np.zeros(10))
    short = segment_labels(3, 2, rng)
    assert len(short) == 3 and np.count_nonzero(np.diff(short)) == 2


def test_sem_iterate_records_trace(rng):
    data, _ = two_mode_data(rng, n=40)
    options = SEMOptions(n_modes=2, disturbance=False, iterations=2, optimizer_maxiter=20)
    state = initialize_state(data, options, FeatureScaler.identity(1), FeatureLayout(), rng)
    state = sem_iterate(state, data, rng, options)
    assert state.iteration == 1
    assert len(state.trace) == 1 and np.isfinite(state.trace[0])


def test_sem_separates_offset_modes():
    rng = np.random.default_rng(3)
    data, truth = two_mode_data(rng)
    options = SEMOptions(n_modes=2, disturbance=False, iterations=50)
    state = fit_sem(data, options, FeatureScaler.identity(1), FeatureLayout(), rng)
    assert state.iteration == 50 and len(state.trace) == 50
    counts = score_classification(state.labels + 1, truth + 1)
    assert counts.accuracy >= 0.95


def test_restarts_continue_the_best_chain(rng):
    data, _ = two_mode_data(rng, n=40)
    options = SEMOptions(n_modes=2, disturbance=False, iterations=3, init_iterations=1, n_init=3,
                         optimizer_maxiter=20)
    seen = []
    state = fit_sem(data, options, FeatureScaler.identity(1), FeatureLayout(), rng, callback=seen.append)
    warmed = seen[:3]
    assert [s.iteration for s in seen] == [1, 1, 1, 2, 3]
    best = max(warmed, key=lambda s: log_joint(s, data))
    assert seen[3].trace[0] == best.trace[0]
    assert state.iteration == 3 and len(state.trace) == 3


def test_log_joint_adds_label_prior(rng):
    data, truth = two_mode_data(rng, n=40)
    state = replace(make_state(truth, disturbance=False), trace=[-12.5])
    assert log_joint(state, data) == pytest.approx(-12.5 + transition_log_prior(truth, 0.9, 2))


def test_run_sem_single_mode(short_dataset):
    state = run_sem(short_dataset, SEMOptions(n_modes=1), np.random.default_rng(0))
    assert state.n_modes == 1
    assert state.disturbance_cov is None
    assert np.all(state.labels == 0)
    probs = classify(state, MixtureData.prepare(short_dataset, state.scaler))
    np.testing.assert_array_equal(probs, np.ones((len(short_dataset), 1)))


def test_run_sem_is_reproducible(short_dataset):
    options = SEMOptions(n_modes=2, iterations=2, optimizer_maxiter=30, n_init=1)
    seen = []
    a = run_sem(short_dataset, options, np.random.default_rng(7), callback=seen.append)
    b = run_sem(short_dataset, options, np.random.default_rng(7))
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.trace == b.trace
    assert len(seen) == 2
    assert a.has_disturbance and a.disturbance_cov >= 0


@pytest.mark.parametrize("sampler", ["block", "gibbs"])
def test_sem_iterate_with_either_sampler(rng, sampler):
    data, _ = two_mode_data(rng, n=30)
    options = SEMOptions(n_modes=3, iterations=1, optimizer_maxiter=20, sampler=sampler)
    state = initialize_state(data, options, FeatureScaler.identity(1), FeatureLayout(), rng)
    state = sem_iterate(state, data, rng, options)
    assert state.iteration == 1 and np.isfinite(state.trace[0])
    assert state.labels.max() < 3


def test_classify_is_equivariant_under_mode_permutation(rng):
    data, truth = two_mode_data(rng, n=40, offset=2.0)
    state = make_state(truth, disturbance=False)
    swapped = MixtureState(labels=1 - truth, hyperparams=state.hyperparams[::-1],
                           stay_probability=state.stay_probability, scaler=state.scaler)
    np.testing.assert_allclose(classify(swapped, data), classify(state, data)[:, ::-1], rtol=1e-9, atol=1e-12)
    query, _ = two_mode_data(rng, n=15, offset=2.0)
    np.testing.assert_allclose(classify(swapped, data, query), classify(state, data, query)[:, ::-1],
                               rtol=1e-9, atol=1e-12)


def test_huge_disturbance_cov_still_claims_extreme_residuals(rng):
    x = np.linspace(-2.0, 2.0, 30)
    tau = np.sin(x) + 0.01 * rng.normal(size=30)
    tau[15] += 1e4
    labels = np.zeros(30, dtype=int)
    labels[15] = 1
    state = MixtureState(labels=labels, hyperparams=[GPHyperparams(1.0, 1.0, 1e-4)], stay_probability=0.95,
                         scaler=FeatureScaler.identity(1), disturbance_cov=1e6)
    probs = classify(state, MixtureData(X=x[:, None], tau=tau))
    assert probs[15, 1] > 0.99
    assert np.all(probs[np.arange(30) != 15, 0] > 0.99)


def test_mode_ids_follow_data_file_convention():
    state = make_state([0, 1, 2])
    np.testing.assert_array_equal(mode_ids(state, [0, 1, 2]), [NOMINAL_MODE, 3, PERTURBED_MODE])
    nominal_only = make_state([0, 1], disturbance=False)
    np.testing.assert_array_equal(mode_ids(nominal_only, [0, 1]), [1, 2])
    np.testing.assert_array_equal(posterior_labels(np.array([[0.2, 0.8], [0.9, 0.1]])), [1, 0])


def test_classify_posteriors_are_normalised(short_dataset):
    state = run_sem(short_dataset, SEMOptions(n_modes=2, iterations=1, optimizer_maxiter=20),
                    np.random.default_rng(1))
    data = MixtureData.prepare(short_dataset, state.scaler)
    held_out = classify(state, data)
    fresh = classify(state, data, query=data)
    for probs in (held_out, fresh):
        assert probs.shape == (len(short_dataset), 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert np.all(probs >= 0)


def test_bundle_round_trip(short_dataset):
    state = run_sem(short_dataset, SEMOptions(n_modes=2, iterations=1, optimizer_maxiter=20),
                    np.random.default_rng(2))
    bundle = to_bundle(state, short_dataset, "abc")
    assert bundle["state"]["labels"] == (state.labels + 1).tolist()
    restored, data = from_bundle(bundle)
    np.testing.assert_array_equal(restored.labels, state.labels)
    assert restored.hyperparams == state.hyperparams
    assert restored.disturbance_cov == state.disturbance_cov
    np.testing.assert_allclose(data.X, MixtureData.prepare(short_dataset, state.scaler).X)


def test_from_bundle_rejects_layout_mismatch(short_dataset):
    state = run_sem(short_dataset, SEMOptions(n_modes=1), np.random.default_rng(0))
    bundle = to_bundle(state, short_dataset)
    bundle["state"]["feature_layout"] = "sgn"
    with pytest.raises(ValueError):
        from_bundle(bundle)

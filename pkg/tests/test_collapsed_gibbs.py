import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import integrate
from scipy.stats import ks_2samp, norm, truncnorm
from scipy.special import gammaln

from collapsed_gibbs import (ChainState, ClusterStats, GlobalStats, UNASSIGNED, assignment_log_weights,
                             collect_global_stats, gibbs_sweep, log_marginal_cluster, log_V,
                             log_partition_prior, pruning_radius, resample_assignments, resample_latent_event,
                             resample_latent_events, sample_globals_from_stats, sample_log_categorical,
                             sample_prior_globals, spike_terms)
from conftest import canonical, enumerate_labelings, exact_partition_posterior, make_params
from data_generators import sample_global_params, simulate
from exceptions import DegenerateInputError
from models import Hyperparams, build_warp_grid, log_likelihood

HYPER = Hyperparams(n_neurons=6, duration=30., n_types=2, psi=0.2, alpha=8., beta=1., sigma2=0.1, kappa=1.,
                    alpha_bg=3., beta_bg=3., n_warps=3, max_warp=1.4, window=3.)
GRID = build_warp_grid(HYPER.n_warps, HYPER.max_warp, HYPER.warp_variance)


def random_state(seed, n_clusters=4):
    rng = np.random.default_rng(seed)
    data, _ = simulate(HYPER, GRID, rng)
    params = sample_global_params(HYPER, rng)
    assignments = rng.integers(0, n_clusters + 1, size=len(data))
    return ChainState.from_dataset(data, params, GRID, assignments=assignments), rng


def test_categorical_never_draws_impossible_outcomes(rng):
    draws = [sample_log_categorical([-np.inf, 0., -np.inf], rng) for _ in range(100)]
    assert set(draws) == {1}
    with pytest.raises(DegenerateInputError):
        sample_log_categorical([-np.inf, -np.inf], rng)


def test_categorical_frequencies(rng):
    draws = np.array([sample_log_categorical(np.log([1., 3.]), rng) for _ in range(20000)])
    assert draws.mean() == pytest.approx(0.75, abs=4 * np.sqrt(0.75 * 0.25 / 20000))


def test_singleton_marginal(rng):
    # narrow responses keep the event time far inside [0, T]
    params = sample_global_params(HYPER, rng, width=0.25)
    for n in range(1, HYPER.n_neurons + 1):
        stats = ClusterStats.from_terms(*spike_terms([n], [12.3], params, GRID))
        expected = np.log(np.sum(params.type_probs * params.neuron_weights[:, n - 1]) / HYPER.duration)
        assert log_marginal_cluster(stats, params, HYPER, GRID) == pytest.approx(expected, rel=1e-10)


def test_two_spike_marginal_matches_quadrature():
    hyper = Hyperparams(n_neurons=2, duration=20.)
    grid = build_warp_grid(1, 1., 1.)
    params = make_params(2, delay=0., width=0.25, weights=np.array([[0.3, 0.7]]))
    params.delays[:, 0] = [0.4, -0.1]
    params.widths[:, 0] = [0.25, 0.09]
    neurons, times = np.array([1, 2]), np.array([10.2, 9.95])
    stats = ClusterStats.from_terms(*spike_terms(neurons, times, params, grid))

    def integrand(tau):
        density = np.exp(-0.5 * (times - tau - params.delays[neurons - 1, 0]) ** 2 / params.widths[neurons - 1, 0])
        density /= np.sqrt(2 * np.pi * params.widths[neurons - 1, 0])
        return np.prod(params.neuron_weights[0, neurons - 1] * density) / hyper.duration

    value, _ = integrate.quad(integrand, 0., hyper.duration, points=[10.], epsabs=0, epsrel=1e-12, limit=200)
    assert log_marginal_cluster(stats, params, hyper, grid) == pytest.approx(np.log(value), rel=1e-6)


def test_event_time_is_integrated_over_the_recording():
    hyper = Hyperparams(n_neurons=3, duration=10.)
    grid = build_warp_grid(1, 1., 1.)
    params = make_params(3, width=1.)
    cluster = ClusterStats.from_terms(*spike_terms([1], [0.2], params, grid))
    window = norm.cdf(9.8) - norm.cdf(-0.2)
    expected = np.log(window / 3. / hyper.duration)
    assert log_marginal_cluster(cluster, params, hyper, grid) == pytest.approx(expected, rel=1e-10)


def test_event_time_draws_stay_inside_the_recording(rng):
    hyper = Hyperparams(n_neurons=3, duration=10.)
    grid = build_warp_grid(1, 1., 1.)
    params = make_params(3, width=1.)
    cluster = ClusterStats.from_terms(*spike_terms([1], [0.2], params, grid))
    taus = np.array([resample_latent_event(cluster, params, hyper, grid, rng).time for _ in range(20000)])
    assert taus.min() >= 0. and taus.max() <= hyper.duration
    truncated = truncnorm(-0.2, 9.8, loc=0.2, scale=1.)
    assert taus.mean() == pytest.approx(truncated.mean(), abs=4 * truncated.std() / np.sqrt(20000))


def test_marginal_far_outside_the_recording_is_finite():
    hyper = Hyperparams(n_neurons=2, duration=10.)
    grid = build_warp_grid(1, 1., 1.)
    params = make_params(2, width=0.01)
    cluster = ClusterStats.from_terms(*spike_terms([1, 2], [-30., -30.1], params, grid))
    value = log_marginal_cluster(cluster, params, hyper, grid)
    assert np.isfinite(value) and value < -1e3


def test_spikes_outside_the_recording_cannot_be_background():
    hyper = Hyperparams(n_neurons=2, duration=10., beta=1.)
    state = ChainState([1, 2, 1], [-0.5, 5., 10.5], make_params(2), build_warp_grid(1, 1., 1.), hyper.duration)
    weights = state.log_background_weights(hyper)
    assert np.isneginf(weights[0]) and np.isneginf(weights[2])
    assert weights[1] == pytest.approx(np.log(2.))


def test_pruning_radius():
    params = make_params(2, delay=0.5, width=0.04)
    grid = build_warp_grid(3, 1.5, 1.)
    assert pruning_radius(params, grid) == pytest.approx(1.5 * (1.5 + 12 * 0.2))
    assert pruning_radius(params, grid, n_sigmas=None) == np.inf


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_pruned_sweeps_match_exhaustive_sweeps(seed):
    hyper = replace(HYPER, duration=200.)
    data, truth = simulate(hyper, GRID, np.random.default_rng(seed), width=0.01)
    pruned = ChainState.from_dataset(data, truth.params, GRID)
    assert pruned.radius < hyper.duration / 10
    exhaustive = pruned.copy()
    exhaustive.radius = np.inf
    first, second = np.random.default_rng(seed), np.random.default_rng(seed)
    for _ in range(5):
        resample_assignments(pruned, hyper, first)
        resample_assignments(exhaustive, hyper, second)
        np.testing.assert_array_equal(pruned.assignments, exhaustive.assignments)


def test_marginal_rejects_empty_cluster(rng):
    with pytest.raises(ValueError):
        log_marginal_cluster(ClusterStats.empty(2, 3), sample_global_params(HYPER, rng), HYPER, GRID)


def test_zero_neuron_weight_excludes_type():
    grid = build_warp_grid(1, 1., 1.)
    weights = np.array([[0.5, 0.5], [1., 0.]])
    params = make_params(2, n_types=2, weights=weights)
    hyper = Hyperparams(n_neurons=2, duration=10., n_types=2)
    stats = ClusterStats.from_terms(*spike_terms([2], [5.], params, grid))
    assert stats.n_zero_weights.tolist() == [0, 1]
    assert log_marginal_cluster(stats, params, hyper, grid) == pytest.approx(np.log(0.5 * 0.5 / 10.))


def test_cluster_clusteradd_remove_inverse(rng):
    params = sample_global_params(HYPER, rng)
    terms = spike_terms([1, 2, 3], [5., 5.2, 5.1], params, GRID)
    stats = ClusterStats.from_terms(*(t[:2] for t in terms))
    before = [np.copy(a) for a in stats.accumulators()]
    stats.add(*(t[2] for t in terms)).remove(*(t[2] for t in terms))
    for old, new in zip(before, stats.accumulators()):
        np.testing.assert_allclose(new, old, rtol=1e-12, atol=1e-9)


def test_chain_state_remove_then_add_restores_evidence():
    state, _ = random_state(1, n_clusters=2)
    k = int(state.cluster_ids[np.argmax(state.cluster_sizes())])
    index = int(state.members(k)[0])
    before = log_marginal_cluster(state.cluster_stats(k), state.params, HYPER, GRID)
    state.remove_spike(index)
    assert state.assignments[index] == UNASSIGNED
    state.add_spike(index, k)
    after = log_marginal_cluster(state.cluster_stats(k), state.params, HYPER, GRID)
    assert after == pytest.approx(before, rel=1e-10)


def test_removing_last_member_frees_cluster():
    state, rng = random_state(2, n_clusters=2)
    index = 0
    k = state.new_cluster()
    state.remove_spike(index)
    state.add_spike(index, k)
    resample_latent_events(state, HYPER, rng)
    assert k in state.events
    state.remove_spike(index)
    assert k not in state.cluster_ids
    assert k not in state.events


@given(st.integers(min_value=0, max_value=10 ** 6))
def test_existing_cluster_weight_matches_marginal_ratio(seed):
    state, rng = random_state(seed)
    assume(state.n_spikes > 0)
    index = int(rng.integers(state.n_spikes))
    state.remove_spike(index)
    ids, log_weights = assignment_log_weights(index, state, HYPER)
    assert len(log_weights) == len(ids) + 2
    for k, weight in zip(ids, log_weights[1:-1]):
        members = state.members(k)
        with_spike = np.append(members, index)
        expected = np.log(HYPER.alpha + len(members)) + \
            log_marginal_cluster(ClusterStats.from_terms(*state.terms_of(with_spike)), state.params, HYPER, GRID) - \
            log_marginal_cluster(ClusterStats.from_terms(*state.terms_of(members)), state.params, HYPER, GRID)
        assert weight == pytest.approx(expected, rel=1e-10, abs=1e-9)


def test_background_and_new_cluster_weights():
    hyper = Hyperparams(n_neurons=10, duration=10., alpha=1., beta=1., psi=2.)
    grid = build_warp_grid(1, 1., 1.)
    state = ChainState([4], [5.], make_params(10, bg_rate=1.5), grid, hyper.duration)
    state.remove_spike(0)
    ids, log_weights = assignment_log_weights(0, state, hyper)
    assert len(ids) == 0
    assert np.exp(log_weights[0]) == pytest.approx(3.0)
    assert np.exp(log_weights[-1]) == pytest.approx(0.1)


def test_weights_require_removed_spike():
    state, _ = random_state(3)
    with pytest.raises(ValueError):
        assignment_log_weights(0, state, HYPER)


def test_vanishing_sequence_rate_sends_spikes_to_background(rng):
    hyper = replace(HYPER, psi=1e-12)
    state, _ = random_state(4, n_clusters=0)
    resample_assignments(state, hyper, rng)
    assert state.n_background == state.n_spikes


def test_unknown_sweep_order(rng):
    state, _ = random_state(5)
    with pytest.raises(ValueError):
        resample_assignments(state, HYPER, rng, order='backwards')


def test_two_spike_posterior_matches_enumeration(rng):
    hyper = Hyperparams(n_neurons=2, duration=10., psi=0.5, alpha=2., beta=0.5)
    grid = build_warp_grid(1, 1., 1.)
    params = make_params(2, bg_rate=0.2, width=0.04)
    neurons, times = np.array([1, 2]), np.array([5., 5.05])
    exact = exact_partition_posterior(neurons, times, params, grid, hyper)
    state = ChainState(neurons, times, params, grid, hyper.duration)
    n_sweeps = 10000
    counts = {}
    for _ in range(n_sweeps):
        resample_assignments(state, hyper, rng, order='random')
        key = canonical(state.assignments)
        counts[key] = counts.get(key, 0) + 1
    for labels, prob in exact.items():
        assert counts.get(labels, 0) / n_sweeps == pytest.approx(prob, abs=0.03)


def test_singleton_event_time_distribution(rng):
    hyper = Hyperparams(n_neurons=3, duration=20.)
    grid = build_warp_grid(1, 1., 1.)
    params = make_params(3, delay=0.7, width=0.09)
    stats = ClusterStats.from_terms(*spike_terms([2], [10.], params, grid))
    taus = np.array([resample_latent_event(stats, params, hyper, grid, rng).time for _ in range(20000)])
    assert taus.mean() == pytest.approx(9.3, abs=4 * 0.3 / np.sqrt(20000))
    assert taus.var() == pytest.approx(0.09, rel=0.05)


def test_event_amplitude_distribution(rng):
    hyper = Hyperparams(n_neurons=3, duration=20., alpha=2., beta=1.)
    grid = build_warp_grid(1, 1., 1.)
    params = make_params(3)
    stats = ClusterStats.from_terms(*spike_terms([1, 2, 3, 1, 2, 3, 1], np.full(7, 10.), params, grid))
    amplitudes = np.array([resample_latent_event(stats, params, hyper, grid, rng).amplitude for _ in range(20000)])
    assert amplitudes.mean() == pytest.approx(4.5, abs=4 * 1.5 / np.sqrt(20000))
    assert amplitudes.var() == pytest.approx(2.25, rel=0.05)


def test_background_rate_with_no_spikes(rng):
    hyper = Hyperparams(n_neurons=2, duration=10., alpha_bg=4., beta_bg=2.)
    stats = GlobalStats.empty(2, 1, exposure=hyper.duration)
    rates = np.array([sample_globals_from_stats(stats, hyper, rng).bg_rates for _ in range(5000)])
    expected = 4. / 12.
    assert rates.mean() == pytest.approx(expected, abs=4 * np.sqrt(4. / 144. / 10000))


def test_neuron_weight_count_update(rng):
    hyper = Hyperparams(n_neurons=3, duration=10., phi=1.)
    stats = GlobalStats.empty(3, 1, exposure=10.)
    stats.neuron_type_counts = np.array([[3., 0., 1.]])
    weights = np.array([sample_globals_from_stats(stats, hyper, rng).neuron_weights[0] for _ in range(20000)])
    np.testing.assert_allclose(weights.mean(axis=0), np.array([4., 1., 2.]) / 7., atol=0.01)


def test_offset_and_width_posterior_moments(rng):
    hyper = Hyperparams(n_neurons=1, duration=10., nu=4., sigma2=0.1, kappa=0.5)
    offsets = np.array([0.2, 0.5, -0.1, 0.3, 0.4])
    stats = GlobalStats.empty(1, 1, exposure=10.)
    stats.offset_count = np.array([[5.]])
    stats.offset_sum = np.array([[offsets.sum()]])
    stats.offset_sq_sum = np.array([[np.sum(offsets ** 2)]])
    draws = [sample_globals_from_stats(stats, hyper, rng) for _ in range(20000)]
    delays = np.array([p.delays[0, 0] for p in draws])
    widths = np.array([p.widths[0, 0] for p in draws])

    kappa_n, nu_n = hyper.kappa + 5, hyper.nu + 5
    scatter = hyper.nu * hyper.sigma2 + np.sum(offsets ** 2) - offsets.sum() ** 2 / kappa_n
    mean_width = scatter / (nu_n - 2)
    assert widths.mean() == pytest.approx(mean_width, rel=0.02)
    assert delays.mean() == pytest.approx(offsets.sum() / kappa_n, abs=0.01)


def test_global_clusterrequire_events():
    state, _ = random_state(6)
    if state.n_clusters:
        with pytest.raises(ValueError):
            collect_global_stats(state)


def test_global_clusteradd():
    first, second = GlobalStats.empty(3, 2, exposure=5.), GlobalStats.empty(3, 2, exposure=7.)
    first.bg_counts[0] = 2.
    second.bg_counts[0] = 1.
    total = first + second
    assert total.exposure == 12.
    assert total.bg_counts[0] == 3.


@given(st.integers(min_value=0, max_value=10 ** 6))
def test_gibbs_sweep_keeps_state_consistent(seed):
    rng = np.random.default_rng(seed)
    data, _ = simulate(HYPER, GRID, rng)
    state = ChainState.from_dataset(data, sample_prior_globals(HYPER, rng), GRID)
    gibbs_sweep(data, state, HYPER, GRID, rng)
    gibbs_sweep(data, state, HYPER, GRID, rng, update_globals=False)
    assert set(np.unique(state.assignments)) <= {0} | set(state.cluster_ids.tolist())
    assert sorted(state.events) == state.cluster_ids.tolist()
    for k in state.cluster_ids:
        direct = ClusterStats.from_terms(*state.terms_of(state.members(k)))
        for kept, recomputed in zip(state.cluster_stats(k).accumulators(), direct.accumulators()):
            np.testing.assert_allclose(kept, recomputed, rtol=1e-9, atol=1e-7)


def test_sweep_without_global_updates_keeps_params(tiny_data, tiny_hyper, tiny_grid, rng):
    params = sample_prior_globals(tiny_hyper, rng)
    state = ChainState.from_dataset(tiny_data, params, tiny_grid)
    gibbs_sweep(tiny_data, state, tiny_hyper, tiny_grid, rng, update_globals=False)
    assert state.params is params
    assert np.isfinite(log_likelihood(tiny_data, state.event_list(), state.params, tiny_grid))


def test_chain_state_round_trip(tiny_data, tiny_hyper, tiny_grid, rng):
    state = ChainState.from_dataset(tiny_data, sample_prior_globals(tiny_hyper, rng), tiny_grid)
    gibbs_sweep(tiny_data, state, tiny_hyper, tiny_grid, rng)
    restored = ChainState.from_dict(state.to_dict(), tiny_grid)
    np.testing.assert_array_equal(restored.assignments, state.assignments)
    assert restored.event_list() == state.event_list()
    np.testing.assert_array_equal(restored.params.delays, state.params.delays)


def test_log_V_closed_form():
    hyper = Hyperparams(n_neurons=1, duration=1., psi=1., alpha=1., beta=1.)
    assert log_V(0, hyper) == pytest.approx(-0.5, rel=1e-12)


@given(st.floats(min_value=0.01, max_value=5.), st.floats(min_value=1., max_value=40.),
       st.floats(min_value=0.5, max_value=20.), st.floats(min_value=0.1, max_value=5.),
       st.integers(min_value=0, max_value=25))
def test_log_V_matches_closed_form(psi, duration, alpha, beta, k_star):
    hyper = Hyperparams(n_neurons=1, duration=duration, psi=psi, alpha=alpha, beta=beta)
    expected_events = psi * duration
    log_q = alpha * (np.log(beta) - np.log1p(beta))
    closed = -expected_events + k_star * (np.log(expected_events) + log_q) + expected_events * np.exp(log_q)
    assert log_V(k_star, hyper) == pytest.approx(closed, rel=1e-10, abs=1e-10)


def test_log_V_without_sequences():
    hyper = Hyperparams(n_neurons=1, duration=10., psi=0.)
    assert log_V(0, hyper) == 0.
    assert log_V(3, hyper) == -np.inf
    with pytest.raises(ValueError):
        log_V(-1, hyper)


def test_partition_prior_single_background_spike():
    hyper = Hyperparams(n_neurons=1, duration=4.)
    rate = 0.5
    expected = log_V(0, hyper) + np.log(rate * hyper.duration) - rate * hyper.duration
    assert log_partition_prior((1, []), hyper, rate) == pytest.approx(expected)


def test_partition_prior_cluster_size_factor():
    hyper = Hyperparams(n_neurons=1, duration=4., alpha=1., beta=2.)
    rate = 0.5
    expected = log_V(1, hyper) - rate * hyper.duration - gammaln(3) - 2 * np.log(3.) + np.log(2.)
    assert log_partition_prior((0, [2]), hyper, rate) == pytest.approx(expected)


def test_partition_prior_rejects_empty_clusters():
    with pytest.raises(ValueError):
        log_partition_prior((1, [0]), Hyperparams(n_neurons=1, duration=1.), 1.)


def test_sweep_from_an_all_background_start(rng):
    hyper = Hyperparams(n_neurons=2, duration=10., psi=0.5, alpha=2., beta=1.)
    grid = build_warp_grid(1, 1., 1.)
    state = ChainState([1, 2], [1., 2.], make_params(2), grid, hyper.duration)
    assert state.n_clusters == 0
    for _ in range(20):
        gibbs_sweep(None, state, hyper, grid, rng)
        assert sorted(state.events) == state.cluster_ids.tolist()
        assert set(np.unique(state.assignments)) <= {0} | set(state.cluster_ids.tolist())


def test_sweep_without_spikes(rng):
    hyper = Hyperparams(n_neurons=2, duration=10.)
    grid = build_warp_grid(1, 1., 1.)
    state = ChainState([], [], make_params(2), grid, hyper.duration)
    gibbs_sweep(None, state, hyper, grid, rng)
    assert state.n_spikes == 0 and state.n_clusters == 0
    assert state.params.bg_rates.shape == (2,)


def test_partition_prior_matches_simulated_partitions():
    # spikes of the generative process, conditioned on there being exactly three of them
    hyper = Hyperparams(n_neurons=1, duration=1., psi=1., alpha=2., beta=1.)
    bg_rate, n_draws, max_events = 1., 400000, 12
    rng = np.random.default_rng(11)
    n_events = rng.poisson(hyper.psi * hyper.duration, n_draws)
    amplitudes = rng.gamma(hyper.alpha, 1. / hyper.beta, (n_draws, max_events))
    counts = rng.poisson(amplitudes) * (np.arange(max_events)[None, :] < n_events[:, None])
    n_bg = rng.poisson(bg_rate * hyper.duration, n_draws)
    hits = np.flatnonzero(n_bg + counts.sum(axis=1) == 3)
    frequencies = {}
    for row in hits:
        labels = np.concatenate([np.zeros(n_bg[row], dtype=np.int64), np.repeat(np.arange(1, max_events + 1),
                                                                                 counts[row])])
        key = canonical(rng.permutation(labels))
        frequencies[key] = frequencies.get(key, 0) + 1

    labelings = enumerate_labelings(3)
    assert set(frequencies) <= set(labelings)
    for labels in labelings:
        sizes = np.bincount(labels, minlength=4)
        prob = np.exp(log_partition_prior((sizes[0], sizes[1:][sizes[1:] > 0]), hyper, bg_rate))
        observed = frequencies.get(labels, 0) / n_draws
        assert observed == pytest.approx(prob, abs=4 * np.sqrt(prob * (1 - prob) / n_draws) + 1e-5), labels


@pytest.mark.slow
def test_sweep_order_does_not_change_the_stationary_distribution(tiny_data, tiny_hyper, tiny_grid):
    draws = {}
    for order, seed in [('time', 0), ('reverse', 1)]:
        values = []
        for chain in range(3):
            rng = np.random.default_rng([seed, chain])
            state = ChainState.from_dataset(tiny_data, sample_prior_globals(tiny_hyper, rng), tiny_grid)
            for sweep in range(600):
                gibbs_sweep(tiny_data, state, tiny_hyper, tiny_grid, rng, order=order)
                if sweep >= 100 and sweep % 10 == 0:
                    values.append(log_likelihood(tiny_data, state.event_list(), state.params, tiny_grid))
        draws[order] = values
    assert ks_2samp(draws['time'], draws['reverse']).pvalue > 0.01


def _sweep_seconds(duration, n_sweeps, seed=0):
    hyper = Hyperparams(n_neurons=100, duration=duration, n_types=2)
    grid = build_warp_grid(1, 1., 1.)
    rng = np.random.default_rng(seed)
    data, truth = simulate(hyper, grid, rng)
    state = ChainState.from_dataset(data, truth.params, grid)
    gibbs_sweep(data, state, hyper, grid, rng)
    start = time.perf_counter()
    for _ in range(n_sweeps):
        gibbs_sweep(data, state, hyper, grid, rng)
    return time.perf_counter() - start, len(data)


@pytest.mark.slow
def test_hundred_sweeps_over_twenty_thousand_spikes():
    seconds, n_spikes = _sweep_seconds(5600., 100)
    assert n_spikes > 15000
    assert seconds < 60.


@pytest.mark.slow
def test_sweep_time_grows_linearly_with_the_recording():
    def per_spike(duration):
        timings = [_sweep_seconds(duration, 10, seed) for seed in range(3)]
        return min(seconds / n_spikes for seconds, n_spikes in timings)

    assert per_spike(4000.) <= 1.5 * per_spike(2000.)

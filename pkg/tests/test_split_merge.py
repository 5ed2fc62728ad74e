import numpy as np
import pytest
from scipy.special import gammaln

from collapsed_gibbs import ChainState, ClusterStats, log_marginal_cluster, log_V, resample_assignments
from conftest import canonical, exact_partition_posterior, make_params
from fit_sequences import batch_means_standard_error
from models import Dataset, Hyperparams, build_warp_grid
from split_merge import (log_merge_ratio, log_split_ratio, qualifying_pairs, sample_pair, split_merge_move,
                         split_merge_moves)

GRID = build_warp_grid(1, 1., 1.)


def clustered_state(times, assignments, hyper, width=0.04, bg_rate=0.2):
    neurons = np.arange(len(times)) % hyper.n_neurons + 1
    params = make_params(hyper.n_neurons, bg_rate=bg_rate, width=width)
    return ChainState(neurons, times, params, GRID, hyper.duration, assignments=assignments)


def test_pairs_respect_window(rng):
    hyper = Hyperparams(n_neurons=3, duration=20., window=2.)
    state = clustered_state([0.5, 1.5, 10.], [1, 2, 3], hyper)
    pairs = qualifying_pairs(state, hyper.window)
    assert pairs.n_pairs == 1
    for _ in range(50):
        assert sample_pair(pairs, rng) == (0, 1)


def test_window_is_exclusive():
    hyper = Hyperparams(n_neurons=2, duration=20.)
    state = clustered_state([1., 3.], [1, 2], hyper)
    assert qualifying_pairs(state, 2.).n_pairs == 0
    assert qualifying_pairs(state, 2.001).n_pairs == 1


def test_background_spikes_are_never_paired(rng):
    hyper = Hyperparams(n_neurons=3, duration=20.)
    state = clustered_state([1., 1.1, 1.2], [0, 1, 1], hyper)
    pairs = qualifying_pairs(state, 5.)
    assert pairs.n_pairs == 1
    assert sample_pair(pairs, rng) == (1, 2)


def test_uniform_pair_selection(rng):
    hyper = Hyperparams(n_neurons=4, duration=20.)
    state = clustered_state([1., 1.5, 2., 2.5], [1, 1, 2, 2], hyper)
    pairs = qualifying_pairs(state, 10.)
    assert pairs.n_pairs == 6
    draws = [sample_pair(pairs, rng) for _ in range(12000)]
    counts = np.array([draws.count(pair) for pair in sorted(set(draws))])
    assert len(counts) == 6
    np.testing.assert_allclose(counts / 12000., 1 / 6., atol=0.02)


def test_no_pairs_no_moves(rng):
    hyper = Hyperparams(n_neurons=2, duration=20.)
    state = clustered_state([1., 15.], [0, 1], hyper)
    assert sample_pair(qualifying_pairs(state, hyper.window), rng) is None
    assert split_merge_moves(state, None, hyper, GRID, rng, 10) == (state, 0)


def test_merge_ratio_of_two_singletons():
    hyper = Hyperparams(n_neurons=2, duration=20., alpha=3., beta=1., psi=0.1)
    state = clustered_state([5., 5.1], [1, 2], hyper)
    first, second = np.array([0]), np.array([1])

    def marginal(members):
        return log_marginal_cluster(ClusterStats.from_terms(*state.terms_of(members)), state.params, hyper, GRID)

    expected = log_V(1, hyper) - log_V(2, hyper) + gammaln(2 + hyper.alpha) - 2 * gammaln(1 + hyper.alpha) + \
        gammaln(hyper.alpha) + marginal(np.array([0, 1])) - marginal(first) - marginal(second)
    assert log_merge_ratio(state, first, second, hyper) == pytest.approx(expected)


def test_split_ratio_reverses_merge():
    hyper = Hyperparams(n_neurons=3, duration=20., alpha=3., beta=1., psi=0.1)
    times = [5., 5.1, 5.2, 5.4]
    first, second = np.array([0, 2]), np.array([1, 3])
    separate = clustered_state(times, [1, 2, 1, 2], hyper)
    together = clustered_state(times, [1, 1, 1, 1], hyper)
    merge = log_merge_ratio(separate, first, second, hyper)
    assert log_split_ratio(together, first, second, hyper) == pytest.approx(-merge)


def test_accepted_moves_keep_state_consistent(rng):
    hyper = Hyperparams(n_neurons=4, duration=20., alpha=2., beta=0.5, psi=0.5, window=3.)
    times = [5., 5.05, 5.1, 6., 6.1, 9.]
    state = clustered_state(times, [1, 2, 3, 1, 4, 4], hyper)
    n_accepted = 0
    for _ in range(300):
        state, accepted = split_merge_move(state, None, hyper, GRID, rng)
        n_accepted += accepted
    assert n_accepted > 0
    assert state.n_background == 0
    for k in state.cluster_ids:
        direct = ClusterStats.from_terms(*state.terms_of(state.members(k)))
        assert state.cluster_stats(k).size == direct.size
        np.testing.assert_allclose(state.cluster_stats(k).sum_h, direct.sum_h, rtol=1e-9)
    assert set(np.unique(state.assignments)) == set(state.cluster_ids.tolist())


@pytest.mark.slow
def test_four_spike_posterior_matches_enumeration(rng):
    hyper = Hyperparams(n_neurons=4, duration=20., psi=0.3, alpha=2., beta=0.5, window=10.)
    params = make_params(4, bg_rate=0.1, width=0.04)
    data = Dataset([1, 2, 3, 4], [10., 10.1, 10.3, 11.], 4, hyper.duration)
    exact = exact_partition_posterior(data.neurons, data.times, params, GRID, hyper)
    # background plus every set partition of the rest, the partitions of five items
    assert len(exact) == 52
    assert sum(exact.values()) == pytest.approx(1.)
    index = {labels: i for i, labels in enumerate(exact)}
    state = ChainState.from_dataset(data, params, GRID)
    n_steps = 10 ** 6
    visited = np.empty(n_steps, dtype=np.int64)
    for step in range(n_steps):
        resample_assignments(state, hyper, rng, order='random')
        state, _ = split_merge_move(state, data, hyper, GRID, rng)
        visited[step] = index[canonical(state.assignments)]
    for labels, prob in exact.items():
        hits = (visited == index[labels]).astype(float)
        error = max(batch_means_standard_error(hits, n_batches=100), np.sqrt(prob * (1 - prob) / n_steps))
        assert abs(hits.mean() - prob) < 3 * error + 1e-4, (labels, hits.mean(), prob)

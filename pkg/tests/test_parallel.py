import functools
import operator

import numpy as np
import pytest

from collapsed_gibbs import ChainState, collect_global_stats, gibbs_sweep, sample_prior_globals
from models import Dataset
from parallel import ParallelSampler, parallel_sweep, shard_dataset


def test_shard_boundaries():
    data = Dataset([1, 1, 1], [10., 25., 100.], 1, 100.)
    shards = shard_dataset(data, 4)
    assert [s.start for s in shards] == [0., 25., 50., 75.]
    assert [s.end for s in shards] == [25., 50., 75., 100.]
    assert shards[0].spike_ids.tolist() == [0]
    assert shards[1].spike_ids.tolist() == [1]
    assert shards[3].spike_ids.tolist() == [2]
    assert all(s.length == 25. for s in shards)


def test_single_shard_is_the_dataset(tiny_data):
    shards = shard_dataset(tiny_data, 1)
    assert len(shards) == 1
    assert shards[0].start == 0. and shards[0].end == tiny_data.duration
    np.testing.assert_array_equal(shards[0].spike_ids, np.arange(len(tiny_data)))


def test_shard_count_must_be_positive(tiny_data):
    with pytest.raises(ValueError):
        shard_dataset(tiny_data, 0)


def test_single_shard_matches_serial_sweep(tiny_data, tiny_hyper, tiny_grid):
    params = sample_prior_globals(tiny_hyper, np.random.default_rng(1))
    serial_rng, sharded_rng = np.random.default_rng(9), np.random.default_rng(9)
    state = ChainState.from_dataset(tiny_data, params.copy(), tiny_grid)
    sampler = ParallelSampler(tiny_data, params.copy(), tiny_grid, sharded_rng, n_threads=1)
    for _ in range(3):
        gibbs_sweep(tiny_data, state, tiny_hyper, tiny_grid, serial_rng)
        sampler.sweep(tiny_hyper)
    sharded = sampler.states[0]
    np.testing.assert_array_equal(sharded.assignments, state.assignments)
    assert sharded.event_list() == state.event_list()
    for name in ['bg_rates', 'type_probs', 'neuron_weights', 'delays', 'widths']:
        np.testing.assert_array_equal(getattr(sampler.params, name), getattr(state.params, name))


def test_empty_shard_only_adds_exposure(tiny_hyper, tiny_grid, rng):
    data = Dataset([1, 2, 3, 1], [1., 2.5, 2.6, 7.], tiny_hyper.n_neurons, tiny_hyper.duration)
    params = sample_prior_globals(tiny_hyper, rng)
    shards = shard_dataset(data, 2)
    states = [ChainState(data.neurons[s.spike_ids], data.times[s.spike_ids], params, tiny_grid, data.duration,
                         spike_ids=s.spike_ids, exposure=s.length) for s in shards]
    assert states[1].n_spikes == 0
    states, _, total, new_params = parallel_sweep(states, shards, tiny_hyper, rng.spawn(2), rng)
    assert total.exposure == pytest.approx(data.duration)
    assert total.bg_counts.sum() == states[0].n_background
    assert all(state.params is new_params for state in states)


def test_sharded_statistics_are_conserved(tiny_data, tiny_hyper, tiny_grid, rng):
    sampler = ParallelSampler(tiny_data, sample_prior_globals(tiny_hyper, rng), tiny_grid, rng, n_threads=2)
    sampler.sweep(tiny_hyper)
    events, assignments, params = sampler.gather()
    whole = ChainState.from_dataset(tiny_data, params, tiny_grid, assignments=assignments)
    whole.events = {k: event for k, event in enumerate(events, start=1)}
    combined = functools.reduce(operator.add, [collect_global_stats(state) for state in sampler.states])
    expected = collect_global_stats(whole)
    assert combined.exposure == pytest.approx(tiny_data.duration)
    for name in ['bg_counts', 'type_counts', 'neuron_type_counts', 'offset_sum', 'offset_sq_sum']:
        np.testing.assert_allclose(getattr(combined, name), getattr(expected, name), atol=1e-9)


def test_gather_relabels_clusters_and_marks_untrained(tiny_data, tiny_hyper, tiny_grid, rng):
    selector = np.ones(len(tiny_data), dtype=bool)
    selector[::4] = False
    sampler = ParallelSampler(tiny_data, sample_prior_globals(tiny_hyper, rng), tiny_grid, rng, n_threads=1,
                              selector=selector)
    sampler.sweep(tiny_hyper)
    events, assignments, _ = sampler.gather()
    assert np.all(assignments[~selector] == -1)
    assert np.all(assignments[selector] >= 0)
    used = np.unique(assignments[assignments > 0])
    np.testing.assert_array_equal(used, np.arange(1, len(events) + 1))


def test_checkpoint_round_trip_continues_identically(tiny_data, tiny_hyper, tiny_grid):
    params = sample_prior_globals(tiny_hyper, np.random.default_rng(2))
    reference = ParallelSampler(tiny_data, params.copy(), tiny_grid, np.random.default_rng(4))
    interrupted = ParallelSampler(tiny_data, params.copy(), tiny_grid, np.random.default_rng(4))
    reference.sweep(tiny_hyper)
    interrupted.sweep(tiny_hyper)
    payload = interrupted.to_dict()
    resumed = ParallelSampler(tiny_data, params.copy(), tiny_grid, np.random.default_rng(123)).load_dict(payload)
    reference.sweep(tiny_hyper)
    resumed.sweep(tiny_hyper)
    np.testing.assert_array_equal(resumed.gather()[1], reference.gather()[1])
    np.testing.assert_array_equal(resumed.params.delays, reference.params.delays)


def test_split_merge_on_shards(tiny_data, tiny_hyper, tiny_grid, rng):
    sampler = ParallelSampler(tiny_data, sample_prior_globals(tiny_hyper, rng), tiny_grid, rng, n_threads=1)
    sampler.sweep(tiny_hyper)
    assert sampler.split_merge(tiny_hyper, 0) == 0
    accepted = sampler.split_merge(tiny_hyper, 20)
    assert 0 <= accepted <= 20
    state = sampler.states[0]
    assert sorted(state.events) == state.cluster_ids.tolist()

#!/usr/bin/env python
# coding: utf-8
import functools
import logging
import operator
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

import config
from collapsed_gibbs import (ChainState, collect_global_stats, resample_assignments,
                             resample_latent_events, sample_globals_from_stats)
from split_merge import split_merge_moves

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Shard:
    """Half-open time interval [start, end) owned by one worker and the dataset indices of its spikes."""
    index: int
    start: float
    end: float
    spike_ids: np.ndarray

    @property
    def length(self):
        return self.end - self.start


def shard_dataset(data, n_shards):
    """
    Splits [0, T) into contiguous intervals of length T / P. A spike at exactly T joins the last shard.
    :param data: Dataset
    :param n_shards: number of shards P
    :return: list of Shard
    """
    if n_shards < 1:
        raise ValueError('The number of shards must be at least 1, got {}'.format(n_shards))
    bounds = data.duration * np.arange(n_shards + 1) / n_shards
    owner = np.clip(np.searchsorted(bounds, data.times, side='right') - 1, 0, n_shards - 1)
    return [Shard(j, float(bounds[j]), float(bounds[j + 1]), np.flatnonzero(owner == j)) for j in range(n_shards)]


def _run_on_shard(function, state, shard, rng, args):
    result = function(state, shard, rng, *args)
    return state, rng, result


def _local_sweep(state, shard, rng, hyper, order):
    resample_assignments(state, hyper, rng, order=order)
    resample_latent_events(state, hyper, rng)
    return collect_global_stats(state)


def _local_split_merge(state, shard, rng, hyper, n_moves):
    _, accepted = split_merge_moves(state, None, hyper, state.grid, rng, n_moves)
    return accepted


def map_shards(function, states, shards, rngs, args=(), parallel=None):
    """
    Applies `function(state, shard, rng, *args)` to every shard. States and generators come back updated.
    :param parallel: joblib Parallel instance; None runs the shards in this process
    :return: states, rngs and per-shard results
    """
    if parallel is None or len(states) == 1:
        results = [_run_on_shard(function, *item, args) for item in zip(states, shards, rngs)]
    else:
        results = parallel(delayed(_run_on_shard)(function, *item, args) for item in zip(states, shards, rngs))
    states, rngs, outputs = zip(*results)
    return list(states), list(rngs), list(outputs)


def parallel_sweep(states, shards, hyper, rngs, master_rng, order=config.SWEEP_ORDER, parallel=None):
    """
    Local assignment and latent-event updates on every shard, then one global-parameter draw from the
    summed sufficient statistics, broadcast back to the shards
    :param states: per-shard ChainState, all holding the same GlobalParams
    :param rngs: per-shard generators
    :param master_rng: generator of the coordinator, used for the global draw
    :return: updated states, shard generators, gathered GlobalStats and the new GlobalParams
    """
    states, rngs, stats = map_shards(_local_sweep, states, shards, rngs, (hyper, order), parallel)
    total = functools.reduce(operator.add, stats)
    params = sample_globals_from_stats(total, hyper, master_rng)
    for state in states:
        state.set_params(params)
    return states, rngs, total, params


class ParallelSampler:
    """
    Owns the shard states of one chain. With a single shard the master generator drives the shard directly,
    so results match the serial sampler draw for draw.
    """

    def __init__(self, data, params, grid, rng, n_threads=config.N_THREADS, selector=None):
        self.grid = grid
        self.n_spikes = len(data)
        self.rng = rng
        self.shards = shard_dataset(data, n_threads)
        keep = np.ones(len(data), dtype=bool) if selector is None else np.asarray(selector, dtype=bool)
        for shard in self.shards:
            shard.spike_ids = shard.spike_ids[keep[shard.spike_ids]]
        self.states = [ChainState(data.neurons[s.spike_ids], data.times[s.spike_ids], params, grid, data.duration,
                                  spike_ids=s.spike_ids, exposure=s.length) for s in self.shards]
        self.rngs = [rng] if n_threads == 1 else list(rng.spawn(n_threads))
        self._parallel = Parallel(n_jobs=n_threads, prefer='threads') if n_threads > 1 else None

    @property
    def n_threads(self):
        return len(self.shards)

    @property
    def params(self):
        return self.states[0].params

    def map(self, function, *args):
        self.states, rngs, outputs = map_shards(function, self.states, self.shards, self.rngs, args, self._parallel)
        if self.n_threads > 1:
            self.rngs = rngs
        else:
            self.rng = self.rngs[0] = rngs[0]
        return outputs

    def sweep(self, hyper, order=config.SWEEP_ORDER):
        self.states, rngs, _, params = parallel_sweep(self.states, self.shards, hyper, self.rngs, self.rng, order,
                                                      self._parallel)
        if self.n_threads > 1:
            self.rngs = rngs
        return params

    def split_merge(self, hyper, n_moves):
        if n_moves <= 0:
            return 0
        return int(sum(self.map(_local_split_merge, hyper, n_moves)))

    def gather(self):
        """
        Current chain state in dataset coordinates: cluster ids relabeled 1..K across shards
        :return: events list, per-spike assignments (-1 for spikes the chain does not train on), GlobalParams
        """
        assignments = np.full(self.n_spikes, -1, dtype=np.int64)
        events = []
        for state in self.states:
            live = state.cluster_ids
            lookup = np.zeros(int(live.max()) + 1 if len(live) else 1, dtype=np.int64)
            lookup[live] = len(events) + np.arange(1, len(live) + 1)
            observed = slice(0, state.n_observed)
            assignments[state.spike_ids[observed]] = lookup[state.assignments[observed]]
            events.extend(state.events[int(k)] for k in live)
        return events, assignments, self.params

    def to_dict(self):
        return {'shards': [[s.start, s.end, s.spike_ids.tolist()] for s in self.shards],
                'states': [state.to_dict() for state in self.states],
                'rng': self.rng.bit_generator.state,
                'shard_rngs': [r.bit_generator.state for r in self.rngs] if self.n_threads > 1 else None}

    def load_dict(self, payload):
        """Restores shard states and generator positions saved by to_dict."""
        if len(payload['shards']) != self.n_threads:
            raise ValueError('Checkpoint has {} shards, sampler has {}'.format(len(payload['shards']),
                                                                             self.n_threads))
        for shard, (start, end, ids) in zip(self.shards, payload['shards']):
            shard.start, shard.end, shard.spike_ids = start, end, np.asarray(ids, dtype=np.int64)
        self.states = [ChainState.from_dict(item, self.grid) for item in payload['states']]
        self.rng.bit_generator.state = payload['rng']
        if self.n_threads > 1:
            for r, state in zip(self.rngs, payload['shard_rngs']):
                r.bit_generator.state = state
        return self

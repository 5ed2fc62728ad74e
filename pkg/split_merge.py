#!/usr/bin/env python
# coding: utf-8
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from collapsed_gibbs import ClusterStats, log_V, log_marginal_cluster, resample_latent_event

logger = logging.getLogger(__name__)

LOG_HALF = np.log(0.5)


@dataclass(eq=False)
class CandidatePairs:
    """
    Pairs of clustered spikes closer than the window, in a form that samples them uniformly.
    `order` indexes the clustered spikes by time; `counts[i]` is the number of later partners of order[i].
    """
    order: np.ndarray
    counts: np.ndarray

    @property
    def n_pairs(self):
        return int(self.counts.sum())


def qualifying_pairs(state, window):
    """
    :param state: ChainState
    :param window: maximum separation W (sec), exclusive
    :return: CandidatePairs over the non-background spikes
    """
    clustered = np.flatnonzero(state.assignments > 0)
    order = clustered[np.argsort(state.times[clustered], kind='stable')]
    times = state.times[order]
    upper = np.searchsorted(times, times + window, side='left')
    counts = upper - np.arange(len(times)) - 1
    return CandidatePairs(order=order, counts=np.maximum(counts, 0))


def sample_pair(pairs, rng):
    """Uniform draw among all qualifying pairs; None when there are none."""
    total = pairs.n_pairs
    if total == 0:
        return None
    draw = rng.integers(total)
    first = int(np.searchsorted(np.cumsum(pairs.counts), draw, side='right'))
    second = first + 1 + int(rng.integers(pairs.counts[first]))
    return int(pairs.order[first]), int(pairs.order[second])


def _marginal(state, members, hyper):
    stats = ClusterStats.from_terms(*state.terms_of(members))
    return log_marginal_cluster(stats, state.params, hyper, state.grid)


def _size_term(size, hyper):
    return gammaln(size + hyper.alpha) - gammaln(hyper.alpha)


def log_merge_ratio(state, first_members, second_members, hyper, n_clusters=None):
    """
    Log Metropolis-Hastings ratio of merging two clusters given their member indices
    :param n_clusters: number of live clusters before the merge, defaults to the state's current count
    """
    K = state.n_clusters if n_clusters is None else n_clusters
    n_a, n_b = len(first_members), len(second_members)
    merged = np.concatenate([first_members, second_members])
    return (log_V(K - 1, hyper) - log_V(K, hyper)
            + _size_term(n_a + n_b, hyper) - _size_term(n_a, hyper) - _size_term(n_b, hyper)
            + _marginal(state, merged, hyper) - _marginal(state, first_members, hyper)
            - _marginal(state, second_members, hyper)
            + (n_a + n_b - 2) * LOG_HALF)


def log_split_ratio(state, first_members, second_members, hyper):
    """Log ratio of splitting one live cluster into the two given member sets; the reverse of a merge."""
    return -log_merge_ratio(state, first_members, second_members, hyper, n_clusters=state.n_clusters + 1)


def split_merge_move(state, data, hyper, grid, rng, pairs=None):
    """
    One randomized split-merge Metropolis-Hastings proposal
    :param state: ChainState, updated in place
    :param data: Dataset, unused beyond signature symmetry with gibbs_sweep
    :param pairs: precomputed CandidatePairs; the clustered set does not change under these moves
    :return: the state and whether the proposal was accepted
    """
    if pairs is None:
        pairs = qualifying_pairs(state, hyper.window)
    pair = sample_pair(pairs, rng)
    if pair is None:
        return state, False
    i, j = pair
    k_i, k_j = int(state.assignments[i]), int(state.assignments[j])

    if k_i != k_j:
        first, second = state.members(k_i), state.members(k_j)
        log_ratio = log_merge_ratio(state, first, second, hyper)
        if np.log(rng.random()) >= log_ratio:
            return state, False
        state.set_cluster(k_i, np.concatenate([first, second]))
        state.delete_cluster(k_j)
        state.events[k_i] = resample_latent_event(state.cluster_stats(k_i), state.params, hyper, grid, rng)
        return state, True

    members = state.members(k_i)
    others = members[(members != i) & (members != j)]
    to_first = rng.random(len(others)) < 0.5
    first = np.concatenate([[i], others[to_first]]).astype(np.int64)
    second = np.concatenate([[j], others[~to_first]]).astype(np.int64)
    log_ratio = log_split_ratio(state, first, second, hyper)
    if np.log(rng.random()) >= log_ratio:
        return state, False
    k_new = state.new_cluster()
    state.set_cluster(k_new, second)
    state.set_cluster(k_i, first)
    for k in (k_i, k_new):
        state.events[k] = resample_latent_event(state.cluster_stats(k), state.params, hyper, grid, rng)
    return state, True


def split_merge_moves(state, data, hyper, grid, rng, n_moves):
    """Runs `n_moves` split-merge proposals and returns the state and the number accepted."""
    pairs = qualifying_pairs(state, hyper.window)
    if pairs.n_pairs == 0:
        return state, 0
    accepted = 0
    for _ in range(n_moves):
        state, flag = split_merge_move(state, data, hyper, grid, rng, pairs=pairs)
        accepted += flag
    logger.debug('Split-merge accepted {} of {} proposals'.format(accepted, n_moves))
    return state, accepted

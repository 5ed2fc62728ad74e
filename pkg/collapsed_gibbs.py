#!/usr/bin/env python
# coding: utf-8
import copy
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.special import gammaln
from scipy.stats import truncnorm

import config
from exceptions import DegenerateInputError
from models import GlobalParams, LatentEvent, LOG_2PI

logger = logging.getLogger(__name__)

UNASSIGNED = -1
V_TOLERANCE = 1e-16
V_MAX_TERMS = 1000000
SQRT_2 = math.sqrt(2.)
TAIL_CUTOFF = -37.  # below this log_ndtr switches to the asymptotic series

# Status codes returned by the sweep kernel
SWEEP_DONE, SWEEP_FULL, SWEEP_DEGENERATE = 0, 1, 2


def sample_log_categorical(log_weights, rng):
    """
    Draws an index from unnormalized log weights. Entries equal to -inf are never drawn.
    :param log_weights: 1-d array of unnormalized log probabilities
    :param rng: numpy Generator
    :return: sampled index
    """
    log_weights = np.asarray(log_weights, dtype=float).reshape(-1)
    top = np.max(log_weights)
    if not np.isfinite(top):
        raise DegenerateInputError('Every categorical outcome has zero probability')
    cumulative = np.cumsum(np.exp(log_weights - top))
    return int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side='right'))


def spike_terms(neurons, times, params, grid):
    """
    Per-spike contributions to the cluster accumulators for every (type, warp) hypothesis
    :param neurons: (S,) 1-based neuron ids
    :param times: (S,) spike times
    :return: log weights (S, R), zero-weight flags (S, R), J (S, R, F), h (S, R, F)
    """
    n0 = np.asarray(neurons, dtype=np.int64) - 1
    times = np.asarray(times, dtype=float)
    warps = grid.values[None, None, :]
    J = 1. / (warps ** 2 * params.widths[n0][:, :, None])
    h = (times[:, None, None] - warps * params.delays[n0][:, :, None]) * J
    weights = params.neuron_weights[:, n0].T
    zero = weights <= 0
    log_weights = np.log(np.where(zero, 1., weights))
    return log_weights, zero, J, h


def log_type_warp_prior(params, grid):
    """log pi_r + log eta_f as an (R, F) table."""
    with np.errstate(divide='ignore'):
        return np.log(params.type_probs)[:, None] + grid.log_probs[None, :]


def pruning_radius(params, grid, n_sigmas=config.PRUNE_SIGMAS):
    """
    Distance from a cluster's centre beyond which a spike is not scored against it.
    Covers the largest warped delay plus `n_sigmas` of the widest warped response; inf disables pruning.
    """
    if n_sigmas is None:
        return np.inf
    stretch = float(grid.values.max())
    return stretch * (3. * float(np.abs(params.delays).max()) + n_sigmas * float(np.sqrt(params.widths.max())))


@njit(nogil=True, cache=True)
def _log_ndtr(x):
    if x > 0.:
        return math.log1p(-0.5 * math.erfc(x / SQRT_2))
    if x > TAIL_CUTOFF:
        return math.log(0.5 * math.erfc(-x / SQRT_2))
    z = 1. / (x * x)
    series = 1. - z * (1. - 3. * z * (1. - 5. * z * (1. - 7. * z)))
    return -0.5 * x * x - math.log(-x) - 0.5 * LOG_2PI + math.log(series)


@njit(nogil=True, cache=True)
def _log_window_mass(J, h, duration):
    """log P(0 <= tau <= T) for tau ~ N(h / J, 1 / J)."""
    root = math.sqrt(J)
    mean = h / J
    lower = -mean * root
    upper = (duration - mean) * root
    if lower > 0.:
        lower, upper = -upper, -lower
    log_upper = _log_ndtr(upper)
    log_lower = _log_ndtr(lower)
    if log_lower >= log_upper:
        return -np.inf
    return log_upper + math.log1p(-math.exp(log_lower - log_upper))


@njit(nogil=True, cache=True)
def _hypothesis_term(size, sum_log_a, J, h, log_J, h2_over_J, log_prior, duration):
    """Log evidence of one (type, warp) hypothesis with tau integrated over [0, T], without the 1/T factor."""
    if log_prior == -np.inf:
        return -np.inf
    log_normalizer = 0.5 * LOG_2PI - 0.5 * math.log(J) + 0.5 * h * h / J
    per_spike = 0.5 * LOG_2PI * size - 0.5 * log_J + 0.5 * h2_over_J
    return log_prior + sum_log_a + log_normalizer + _log_window_mass(J, h, duration) - per_spike


@njit(nogil=True, cache=True)
def _evidence_table(size, n_zero, sum_log_a, J, h, log_J, h2_over_J, log_prior, duration):
    R, F = log_prior.shape
    table = np.full((R, F), -np.inf)
    for r in range(R):
        if n_zero[r] > 0:
            continue
        for f in range(F):
            table[r, f] = _hypothesis_term(size, sum_log_a[r], J[r, f], h[r, f], log_J[r, f], h2_over_J[r, f],
                                           log_prior[r, f], duration)
    return table


@njit(nogil=True, cache=True)
def _log_sum_exp(values):
    top = -np.inf
    for x in values.flat:
        if x > top:
            top = x
    if top == -np.inf:
        return -np.inf
    total = 0.
    for x in values.flat:
        total += math.exp(x - top)
    return top + math.log(total)


@njit(nogil=True, cache=True)
def _log_evidence(size, n_zero, sum_log_a, J, h, log_J, h2_over_J, log_prior, duration):
    return _log_sum_exp(_evidence_table(size, n_zero, sum_log_a, J, h, log_J, h2_over_J, log_prior, duration))


@njit(nogil=True, cache=True)
def _slots_log_evidence(slots, sizes, n_zero, sum_log_a, J, h, log_J, h2_over_J, log_prior, duration):
    out = np.full(len(slots), -np.inf)
    for i in range(len(slots)):
        k = slots[i]
        out[i] = _log_evidence(sizes[k], n_zero[k], sum_log_a[k], J[k], h[k], log_J[k], h2_over_J[k], log_prior,
                               duration)
    return out


@njit(nogil=True, cache=True)
def _spikes_log_evidence(log_a, zero, spike_J, spike_h, spike_log_J, spike_h2J, log_prior, duration):
    """Evidence of every spike as a cluster of its own."""
    out = np.full(len(log_a), -np.inf)
    for s in range(len(log_a)):
        out[s] = _log_evidence(1, zero[s].astype(np.int64), log_a[s], spike_J[s], spike_h[s], spike_log_J[s],
                               spike_h2J[s], log_prior, duration)
    return out


@njit(nogil=True, cache=True)
def _score_spike(s, times, log_a, zero, spike_J, spike_h, spike_log_J, spike_h2J, sizes, n_zero, sum_log_a, J, h,
                 log_J, h2_over_J, live, log_ev, n_slots, log_prior, duration, alpha, radius, cand_slots,
                 cand_weights, cand_evidence):
    """
    Fills the candidate buffers with every live cluster whose centre lies within `radius` of spike s: its slot,
    log(alpha + S_k) + log p(X_k + x) - log p(X_k), and the evidence with the spike added.
    :return: number of candidates
    """
    R, F = log_prior.shape
    t = times[s]
    count = 0
    for k in range(n_slots):
        if not live[k] or abs(t - h[k, 0, 0] / J[k, 0, 0]) >= radius:
            continue
        size = sizes[k] + 1
        top, total = -np.inf, 0.
        for r in range(R):
            if n_zero[k, r] > 0 or zero[s, r]:
                continue
            weight = sum_log_a[k, r] + log_a[s, r]
            for f in range(F):
                x = _hypothesis_term(size, weight, J[k, r, f] + spike_J[s, r, f], h[k, r, f] + spike_h[s, r, f],
                                     log_J[k, r, f] + spike_log_J[s, r, f],
                                     h2_over_J[k, r, f] + spike_h2J[s, r, f], log_prior[r, f], duration)
                if x == -np.inf:
                    continue
                if x > top:
                    total = total * math.exp(top - x) + 1.
                    top = x
                else:
                    total += math.exp(x - top)
        evidence = top + math.log(total) if total > 0. else -np.inf
        cand_slots[count] = k
        cand_evidence[count] = evidence
        cand_weights[count] = -np.inf if evidence == -np.inf else math.log(alpha + sizes[k]) + evidence - log_ev[k]
        count += 1
    return count


@njit(nogil=True, cache=True)
def _move_spike(s, k, sign, log_a, zero, spike_J, spike_h, spike_log_J, spike_h2J, sizes, n_zero, sum_log_a, J, h,
                log_J, h2_over_J):
    sizes[k] += sign
    for r in range(log_a.shape[1]):
        n_zero[k, r] += sign * zero[s, r]
        sum_log_a[k, r] += sign * log_a[s, r]
        for f in range(spike_J.shape[2]):
            J[k, r, f] += sign * spike_J[s, r, f]
            h[k, r, f] += sign * spike_h[s, r, f]
            log_J[k, r, f] += sign * spike_log_J[s, r, f]
            h2_over_J[k, r, f] += sign * spike_h2J[s, r, f]


@njit(nogil=True, cache=True)
def _clear(k, sizes, n_zero, sum_log_a, J, h, log_J, h2_over_J, live, log_ev):
    sizes[k] = 0
    n_zero[k] = 0
    sum_log_a[k] = 0.
    J[k] = 0.
    h[k] = 0.
    log_J[k] = 0.
    h2_over_J[k] = 0.
    live[k] = False
    log_ev[k] = -np.inf


@njit(nogil=True, cache=True)
def _sweep_kernel(visit, start, uniforms, times, assignments, log_a, zero, spike_J, spike_h, spike_log_J, spike_h2J,
                  singletons, log_background, log_new_offset, sizes, n_zero, sum_log_a, J, h, log_J, h2_over_J, live,
                  log_ev, n_slots, log_prior, duration, alpha, radius):
    """
    Collapsed Gibbs reassignment of the spikes visit[start:], one pre-drawn uniform per visit position.
    Returns early with SWEEP_FULL when every slot is taken, so the caller can grow the arrays and resume.
    :return: next position, number of slots in use, status
    """
    capacity = len(sizes)
    cand_slots = np.empty(capacity, dtype=np.int64)
    cand_weights = np.empty(capacity)
    cand_evidence = np.empty(capacity)
    for position in range(start, len(visit)):
        if n_slots == capacity:
            return position, n_slots, SWEEP_FULL
        s = visit[position]
        k = assignments[s] - 1
        assignments[s] = UNASSIGNED
        if k >= 0:
            if sizes[k] == 1:
                _clear(k, sizes, n_zero, sum_log_a, J, h, log_J, h2_over_J, live, log_ev)
            else:
                _move_spike(s, k, -1, log_a, zero, spike_J, spike_h, spike_log_J, spike_h2J, sizes, n_zero,
                            sum_log_a, J, h, log_J, h2_over_J)
                log_ev[k] = _log_evidence(sizes[k], n_zero[k], sum_log_a[k], J[k], h[k], log_J[k], h2_over_J[k],
                                          log_prior, duration)

        count = _score_spike(s, times, log_a, zero, spike_J, spike_h, spike_log_J, spike_h2J, sizes, n_zero,
                             sum_log_a, J, h, log_J, h2_over_J, live, log_ev, n_slots, log_prior, duration, alpha,
                             radius, cand_slots, cand_weights, cand_evidence)
        background = log_background[s]
        new = log_new_offset + singletons[s]
        top = max(background, new)
        for i in range(count):
            top = max(top, cand_weights[i])
        if top == -np.inf:
            return position, n_slots, SWEEP_DEGENERATE
        total = math.exp(background - top)
        for i in range(count):
            total += math.exp(cand_weights[i] - top)
        total += math.exp(new - top)

        target = uniforms[position] * total
        cumulative = math.exp(background - top)
        choice = -2 if cumulative > target else -1
        for i in range(count if choice == -1 else 0):
            cumulative += math.exp(cand_weights[i] - top)
            if cumulative > target:
                choice = i
                break
        if choice == -1 and new == -np.inf:
            # rounding at the top of the range, fall back on the last outcome with positive weight
            choice = -2
            for i in range(count):
                if cand_weights[i] > -np.inf:
                    choice = i
        if choice == -2:
            assignments[s] = 0
            continue
        if choice >= 0:
            k = cand_slots[choice]
            evidence = cand_evidence[choice]
        else:
            k = n_slots
            for free in range(n_slots):
                if not live[free]:
                    k = free
                    break
            if k == n_slots:
                n_slots += 1
            live[k] = True
            evidence = singletons[s]
        _move_spike(s, k, 1, log_a, zero, spike_J, spike_h, spike_log_J, spike_h2J, sizes, n_zero, sum_log_a, J,
                    h, log_J, h2_over_J)
        log_ev[k] = evidence
        assignments[s] = k + 1
    return len(visit), n_slots, SWEEP_DONE


@dataclass(eq=False)
class ClusterStats:
    """
    Sufficient statistics of one cluster, kept for every (type, warp) hypothesis.
    Spikes whose neuron has zero weight under a type are counted in `n_zero_weights` instead of adding -inf.
    """
    size: int
    n_zero_weights: np.ndarray
    sum_log_weights: np.ndarray
    sum_J: np.ndarray
    sum_h: np.ndarray
    sum_log_J: np.ndarray
    sum_h2_over_J: np.ndarray

    @classmethod
    def empty(cls, n_types, n_warps):
        shape = (n_types, n_warps)
        return cls(0, np.zeros(n_types, dtype=np.int64), np.zeros(n_types), np.zeros(shape), np.zeros(shape),
                   np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_terms(cls, log_weights, zero, J, h):
        """Builds the statistics of a set of spikes from their spike_terms rows."""
        return cls(len(J), zero.sum(axis=0).astype(np.int64), log_weights.sum(axis=0), J.sum(axis=0),
                   h.sum(axis=0), np.log(J).sum(axis=0), (h * h / J).sum(axis=0))

    def add(self, log_weights, zero, J, h, sign=1):
        self.size += sign
        self.n_zero_weights = self.n_zero_weights + sign * zero.astype(np.int64)
        self.sum_log_weights = self.sum_log_weights + sign * log_weights
        self.sum_J = self.sum_J + sign * J
        self.sum_h = self.sum_h + sign * h
        self.sum_log_J = self.sum_log_J + sign * np.log(J)
        self.sum_h2_over_J = self.sum_h2_over_J + sign * h * h / J
        return self

    def remove(self, log_weights, zero, J, h):
        return self.add(log_weights, zero, J, h, sign=-1)

    def merged(self, other):
        return ClusterStats(self.size + other.size, self.n_zero_weights + other.n_zero_weights,
                            self.sum_log_weights + other.sum_log_weights, self.sum_J + other.sum_J,
                            self.sum_h + other.sum_h, self.sum_log_J + other.sum_log_J,
                            self.sum_h2_over_J + other.sum_h2_over_J)

    def accumulators(self):
        return (self.size, self.n_zero_weights, self.sum_log_weights, self.sum_J, self.sum_h, self.sum_log_J,
                self.sum_h2_over_J)




class ChainState:
    """
    Partition, cluster statistics, latent events and global parameters of one chain.

    Cluster statistics live in slot arrays shared with the compiled sweep kernel; cluster id k occupies
    slot k - 1. Spikes past `n_observed` are imputed and get redrawn every sweep.
    """

    def __init__(self, neurons, times, params, grid, duration, assignments=None, spike_ids=None, events=None,
                 exposure=None, n_observed=None):
        self.neurons = np.array(neurons, dtype=np.int64).reshape(-1)
        self.times = np.array(times, dtype=float).reshape(-1)
        n = len(self.times)
        self.assignments = np.zeros(n, dtype=np.int64) if assignments is None else \
            np.array(assignments, dtype=np.int64)
        self.spike_ids = np.arange(n) if spike_ids is None else np.array(spike_ids, dtype=np.int64)
        self.n_observed = n if n_observed is None else int(n_observed)
        self.duration = float(duration)
        self.exposure = self.duration if exposure is None else float(exposure)
        self.grid = grid
        self.events = dict(events or {})
        self.params = None
        self.set_params(params)

    @classmethod
    def from_dataset(cls, data, params, grid, selector=None, assignments=None):
        """
        :param data: Dataset
        :param selector: optional boolean mask or index array of the spikes the chain trains on
        """
        spike_ids = np.arange(len(data)) if selector is None else np.arange(len(data))[selector]
        return cls(data.neurons[spike_ids], data.times[spike_ids], params, grid, data.duration,
                   assignments=assignments, spike_ids=spike_ids)

    @property
    def n_spikes(self):
        return len(self.times)

    @property
    def n_types(self):
        return self.params.n_types

    @property
    def cluster_ids(self):
        return np.flatnonzero(self._live[:self._n_slots]) + 1

    @property
    def n_clusters(self):
        return int(self._live[:self._n_slots].sum())

    @property
    def n_background(self):
        return int((self.assignments == 0).sum())

    def cluster_sizes(self):
        return self._sizes[self.cluster_ids - 1].copy()

    def members(self, k):
        return np.flatnonzero(self.assignments == k)

    def cluster_stats(self, k):
        slot = k - 1
        return ClusterStats(int(self._sizes[slot]), self._n_zero[slot].copy(), self._sum_log_a[slot].copy(),
                            self._J[slot].copy(), self._h[slot].copy(), self._log_J[slot].copy(),
                            self._h2J[slot].copy())

    def terms_of(self, index):
        return self._log_a[index], self._zero[index], self._spike_J[index], self._spike_h[index]

    def _spike_arrays(self):
        return (self._log_a, self._zero, self._spike_J, self._spike_h, self._spike_log_J, self._spike_h2J)

    def _slot_arrays(self):
        return (self._sizes, self._n_zero, self._sum_log_a, self._J, self._h, self._log_J, self._h2J)

    def set_params(self, params):
        """Installs new global parameters; every spike term and cluster accumulator is recomputed."""
        self.params = params
        self.log_prior = log_type_warp_prior(params, self.grid)
        self.radius = pruning_radius(params, self.grid)
        self._set_spike_terms()
        self.rebuild()

    def _set_spike_terms(self):
        self._log_a, self._zero, self._spike_J, self._spike_h = spike_terms(self.neurons, self.times, self.params,
                                                                            self.grid)
        self._spike_log_J = np.log(self._spike_J)
        self._spike_h2J = self._spike_h ** 2 / self._spike_J
        self._singletons = _spikes_log_evidence(*self._spike_arrays(), self.log_prior, self.duration)

    def _allocate(self, capacity):
        R, F = self.params.n_types, self.grid.size
        self._sizes = np.zeros(capacity, dtype=np.int64)
        self._n_zero = np.zeros((capacity, R), dtype=np.int64)
        self._sum_log_a = np.zeros((capacity, R))
        self._J = np.zeros((capacity, R, F))
        self._h = np.zeros((capacity, R, F))
        self._log_J = np.zeros((capacity, R, F))
        self._h2J = np.zeros((capacity, R, F))
        self._live = np.zeros(capacity, dtype=bool)
        self._log_ev = np.full(capacity, -np.inf)

    def _grow(self):
        capacity = len(self._sizes)
        for name in ['_sizes', '_n_zero', '_sum_log_a', '_J', '_h', '_log_J', '_h2J', '_live', '_log_ev']:
            old = getattr(self, name)
            fill = -np.inf if name == '_log_ev' else 0
            new = np.full((2 * capacity,) + old.shape[1:], fill, dtype=old.dtype)
            new[:capacity] = old
            setattr(self, name, new)

    def rebuild(self):
        """Recomputes every cluster accumulator from the assignments, discarding floating-point drift."""
        labels = self.assignments
        n_slots = int(labels.max()) if len(labels) else 0
        self._allocate(max(8, 2 * n_slots))
        self._n_slots = max(n_slots, 0)
        clustered = labels > 0
        slots = labels[clustered] - 1
        np.add.at(self._sizes, slots, 1)
        np.add.at(self._n_zero, slots, self._zero[clustered].astype(np.int64))
        np.add.at(self._sum_log_a, slots, self._log_a[clustered])
        np.add.at(self._J, slots, self._spike_J[clustered])
        np.add.at(self._h, slots, self._spike_h[clustered])
        np.add.at(self._log_J, slots, self._spike_log_J[clustered])
        np.add.at(self._h2J, slots, self._spike_h2J[clustered])
        self._live[:self._n_slots] = self._sizes[:self._n_slots] > 0
        live = np.flatnonzero(self._live)
        if len(live):
            self._log_ev[live] = self._slot_log_evidence(live)
        self._drop_orphan_events()

    def _drop_orphan_events(self):
        for k in [k for k in self.events if k > self._n_slots or not self._live[k - 1]]:
            del self.events[k]

    def _slot_log_evidence(self, slots):
        slots = np.atleast_1d(np.asarray(slots, dtype=np.int64))
        return _slots_log_evidence(slots, *self._slot_arrays(), self.log_prior, self.duration)

    def new_cluster(self):
        free = np.flatnonzero(~self._live[:self._n_slots])
        if len(free):
            slot = int(free[0])
        else:
            slot = self._n_slots
            if slot >= len(self._sizes):
                self._grow()
            self._n_slots += 1
        return slot + 1

    def add_spike(self, index, k, log_evidence=None):
        self.assignments[index] = k
        if k == 0:
            return
        slot = k - 1
        _move_spike(index, slot, 1, *self._spike_arrays(), *self._slot_arrays())
        self._live[slot] = True
        self._log_ev[slot] = self._slot_log_evidence(slot)[0] if log_evidence is None else log_evidence

    def remove_spike(self, index):
        k = self.assignments[index]
        self.assignments[index] = UNASSIGNED
        if k <= 0:
            return
        slot = k - 1
        if self._sizes[slot] == 1:
            self._clear_slot(slot)
            self.events.pop(int(k), None)
            return
        _move_spike(index, slot, -1, *self._spike_arrays(), *self._slot_arrays())
        self._log_ev[slot] = self._slot_log_evidence(slot)[0]

    def _clear_slot(self, slot):
        _clear(slot, *self._slot_arrays(), self._live, self._log_ev)

    def set_cluster(self, k, members):
        """Assigns `members` to cluster k, replacing whatever it held, and recomputes its statistics."""
        slot = k - 1
        while slot >= len(self._sizes):
            self._grow()
        self._n_slots = max(self._n_slots, k)
        self.assignments[members] = k
        stats = ClusterStats.from_terms(*self.terms_of(members))
        self._sizes[slot] = stats.size
        self._n_zero[slot] = stats.n_zero_weights
        self._sum_log_a[slot] = stats.sum_log_weights
        self._J[slot] = stats.sum_J
        self._h[slot] = stats.sum_h
        self._log_J[slot] = stats.sum_log_J
        self._h2J[slot] = stats.sum_h2_over_J
        self._live[slot] = True
        self._log_ev[slot] = self._slot_log_evidence(slot)[0]

    def delete_cluster(self, k):
        self._clear_slot(k - 1)
        self.events.pop(int(k), None)

    def sweep(self, visit, uniforms, hyper):
        """
        Runs the compiled reassignment kernel over the spikes in `visit`, growing the slot arrays as needed.
        Latent events of clusters that emptied are dropped.
        """
        log_background = self.log_background_weights(hyper)
        with np.errstate(divide='ignore'):
            log_new_offset = float(np.log(hyper.alpha) + hyper.alpha * (np.log(hyper.beta) - np.log1p(hyper.beta)) +
                                   np.log(hyper.psi))
        visit = np.asarray(visit, dtype=np.int64)
        position = 0
        while True:
            position, self._n_slots, status = _sweep_kernel(
                visit, position, uniforms, self.times, self.assignments, *self._spike_arrays(), self._singletons,
                log_background, log_new_offset, *self._slot_arrays(), self._live, self._log_ev, self._n_slots,
                self.log_prior, self.duration, float(hyper.alpha), float(self.radius))
            if status == SWEEP_DONE:
                break
            if status == SWEEP_DEGENERATE:
                index = int(visit[position])
                raise DegenerateInputError('Spike {} (neuron {}, t={:.4f}) has zero probability under every '
                                           'parent'.format(index, self.neurons[index], self.times[index]))
            self._grow()
        self._drop_orphan_events()
        return self

    def log_background_weights(self, hyper):
        """log(1 + beta) + log lambda_n per spike; spikes outside [0, T] cannot be background."""
        with np.errstate(divide='ignore'):
            weights = np.log1p(hyper.beta) + np.log(self.params.bg_rates[self.neurons - 1])
        return np.where((self.times >= 0) & (self.times <= self.duration), weights, -np.inf)

    @property
    def n_imputed(self):
        return self.n_spikes - self.n_observed

    def replace_imputed(self, neurons, times, labels):
        """
        Swaps the current imputed spikes for new ones with known parents (0 for background, else a live cluster
        id) in a single rebuild, so a cluster that only keeps imputed members also keeps its latent event.
        """
        keep = slice(0, self.n_observed)
        self.neurons = np.concatenate([self.neurons[keep], np.asarray(neurons, dtype=np.int64)])
        self.times = np.concatenate([self.times[keep], np.asarray(times, dtype=float)])
        self.assignments = np.concatenate([self.assignments[keep], np.asarray(labels, dtype=np.int64)])
        self.spike_ids = np.concatenate([self.spike_ids[keep], np.full(len(times), -1, dtype=np.int64)])
        self._set_spike_terms()
        self.rebuild()

    def event_list(self):
        return [self.events[k] for k in sorted(self.events)]

    def copy(self):
        return copy.deepcopy(self)

    def to_dict(self):
        p = self.params
        return {'neurons': self.neurons.tolist(),
                'times': self.times.tolist(),
                'assignments': self.assignments.tolist(),
                'spike_ids': self.spike_ids.tolist(),
                'n_observed': self.n_observed,
                'duration': self.duration,
                'exposure': self.exposure,
                'params': {'bg_rates': p.bg_rates.tolist(), 'type_probs': p.type_probs.tolist(),
                           'neuron_weights': p.neuron_weights.tolist(), 'delays': p.delays.tolist(),
                           'widths': p.widths.tolist()},
                'events': {str(k): [e.time, e.type, e.amplitude, e.warp] for k, e in sorted(self.events.items())}}

    @classmethod
    def from_dict(cls, payload, grid):
        params = GlobalParams(**payload['params'])
        events = {int(k): LatentEvent(float(v[0]), int(v[1]), float(v[2]), int(v[3]))
                  for k, v in payload['events'].items()}
        return cls(payload['neurons'], payload['times'], params, grid, payload['duration'],
                   assignments=payload['assignments'], spike_ids=payload['spike_ids'], events=events,
                   exposure=payload['exposure'], n_observed=payload['n_observed'])


def log_marginal_cluster(stats, params, hyper, grid):
    """
    Log evidence of a cluster's spikes with its sequence time, type and warp integrated out
    :param stats: ClusterStats with at least one spike
    :return: log p(X_k | Theta)
    """
    if stats.size < 1:
        raise ValueError('The marginal likelihood is defined for nonempty clusters only')
    log_prior = log_type_warp_prior(params, grid)
    return float(_log_evidence(*stats.accumulators(), log_prior, float(hyper.duration)) - np.log(hyper.duration))


def log_marginal_background(neurons, params, duration):
    """log p(X_0 | Theta) of the background spikes: uniform times, neurons in proportion to their rates."""
    neurons = np.asarray(neurons, dtype=np.int64)
    with np.errstate(divide='ignore'):
        log_rates = np.log(params.bg_rates[neurons - 1])
    return float(np.sum(log_rates - np.log(params.bg_rates.sum()) - np.log(duration)))


def assignment_log_weights(index, state, hyper):
    """
    Unnormalized log probabilities of the possible parents of an unassigned spike, every live cluster scored
    :param index: position of the spike in the chain state; it must already be removed from its cluster
    :param state: ChainState
    :param hyper: Hyperparams (possibly annealed)
    :return: live cluster ids and log weights ordered as [background, each live cluster, new cluster]
    """
    if state.assignments[index] != UNASSIGNED:
        raise ValueError('Spike {} must be removed from its cluster first'.format(index))
    capacity = len(state._sizes)
    slots, weights, evidence = np.empty(capacity, dtype=np.int64), np.empty(capacity), np.empty(capacity)
    count = _score_spike(index, state.times, *state._spike_arrays(), *state._slot_arrays(), state._live,
                         state._log_ev, state._n_slots, state.log_prior, state.duration, float(hyper.alpha), np.inf,
                         slots, weights, evidence)
    with np.errstate(divide='ignore'):
        new = np.log(hyper.alpha) + hyper.alpha * (np.log(hyper.beta) - np.log1p(hyper.beta)) + \
            np.log(hyper.psi) + state._singletons[index]
    background = state.log_background_weights(hyper)[index]
    return slots[:count] + 1, np.concatenate([[background], weights[:count], [new]])


def resample_assignments(state, hyper, rng, order=config.SWEEP_ORDER):
    """
    One collapsed Gibbs pass over every spike's parent assignment
    :param order: 'time' visits spikes by ascending time, 'reverse' by descending time, 'random' uses a fresh
        permutation
    """
    if order == 'time':
        visit = np.argsort(state.times, kind='stable')
    elif order == 'reverse':
        visit = np.argsort(state.times, kind='stable')[::-1].copy()
    elif order == 'random':
        visit = rng.permutation(state.n_spikes)
    else:
        raise ValueError('Unknown sweep order {}'.format(order))
    return state.sweep(visit, rng.random(len(visit)), hyper)


def resample_latent_event(stats, params, hyper, grid, rng):
    """
    Draws (type, warp), then time on [0, T], then amplitude of the latent event behind a cluster
    :param stats: ClusterStats with at least one spike
    :return: LatentEvent
    """
    if stats.size < 1:
        raise ValueError('Cannot resample the latent event of an empty cluster')
    terms = _evidence_table(*stats.accumulators(), log_type_warp_prior(params, grid), float(hyper.duration))
    flat = sample_log_categorical(terms.reshape(-1), rng)
    r, f = np.unravel_index(flat, terms.shape)
    scale = 1. / np.sqrt(stats.sum_J[r, f])
    mean = stats.sum_h[r, f] / stats.sum_J[r, f]
    tau = truncnorm.rvs(-mean / scale, (hyper.duration - mean) / scale, loc=mean, scale=scale, random_state=rng)
    amplitude = rng.gamma(hyper.alpha + stats.size, 1. / (hyper.beta + 1.))
    return LatentEvent(float(tau), int(r) + 1, float(amplitude), int(f) + 1)


def resample_latent_events(state, hyper, rng):
    for k in state.cluster_ids:
        state.events[int(k)] = resample_latent_event(state.cluster_stats(k), state.params, hyper, state.grid, rng)
    return state


@dataclass(eq=False)
class GlobalStats:
    """
    Everything the global-parameter conditionals need; sums across shards without loss.
    :param offset_count: (N, R) spikes per neuron and type, S_nr
    :param offset_sum: (N, R) sum of warped offsets (t - tau) / w
    :param offset_sq_sum: (N, R) sum of squared warped offsets
    """
    bg_counts: np.ndarray
    exposure: float
    type_counts: np.ndarray
    neuron_type_counts: np.ndarray
    offset_count: np.ndarray
    offset_sum: np.ndarray
    offset_sq_sum: np.ndarray

    @classmethod
    def empty(cls, n_neurons, n_types, exposure=0.):
        zeros = np.zeros((n_neurons, n_types))
        return cls(np.zeros(n_neurons), float(exposure), np.zeros(n_types), np.zeros((n_types, n_neurons)),
                   zeros, zeros.copy(), zeros.copy())

    def __add__(self, other):
        return GlobalStats(self.bg_counts + other.bg_counts, self.exposure + other.exposure,
                           self.type_counts + other.type_counts, self.neuron_type_counts + other.neuron_type_counts,
                           self.offset_count + other.offset_count, self.offset_sum + other.offset_sum,
                           self.offset_sq_sum + other.offset_sq_sum)


def collect_global_stats(state):
    """Sufficient statistics of the global-parameter conditionals for one chain (or shard) state."""
    N, R = state.params.n_neurons, state.params.n_types
    n0 = state.neurons - 1
    labels = state.assignments
    bg_counts = np.bincount(n0[labels == 0], minlength=N).astype(float)

    ids = state.cluster_ids
    missing = [int(k) for k in ids if int(k) not in state.events]
    if missing:
        raise ValueError('Clusters {} have no latent event; resample latent events first'.format(missing))
    size = int(labels.max()) + 1 if len(labels) else 1
    taus, types, warps = np.zeros(size), np.zeros(size, dtype=np.int64), np.zeros(size, dtype=np.int64)
    for k in ids:
        event = state.events[int(k)]
        taus[k], types[k], warps[k] = event.time, event.type - 1, event.warp - 1
    type_counts = np.bincount(types[ids], minlength=R).astype(float)

    clustered = labels > 0
    k = labels[clustered]
    n, r = n0[clustered], types[k]
    delta = (state.times[clustered] - taus[k]) / state.grid.values[warps[k]]
    neuron_type_counts = np.zeros((R, N))
    np.add.at(neuron_type_counts, (r, n), 1.)
    offset_sum, offset_sq_sum = np.zeros((N, R)), np.zeros((N, R))
    np.add.at(offset_sum, (n, r), delta)
    np.add.at(offset_sq_sum, (n, r), delta * delta)
    return GlobalStats(bg_counts, state.exposure, type_counts, neuron_type_counts, neuron_type_counts.T.copy(),
                       offset_sum, offset_sq_sum)


def sample_globals_from_stats(stats, hyper, rng):
    """
    Conjugate draws of the global parameters
    :param stats: GlobalStats, possibly summed over shards
    :return: GlobalParams
    """
    bg_rates = rng.gamma(hyper.alpha_bg + stats.bg_counts, 1. / (hyper.beta_bg + stats.exposure))
    type_probs = rng.dirichlet(hyper.gamma + stats.type_counts)
    neuron_weights = np.vstack([rng.dirichlet(hyper.phi + counts) for counts in stats.neuron_type_counts])

    kappa_post = hyper.kappa + stats.offset_count
    nu_post = hyper.nu + stats.offset_count
    mean_post = stats.offset_sum / kappa_post
    scatter = hyper.nu * hyper.sigma2 + stats.offset_sq_sum - stats.offset_sum ** 2 / kappa_post
    widths = scatter / rng.chisquare(nu_post)
    delays = rng.normal(mean_post, np.sqrt(widths / kappa_post))
    return GlobalParams(bg_rates, type_probs, neuron_weights, delays, widths)


def sample_prior_globals(hyper, rng):
    """Global parameters drawn from the inference prior, used to start a chain."""
    return sample_globals_from_stats(GlobalStats.empty(hyper.n_neurons, hyper.n_types), hyper, rng)


def resample_globals(data, state, hyper, grid, rng):
    """
    Draws new global parameters given the current assignments and latent events. The state is left untouched.
    :return: GlobalParams
    """
    return sample_globals_from_stats(collect_global_stats(state), hyper, rng)


def gibbs_sweep(data, state, hyper, grid, rng, order=config.SWEEP_ORDER, update_globals=True):
    """
    Algorithm step: reassign every spike, resample latent events, then global parameters
    :param data: Dataset the chain is fit to
    :param state: ChainState, updated in place
    :param update_globals: if False the global parameters are held fixed
    :return: the updated ChainState
    """
    resample_assignments(state, hyper, rng, order=order)
    resample_latent_events(state, hyper, rng)
    if update_globals:
        state.set_params(resample_globals(data, state, hyper, grid, rng))
    return state


@lru_cache(maxsize=4096)
def _log_V(k_star, expected_events, log_q):
    if expected_events == 0:
        return 0. if k_star == 0 else -np.inf
    log_rate = np.log(expected_events)
    past_mode = expected_events * np.exp(log_q) + 10. * np.sqrt(expected_events)
    total = -np.inf
    K = k_star
    while K - k_star < V_MAX_TERMS:
        term = -expected_events + K * log_rate - gammaln(K - k_star + 1) + K * log_q
        total = np.logaddexp(total, term)
        if K > past_mode and term < total + np.log(V_TOLERANCE):
            break
        K += 1
    return float(total)


def log_V(k_star, hyper):
    """
    Log of the partition-prior coefficient V(K*): sum over K >= K* of Po(K; psi T) K! / (K - K*)! q^K
    with q = (beta / (1 + beta))^alpha, truncated once terms are negligible past the mode
    """
    if k_star < 0:
        raise ValueError('K* must be nonnegative')
    log_q = hyper.alpha * (np.log(hyper.beta) - np.log1p(hyper.beta))
    return _log_V(int(k_star), float(hyper.psi * hyper.duration), float(log_q))


def log_partition_prior(sizes, hyper, bg_total_rate):
    """
    Prior probability of a partition of spike indices, latent events integrated out
    :param sizes: (background size, iterable of cluster sizes)
    :param hyper: Hyperparams
    :param bg_total_rate: summed background rate over neurons
    :return: log p(I | Theta)
    """
    n_bg, cluster_sizes = sizes
    cluster_sizes = np.asarray(list(cluster_sizes), dtype=float)
    if n_bg < 0 or np.any(cluster_sizes < 1):
        raise ValueError('Background size must be nonnegative and clusters nonempty')
    n_total = n_bg + cluster_sizes.sum()
    expected_bg = bg_total_rate * hyper.duration
    if n_bg == 0:
        log_poisson = -expected_bg
    elif expected_bg == 0:
        return -np.inf
    else:
        log_poisson = -expected_bg + n_bg * np.log(expected_bg) - gammaln(n_bg + 1)
    return float(log_V(len(cluster_sizes), hyper) + log_poisson + gammaln(n_bg + 1) - gammaln(n_total + 1) -
                 (n_total - n_bg) * np.log1p(hyper.beta) +
                 np.sum(gammaln(cluster_sizes + hyper.alpha) - gammaln(hyper.alpha)))


def log_joint_partition(state, hyper):
    """Collapsed target: partition prior times background and cluster marginal likelihoods."""
    sizes = (state.n_background, state.cluster_sizes())
    total = log_partition_prior(sizes, hyper, state.params.bg_rates.sum())
    total += log_marginal_background(state.neurons[state.assignments == 0], state.params, state.duration)
    for k in state.cluster_ids:
        total += log_marginal_cluster(state.cluster_stats(k), state.params, hyper, state.grid)
    return total

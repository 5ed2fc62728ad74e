#!/usr/bin/env python
# coding: utf-8
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import logsumexp

from exceptions import DegenerateInputError

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class Spike:
    neuron: int  # 1-based
    time: float


@dataclass(frozen=True)
class LatentEvent:
    """
    One sequence instance. `type` and `warp` are 1-based indices into the sequence types and the warp grid.
    """
    time: float
    type: int
    amplitude: float
    warp: int = 1

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError('Latent event amplitude must be positive, got {}'.format(self.amplitude))
        if self.type < 1 or self.warp < 1:
            raise ValueError('Latent event type and warp indices are 1-based')


@dataclass(frozen=True)
class Hyperparams:
    n_neurons: int
    duration: float
    n_types: int = 1
    psi: float = 0.02
    alpha: float = 225.
    beta: float = 7.5
    gamma: float = 3.
    gamma_bg: float = 1.
    phi: float = 1.
    nu: float = 4.
    sigma2: float = 0.04
    kappa: float = 0.04
    alpha_bg: float = 30.
    beta_bg: float = 10.
    n_warps: int = 1
    max_warp: float = 1.
    warp_variance: float = 100.
    window: float = 5.

    def __post_init__(self):
        strictly_positive = ['duration', 'alpha', 'beta', 'gamma', 'gamma_bg', 'phi', 'nu', 'sigma2', 'kappa',
                             'alpha_bg', 'beta_bg', 'warp_variance', 'window']
        for name in strictly_positive:
            if not getattr(self, name) > 0:
                raise ValueError('Hyperparameter {} must be strictly positive, got {}'.format(
                    name, getattr(self, name)))
        if self.psi < 0:
            raise ValueError('Sequence event rate psi must be nonnegative')
        if self.n_neurons < 1 or self.n_types < 1 or self.n_warps < 1:
            raise ValueError('n_neurons, n_types and n_warps must all be at least 1')
        if self.max_warp < 1:
            raise ValueError('max_warp must be at least 1, got {}'.format(self.max_warp))

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(eq=False)
class GlobalParams:
    """
    Global model parameters.
    :param bg_rates: (N,) background rate of every neuron, events/sec
    :param type_probs: (R,) sequence type probabilities
    :param neuron_weights: (R, N) one simplex over neurons per sequence type
    :param delays: (N, R) response offsets, sec
    :param widths: (N, R) response variances, sec^2
    """
    bg_rates: np.ndarray
    type_probs: np.ndarray
    neuron_weights: np.ndarray
    delays: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        self.bg_rates = np.asarray(self.bg_rates, dtype=float)
        self.type_probs = np.asarray(self.type_probs, dtype=float)
        self.neuron_weights = np.atleast_2d(np.asarray(self.neuron_weights, dtype=float))
        self.delays = np.asarray(self.delays, dtype=float).reshape(len(self.bg_rates), -1)
        self.widths = np.asarray(self.widths, dtype=float).reshape(len(self.bg_rates), -1)

    @property
    def n_neurons(self):
        return len(self.bg_rates)

    @property
    def n_types(self):
        return len(self.type_probs)

    def validate(self, tol=1e-12):
        if np.any(self.bg_rates < 0):
            raise ValueError('Background rates must be nonnegative')
        if abs(self.type_probs.sum() - 1) > tol:
            raise ValueError('Type probabilities must sum to one')
        if np.any(np.abs(self.neuron_weights.sum(axis=1) - 1) > tol):
            raise ValueError('Neuron weights of every sequence type must sum to one')
        if np.any(self.widths <= 0):
            raise ValueError('Response widths must be strictly positive')
        shape = (self.n_neurons, self.n_types)
        if self.delays.shape != shape or self.widths.shape != shape or \
                self.neuron_weights.shape != (self.n_types, self.n_neurons):
            raise ValueError('Inconsistent parameter shapes for N={}, R={}'.format(*shape))
        return self

    def copy(self):
        return GlobalParams(self.bg_rates.copy(), self.type_probs.copy(), self.neuron_weights.copy(),
                            self.delays.copy(), self.widths.copy())


@dataclass(eq=False)
class WarpGrid:
    values: np.ndarray
    probs: np.ndarray

    @property
    def size(self):
        return len(self.values)

    @property
    def log_probs(self):
        with np.errstate(divide='ignore'):
            return np.log(self.probs)


@dataclass(eq=False)
class Dataset:
    """
    Spike train in canonical form: `neurons` (1-based) and `times` sorted by time.
    """
    neurons: np.ndarray
    times: np.ndarray
    n_neurons: int
    duration: float
    _canonical: bool = field(default=False, repr=False)

    def __post_init__(self):
        neurons = np.asarray(self.neurons, dtype=np.int64).reshape(-1)
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if len(neurons) != len(times):
            raise ValueError('neurons and times must have the same length')
        if not self._canonical:
            order = np.argsort(times, kind='stable')
            neurons, times = neurons[order], times[order]
        if len(neurons) and (neurons.min() < 1 or neurons.max() > self.n_neurons):
            raise ValueError('Neuron ids must lie in 1..{}'.format(self.n_neurons))
        if len(times) and (times[0] < 0 or times[-1] > self.duration):
            raise ValueError('Spike times must lie in [0, {}]'.format(self.duration))
        self.neurons, self.times = neurons, times
        self._canonical = True

    @classmethod
    def from_spikes(cls, spikes, n_neurons, duration):
        return cls([s.neuron for s in spikes], [s.time for s in spikes], n_neurons, duration)

    @property
    def spikes(self):
        return [Spike(int(n), float(t)) for n, t in zip(self.neurons, self.times)]

    def __len__(self):
        return len(self.times)


def build_warp_grid(n_warps, max_warp, warp_variance):
    """
    Log-spaced warp values symmetric about 1 with discretized-Gaussian probabilities
    :param n_warps: number of warp values F
    :param max_warp: largest warp value w_F, at least 1
    :param warp_variance: variance of the warp-index Gaussian
    :return: WarpGrid
    """
    if n_warps < 1:
        raise ValueError('The warp grid needs at least one value')
    if max_warp < 1:
        raise ValueError('max_warp must be at least 1, got {}'.format(max_warp))
    if not warp_variance > 0:
        raise ValueError('warp_variance must be strictly positive')
    if n_warps == 1:
        return WarpGrid(values=np.ones(1), probs=np.ones(1))
    index = np.arange(n_warps)
    exponents = -1. + 2. * index / (n_warps - 1)
    values = float(max_warp) ** exponents
    # Centered on the middle index so odd grids put their largest mass on the unit warp
    log_probs = -0.5 * (index - (n_warps - 1) / 2.) ** 2 / warp_variance
    probs = np.exp(log_probs - logsumexp(log_probs))
    return WarpGrid(values=values, probs=probs / probs.sum())


def log_Z(J, h):
    """
    Log normalizing constant of an unnormalized Gaussian in information form, exp(-J x^2 / 2 + h x)
    :param J: precision, strictly positive
    :param h: linear coefficient
    """
    J = np.asarray(J, dtype=float)
    if np.any(J <= 0):
        raise ValueError('Precision J must be strictly positive')
    return log_normalizer(J, h)


def log_normalizer(J, h):
    """Same as log_Z without the precision check."""
    return 0.5 * LOG_2PI - 0.5 * np.log(J) + 0.5 * h * h / J


def log_normal_info(x, J, h):
    """Log density at x of the Gaussian with precision J and linear coefficient h."""
    return -0.5 * J * x * x + h * x - log_normalizer(J, h)


def events_to_arrays(events):
    """
    :param events: iterable of LatentEvent
    :return: times, 0-based types, amplitudes, 0-based warp indices
    """
    events = list(events)
    times = np.array([e.time for e in events], dtype=float)
    types = np.array([e.type - 1 for e in events], dtype=np.int64)
    amplitudes = np.array([e.amplitude for e in events], dtype=float)
    warps = np.array([e.warp - 1 for e in events], dtype=np.int64)
    return times, types, amplitudes, warps


def log_impulse_responses(times, neurons, events, params, grid):
    """
    Log of every event's impulse response at every (time, neuron) pair
    :param times: (S,) evaluation times
    :param neurons: (S,) 1-based neuron ids
    :return: (S, K) matrix of log[A_k a_{n r_k} N(t | tau_k + w b, w^2 c)]
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    neurons = np.atleast_1d(np.asarray(neurons, dtype=np.int64)) - 1
    taus, types, amplitudes, warps = events_to_arrays(events)
    if len(taus) == 0:
        return np.zeros((len(times), 0))
    omega = grid.values[warps]
    variance = omega[None, :] ** 2 * params.widths[neurons][:, types]
    J = 1. / variance
    h = (taus[None, :] + omega[None, :] * params.delays[neurons][:, types]) * J
    with np.errstate(divide='ignore'):
        log_weights = np.log(params.neuron_weights[types][:, neurons].T)
    return np.log(amplitudes)[None, :] + log_weights + log_normal_info(times[:, None], J, h)


def intensity(t, n, events, params, grid):
    """
    Firing rate of neuron n at time(s) t
    :param t: time or array of times (sec)
    :param n: 1-based neuron id
    :return: rate(s) in events/sec
    """
    t = np.asarray(t, dtype=float)
    times = np.atleast_1d(t)
    neurons = np.full(len(times), n, dtype=np.int64)
    rates = params.bg_rates[n - 1] + np.exp(log_impulse_responses(times, neurons, events, params, grid)).sum(axis=1)
    return rates.reshape(t.shape) if t.ndim else float(rates[0])


def log_spike_intensities(times, neurons, events, params, grid):
    """Log firing rate of each spike's neuron at the spike's time, computed in log space."""
    log_impulses = log_impulse_responses(times, neurons, events, params, grid)
    with np.errstate(divide='ignore'):
        log_bg = np.log(params.bg_rates[np.asarray(neurons, dtype=np.int64) - 1])
    return logsumexp(np.column_stack([log_bg, log_impulses]), axis=1)


def log_likelihood(data, events, params, grid):
    """
    Exact Poisson-process log-likelihood of a dataset given latent events and global parameters
    :param data: Dataset
    :param events: list of LatentEvent
    :param params: GlobalParams
    :param grid: WarpGrid
    :return: log-likelihood in nats
    """
    events = list(events)
    log_rates = log_spike_intensities(data.times, data.neurons, events, params, grid)
    if np.any(np.isneginf(log_rates)):
        bad = int(np.flatnonzero(np.isneginf(log_rates))[0])
        raise DegenerateInputError('Spike {} on neuron {} at t={} has zero intensity'.format(
            bad, data.neurons[bad], data.times[bad]))
    total_amplitude = sum(e.amplitude for e in events)
    return float(log_rates.sum() - params.bg_rates.sum() * data.duration - total_amplitude)

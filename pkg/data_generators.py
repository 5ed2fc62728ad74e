#!/usr/bin/env python
# coding: utf-8
import logging
from dataclasses import dataclass, replace

import numpy as np

from models import Dataset, GlobalParams, LatentEvent

logger = logging.getLogger(__name__)

BOUNDARY_DISCARD_WARNING = 0.01


@dataclass(eq=False)
class GroundTruth:
    """
    Everything a simulation knows that a fit does not
    :param events: latent events, in generation order
    :param labels: per-spike parent, 0 for background and k for events[k - 1], aligned with the dataset order
    :param params: global parameters used to draw the spikes
    """
    events: list
    labels: np.ndarray
    params: GlobalParams


def sample_scaled_inv_chi2(nu, scale, size, rng):
    return nu * scale / rng.chisquare(nu, size=size)


def sample_global_params(hyper, rng, bg_rate=None, width=None, unit_offsets=False):
    """
    Draws the global parameters from their priors. Background rates are built as lambda * pi_bg with
    lambda ~ Gamma(alpha_bg, beta_bg) and pi_bg ~ Dirichlet(gamma_bg).
    :param hyper: Hyperparams
    :param rng: numpy Generator
    :param bg_rate: if not None, every neuron's background rate is fixed to this value
    :param width: if not None, every response width c_nr is fixed to this value
    :param unit_offsets: if True, delays are drawn with unit standard deviation instead of sqrt(c / kappa)
    :return: GlobalParams
    """
    N, R = hyper.n_neurons, hyper.n_types
    if bg_rate is None:
        total_rate = rng.gamma(hyper.alpha_bg, 1. / hyper.beta_bg)
        bg_rates = total_rate * rng.dirichlet(np.full(N, hyper.gamma_bg))
    else:
        bg_rates = np.full(N, float(bg_rate))
    type_probs = rng.dirichlet(np.full(R, hyper.gamma))
    neuron_weights = rng.dirichlet(np.full(N, hyper.phi), size=R)
    if width is None:
        widths = sample_scaled_inv_chi2(hyper.nu, hyper.sigma2, (N, R), rng)
    else:
        widths = np.full((N, R), float(width))
    offset_std = np.ones((N, R)) if unit_offsets else np.sqrt(widths / hyper.kappa)
    delays = rng.normal(0., offset_std)
    return GlobalParams(bg_rates, type_probs, neuron_weights, delays, widths)


def sample_latent_events(hyper, grid, duration, rng, type_probs=None):
    """
    Draws latent events from the homogeneous Poisson process with rate psi
    :param hyper: Hyperparams
    :param grid: WarpGrid
    :param duration: recording length T
    :param rng: numpy Generator
    :param type_probs: sequence type probabilities; uniform when None
    :return: list of LatentEvent
    """
    if not duration > 0:
        raise ValueError('duration must be strictly positive')
    if type_probs is None:
        type_probs = np.full(hyper.n_types, 1. / hyper.n_types)
    n_events = rng.poisson(hyper.psi * duration)
    times = rng.uniform(0., duration, size=n_events)
    types = rng.choice(len(type_probs), size=n_events, p=type_probs)
    amplitudes = rng.gamma(hyper.alpha, 1. / hyper.beta, size=n_events)
    warps = rng.choice(grid.size, size=n_events, p=grid.probs)
    return [LatentEvent(float(t), int(r) + 1, float(a), int(f) + 1)
            for t, r, a, f in zip(times, types, amplitudes, warps)]


def sample_spike_arrays(events, params, grid, duration, rng):
    """
    Draws background spikes on [0, T] and induced spikes wherever they fall, without truncation
    :param events: list of LatentEvent
    :param params: GlobalParams
    :param grid: WarpGrid
    :param duration: recording length T
    :param rng: numpy Generator
    :return: 1-based neuron ids, times and parents (0 background, k for events[k - 1]), sorted by time
    """
    N = params.n_neurons
    total_bg = params.bg_rates.sum()
    n_bg = rng.poisson(total_bg * duration) if total_bg > 0 else 0
    neuron_chunks = [rng.choice(N, size=n_bg, p=params.bg_rates / total_bg) if n_bg else np.zeros(0, np.int64)]
    time_chunks = [rng.uniform(0., duration, size=n_bg)]
    label_chunks = [np.zeros(n_bg, dtype=np.int64)]

    for k, event in enumerate(events, start=1):
        r = event.type - 1
        omega = grid.values[event.warp - 1]
        n_induced = rng.poisson(event.amplitude)
        neurons = rng.choice(N, size=n_induced, p=params.neuron_weights[r])
        times = rng.normal(event.time + omega * params.delays[neurons, r], omega * np.sqrt(params.widths[neurons, r]))
        neuron_chunks.append(neurons)
        time_chunks.append(times)
        label_chunks.append(np.full(n_induced, k, dtype=np.int64))

    times = np.concatenate(time_chunks)
    order = np.argsort(times, kind='stable')
    return np.concatenate(neuron_chunks)[order] + 1, times[order], np.concatenate(label_chunks)[order]


def sample_spikes(events, params, grid, duration, rng, return_labels=False):
    """
    Draws background and induced spikes and keeps the ones inside [0, T]
    :param return_labels: if True, also return per-spike parents (0 background, k for events[k - 1])
    :return: Dataset, and labels when requested
    """
    neurons, times, labels = sample_spike_arrays(events, params, grid, duration, rng)
    inside = (times >= 0) & (times <= duration)
    n_discarded = int((~inside).sum())
    n_induced_total = int((labels > 0).sum())
    if n_induced_total and n_discarded / n_induced_total > BOUNDARY_DISCARD_WARNING:
        logger.warning('Discarded {} of {} induced spikes falling outside [0, {}]'.format(
            n_discarded, n_induced_total, duration))
    elif n_discarded:
        logger.debug('Discarded {} spikes outside [0, {}]'.format(n_discarded, duration))
    data = Dataset(neurons[inside], times[inside], params.n_neurons, duration, _canonical=True)
    if return_labels:
        return data, labels[inside]
    return data


def simulate(hyper, grid, rng, bg_rate=None, width=None, unit_offsets=False):
    """
    Complete forward simulation: global parameters, latent events, then spikes
    :return: Dataset and its GroundTruth
    """
    params = sample_global_params(hyper, rng, bg_rate=bg_rate, width=width, unit_offsets=unit_offsets)
    events = sample_latent_events(hyper, grid, hyper.duration, rng, type_probs=params.type_probs)
    data, labels = sample_spikes(events, params, grid, hyper.duration, rng, return_labels=True)
    logger.info('Simulated {} spikes from {} latent events ({} background)'.format(
        len(data), len(events), int((labels == 0).sum())))
    return data, GroundTruth(events=events, labels=labels, params=params)


def sample_empty_events(hyper, grid, params, rng):
    """
    Latent events that produced no observed spikes. Given the partition their number is
    Poisson(psi T (beta / (1 + beta))^alpha) and their amplitudes follow Gamma(alpha, beta + 1).
    :return: list of LatentEvent
    """
    log_q = hyper.alpha * (np.log(hyper.beta) - np.log1p(hyper.beta))
    n_empty = rng.poisson(hyper.psi * hyper.duration * np.exp(log_q))
    times = rng.uniform(0., hyper.duration, size=n_empty)
    types = rng.choice(hyper.n_types, size=n_empty, p=params.type_probs)
    amplitudes = rng.gamma(hyper.alpha, 1. / (hyper.beta + 1.), size=n_empty)
    warps = rng.choice(grid.size, size=n_empty, p=grid.probs)
    return [LatentEvent(float(t), int(r) + 1, float(a), int(f) + 1)
            for t, r, a, f in zip(times, types, amplitudes, warps)]


def matched_inference_hyperparams(hyper):
    """
    Per-neuron background prior that matches the generative lambda * Dirichlet construction.
    With gamma_bg = alpha_bg / N the background rates are independent Gamma(alpha_bg / N, beta_bg) draws.
    :return: (generative hyperparams, inference hyperparams)
    """
    shape = hyper.alpha_bg / hyper.n_neurons
    return replace(hyper, gamma_bg=shape), replace(hyper, alpha_bg=shape)

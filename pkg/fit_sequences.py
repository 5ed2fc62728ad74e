#!/usr/bin/env python
# coding: utf-8
import logging
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import ndtr
from scipy.stats import truncnorm
from tqdm import tqdm

import config
import helpers
from collapsed_gibbs import ChainState, gibbs_sweep, sample_prior_globals
from data_generators import (matched_inference_hyperparams, sample_empty_events, sample_global_params,
                             sample_latent_events, sample_spike_arrays)
from exceptions import ConfigError, DegenerateInputError
from models import GlobalParams, LatentEvent, build_warp_grid, events_to_arrays, log_spike_intensities
from parallel import ParallelSampler
from split_merge import split_merge_moves

logger = logging.getLogger(__name__)

GEWEKE_STATISTICS = ['n_events', 'n_spikes', 'mean_amplitude', 'background_fraction']


@dataclass(frozen=True)
class AnnealSchedule:
    """
    Amplitude-prior annealing followed by sampling at temperature one
    :param initial_temp: temperature of the first stage, at least 1
    :param n_stages: number of annealing stages; temperatures decay geometrically to 1
    :param sweeps_per_stage: Gibbs sweeps run at each annealing temperature
    :param final_sweeps: sweeps at temperature 1, the ones samples are kept from
    :param split_merge_moves: split-merge proposals after every sweep
    """
    initial_temp: float = 500.
    n_stages: int = 20
    sweeps_per_stage: int = 100
    final_sweeps: int = 100
    split_merge_moves: int = 1000

    def __post_init__(self):
        if self.initial_temp < 1:
            raise ConfigError('initial_temp must be at least 1, got {}'.format(self.initial_temp))
        for name in ['n_stages', 'sweeps_per_stage', 'final_sweeps', 'split_merge_moves']:
            if getattr(self, name) < 0:
                raise ConfigError('{} must be nonnegative'.format(name))

    def temperatures(self):
        """initial_temp ** (1 - j / n_stages) for j = 0..n_stages; the last entry is exactly 1."""
        if self.n_stages == 0:
            return np.ones(1)
        temps = float(self.initial_temp) ** (1. - np.arange(self.n_stages + 1) / self.n_stages)
        temps[-1] = 1.
        return temps

    @property
    def n_anneal_sweeps(self):
        return self.n_stages * self.sweeps_per_stage

    @property
    def n_sweeps(self):
        return self.n_anneal_sweeps + self.final_sweeps

    def temperature_at(self, sweep):
        """Temperature of the 0-based sweep index."""
        if sweep < self.n_anneal_sweeps:
            return float(self.temperatures()[sweep // self.sweeps_per_stage])
        return 1.


def schedule_from_config(values):
    try:
        return AnnealSchedule(**values)
    except TypeError as error:
        raise ConfigError('Invalid anneal schedule: {}'.format(error))


def anneal_amplitude_prior(alpha, beta, temperature):
    """
    Scales the amplitude-prior variance by `temperature` while keeping its mean
    :return: annealed (alpha, beta)
    """
    if temperature < 1:
        raise ValueError('Annealing temperature must be at least 1, got {}'.format(temperature))
    return alpha / temperature, beta / temperature


def annealed_hyperparams(hyper, temperature):
    alpha, beta = anneal_amplitude_prior(hyper.alpha, hyper.beta, temperature)
    return replace(hyper, alpha=alpha, beta=beta)


@dataclass(eq=False)
class SpeckledMask:
    """
    Withheld (neuron, [start, end)) blocks. Spikes inside a block are test data; the chain imputes the
    missing training spikes there instead.
    """
    n_neurons: int
    duration: float
    neurons: np.ndarray
    starts: np.ndarray
    ends: np.ndarray

    def __post_init__(self):
        self.neurons = np.asarray(self.neurons, dtype=np.int64).reshape(-1)
        self.starts = np.asarray(self.starts, dtype=float).reshape(-1)
        self.ends = np.asarray(self.ends, dtype=float).reshape(-1)
        order = np.lexsort((self.starts, self.neurons))
        self.neurons, self.starts, self.ends = self.neurons[order], self.starts[order], self.ends[order]
        if len(self.neurons) and (self.neurons.min() < 1 or self.neurons.max() > self.n_neurons):
            raise ValueError('Mask blocks must lie on neurons 1..{}'.format(self.n_neurons))
        if np.any(self.starts < 0) or np.any(self.ends > self.duration) or np.any(self.ends <= self.starts):
            raise ValueError('Mask blocks must be nonempty intervals inside [0, {}]'.format(self.duration))
        same_neuron = self.neurons[1:] == self.neurons[:-1]
        if np.any(same_neuron & (self.starts[1:] < self.ends[:-1])):
            raise ValueError('Mask blocks of one neuron must be disjoint')

    @classmethod
    def empty(cls, n_neurons, duration):
        return cls(n_neurons, duration, [], [], [])

    def __len__(self):
        return len(self.neurons)

    @property
    def is_empty(self):
        return len(self) == 0

    @property
    def masked_duration(self):
        """Total withheld neuron-seconds."""
        return float(np.sum(self.ends - self.starts))

    @property
    def masked_per_neuron(self):
        return np.bincount(self.neurons - 1, weights=self.ends - self.starts, minlength=self.n_neurons)

    @property
    def fraction(self):
        return self.masked_duration / (self.n_neurons * self.duration)

    def contains(self, neurons, times):
        """Boolean flags of the (neuron, time) pairs that fall inside a block."""
        neurons = np.asarray(neurons, dtype=np.int64).reshape(-1)
        times = np.asarray(times, dtype=float).reshape(-1)
        inside = np.zeros(len(times), dtype=bool)
        for n in np.unique(self.neurons):
            spikes = np.flatnonzero(neurons == n)
            if not len(spikes):
                continue
            blocks = self.neurons == n
            starts, ends = self.starts[blocks], self.ends[blocks]
            index = np.searchsorted(starts, times[spikes], side='right') - 1
            hit = index >= 0
            inside[spikes[hit]] = times[spikes[hit]] < ends[index[hit]]
        return inside

    def restrict(self, start, end):
        """The part of the mask inside [start, end)."""
        starts, ends = np.maximum(self.starts, start), np.minimum(self.ends, end)
        keep = ends > starts
        return SpeckledMask(self.n_neurons, self.duration, self.neurons[keep], starts[keep], ends[keep])

    def to_frame(self):
        return pd.DataFrame({'neuron': self.neurons, 'start': self.starts, 'end': self.ends})

    @classmethod
    def from_frame(cls, frame, n_neurons, duration):
        return cls(n_neurons, duration, frame['neuron'].values, frame['start'].values, frame['end'].values)


def make_speckled_mask(data, fraction=config.MASK_FRACTION, block_length=config.MASK_BLOCK_LENGTH, rng=None):
    """
    Withholds randomly chosen per-neuron time blocks covering about `fraction` of the N x [0, T] area.
    Blocks sit on a per-neuron grid of slots of length `block_length`, so they never overlap.
    :param data: Dataset (only N and T are used)
    :param fraction: share of the area to withhold, in [0, 1)
    :param block_length: block length (sec)
    :param rng: numpy Generator, seeded from config when None
    :return: SpeckledMask
    """
    if not 0 <= fraction < 1:
        raise ConfigError('Mask fraction must lie in [0, 1), got {}'.format(fraction))
    if not block_length > 0:
        raise ConfigError('Mask block length must be strictly positive')
    rng = np.random.default_rng(config.RANDOM_SEED) if rng is None else rng
    n_slots = int(np.floor(data.duration / block_length + 1e-9))
    if n_slots == 0:
        if fraction > 0:
            raise ConfigError('Mask block length {} exceeds the recording length {}'.format(
                block_length, data.duration))
        return SpeckledMask.empty(data.n_neurons, data.duration)
    total = data.n_neurons * n_slots
    chosen = rng.choice(total, size=int(round(fraction * total)), replace=False)
    starts = (chosen % n_slots) * block_length
    mask = SpeckledMask(data.n_neurons, data.duration, chosen // n_slots + 1, starts, starts + block_length)
    logger.info('Masked {} blocks, {:.2%} of the data'.format(len(mask), mask.fraction))
    return mask


def _block_intensity_terms(mask, events, params, grid):
    """
    Expected spike counts in every mask block
    :return: background counts (B,), per-event counts (B, K), and the event response means and stds (B, K)
    """
    n0 = mask.neurons - 1
    background = params.bg_rates[n0] * (mask.ends - mask.starts)
    taus, types, amplitudes, warps = events_to_arrays(events)
    if not len(taus):
        empty = np.zeros((len(n0), 0))
        return background, empty, empty, empty
    omega = grid.values[warps][None, :]
    means = taus[None, :] + omega * params.delays[n0][:, types]
    stds = omega * np.sqrt(params.widths[n0][:, types])
    mass = ndtr((mask.ends[:, None] - means) / stds) - ndtr((mask.starts[:, None] - means) / stds)
    induced = amplitudes[None, :] * params.neuron_weights[types][:, n0].T * mass
    return background, induced, means, stds


def impute_masked_spikes(state, mask, grid, rng):
    """
    Replaces the chain's imputed spikes with a fresh draw from the current intensity inside the mask.
    Background spikes are uniform in their block; spikes of an event follow its response truncated to the block
    and join that event's cluster.
    :param state: ChainState with a latent event for every live cluster
    :param mask: SpeckledMask
    :return: imputed neurons, times and parent labels
    """
    items = sorted(state.events.items())
    ids = np.array([k for k, _ in items], dtype=np.int64)
    background, induced, means, stds = _block_intensity_terms(mask, [e for _, e in items], state.params, grid)

    n_bg = rng.poisson(background)
    bg_blocks = np.repeat(np.arange(len(mask)), n_bg)
    bg_times = rng.uniform(mask.starts[bg_blocks], mask.ends[bg_blocks])

    counts = rng.poisson(induced)
    blocks, owners = np.nonzero(counts)
    repeats = counts[blocks, owners]
    blocks, owners = np.repeat(blocks, repeats), np.repeat(owners, repeats)
    if len(blocks):
        mu, sd = means[blocks, owners], stds[blocks, owners]
        induced_times = truncnorm.rvs((mask.starts[blocks] - mu) / sd, (mask.ends[blocks] - mu) / sd, loc=mu,
                                      scale=sd, random_state=rng)
    else:
        induced_times = np.zeros(0)

    neurons = np.concatenate([mask.neurons[bg_blocks], mask.neurons[blocks]])
    times = np.concatenate([bg_times, np.atleast_1d(induced_times)])
    labels = np.concatenate([np.zeros(len(bg_blocks), dtype=np.int64), ids[owners]])
    state.replace_imputed(neurons, times, labels)
    return neurons, times, labels


def _impute_shard(state, shard, rng, mask):
    return len(impute_masked_spikes(state, mask.restrict(shard.start, shard.end), state.grid, rng)[1])


def _log_intensity_sum(data, selector, events, params, grid):
    log_rates = log_spike_intensities(data.times[selector], data.neurons[selector], events, params, grid)
    return float(np.sum(log_rates))


def train_log_likelihood(data, mask, events, params, grid):
    """Log-likelihood of the unmasked spikes over the unmasked area; equals log_likelihood for an empty mask."""
    train = ~mask.contains(data.neurons, data.times)
    background, induced, _, _ = _block_intensity_terms(mask, events, params, grid)
    integral = params.bg_rates.sum() * data.duration - background.sum() + \
        sum(e.amplitude for e in events) - induced.sum()
    return _log_intensity_sum(data, train, events, params, grid) - integral


def masked_log_likelihood(data, mask, events, params, grid):
    """Log-likelihood of the masked spikes over the masked area."""
    test = mask.contains(data.neurons, data.times)
    background, induced, _, _ = _block_intensity_terms(mask, events, params, grid)
    return _log_intensity_sum(data, test, events, params, grid) - background.sum() - induced.sum()


def baseline_test_log_likelihood(data, mask):
    """Test log-likelihood of per-neuron homogeneous Poisson rates fit by maximum likelihood on the training area."""
    test = mask.contains(data.neurons, data.times)
    counts = np.bincount(data.neurons[~test] - 1, minlength=data.n_neurons)
    exposure = data.duration - mask.masked_per_neuron
    rates = np.divide(counts, exposure, out=np.zeros(data.n_neurons), where=exposure > 0)
    test_rates = rates[data.neurons[test] - 1]
    if np.any(test_rates == 0):
        raise DegenerateInputError('A masked spike falls on a neuron with no training spikes')
    return float(np.sum(np.log(test_rates)) - np.sum(rates * mask.masked_per_neuron))


def heldout_log_likelihood(data, mask, samples, grid):
    """
    Mean test log-likelihood of the posterior samples in excess of the homogeneous Poisson baseline
    :param samples: PosteriorSample list (anything with events and params)
    :return: excess nats per unit of masked neuron-time
    """
    if mask.is_empty:
        raise DegenerateInputError('Heldout log-likelihood needs a nonempty mask')
    if not len(samples):
        raise ValueError('Heldout log-likelihood needs at least one posterior sample')
    model = np.mean([masked_log_likelihood(data, mask, s.events, s.params, grid) for s in samples])
    return float((model - baseline_test_log_likelihood(data, mask)) / mask.masked_duration)


@dataclass(eq=False)
class PosteriorSample:
    """
    :param sweep: number of completed sweeps when the sample was taken
    :param assignments: per-spike cluster id in dataset order, 0 for background and -1 for masked spikes
    """
    sweep: int
    events: list
    params: GlobalParams
    assignments: np.ndarray
    train_log_likelihood: float

    def to_dict(self):
        p = self.params
        return {'sweep': self.sweep,
                'events': [[e.time, e.type, e.amplitude, e.warp] for e in self.events],
                'params': {'bg_rates': p.bg_rates.tolist(), 'type_probs': p.type_probs.tolist(),
                           'neuron_weights': p.neuron_weights.tolist(), 'delays': p.delays.tolist(),
                           'widths': p.widths.tolist()},
                'assignments': helpers.rle_encode(self.assignments),
                'train_log_likelihood': self.train_log_likelihood}

    @classmethod
    def from_dict(cls, payload):
        return cls(int(payload['sweep']),
                   [LatentEvent(float(t), int(r), float(a), int(f)) for t, r, a, f in payload['events']],
                   GlobalParams(**payload['params']), helpers.rle_decode(payload['assignments']),
                   float(payload['train_log_likelihood']))


@dataclass(eq=False)
class PosteriorSummary:
    """
    Output of one chain. Traces have one entry per sweep plus the initial state at index 0.
    """
    samples: list
    train_trace: np.ndarray
    test_trace: np.ndarray
    n_events_trace: np.ndarray
    temperatures: np.ndarray
    accepted_moves: np.ndarray

    @property
    def n_events(self):
        return np.array([len(s.events) for s in self.samples])

    def k_histogram(self):
        return k_histogram(self)

    def co_occupancy(self, indices=None):
        return co_occupancy(self.samples, indices)

    def traces_frame(self):
        return pd.DataFrame({'sweep': np.arange(len(self.train_trace)),
                             'temperature': self.temperatures,
                             'train_log_likelihood': self.train_trace,
                             'test_log_likelihood': self.test_trace,
                             'n_events': self.n_events_trace,
                             'split_merge_accepted': self.accepted_moves})


def co_occupancy(samples, indices=None):
    """
    Fraction of samples in which each pair of spikes shares a sequence
    :param samples: PosteriorSample list or assignment vectors
    :param indices: optional spike indices to restrict the matrix to
    :return: symmetric matrix with unit diagonal
    """
    if not len(samples):
        raise ValueError('Co-occupancy needs at least one sample')
    labels = np.vstack([np.asarray(getattr(s, 'assignments', s)) for s in samples])
    if indices is not None:
        labels = labels[:, indices]
    matrix = np.zeros((labels.shape[1], labels.shape[1]))
    for row in labels:
        matrix += (row[:, None] == row[None, :]) & (row[:, None] > 0)
    matrix /= len(labels)
    np.fill_diagonal(matrix, 1.)
    return matrix


def k_histogram(summary):
    """Number of posterior samples with each latent event count."""
    counts = pd.Series(summary.n_events, name='count').value_counts().sort_index()
    counts.index.name = 'n_events'
    return counts.rename('count')


def chain_overlap(summaries):
    """
    Median and interquartile range of the latent event count of every chain
    :return: per-chain DataFrame and whether the spread of medians is below the smallest IQR
    """
    rows = []
    for chain, summary in enumerate(summaries):
        q25, median, q75 = np.percentile(summary.n_events, [25, 50, 75])
        rows.append({'chain': chain, 'median': median, 'q25': q25, 'q75': q75, 'iqr': q75 - q25})
    frame = pd.DataFrame(rows)
    spread = frame['median'].max() - frame['median'].min()
    return frame, bool(spread == 0 or spread < frame['iqr'].min())


def retained_sweeps(schedule, n_samples=config.N_SAMPLES, thin=config.THIN):
    """
    Completed-sweep counts at which samples are kept: the final half of the post-anneal sweeps by default,
    or the last `n_samples` thinned ones
    """
    if thin < 1:
        raise ConfigError('thin must be at least 1')
    final = schedule.final_sweeps
    window = (final + 1) // 2 if n_samples is None else min(final, n_samples * thin)
    kept = [i for i in range(final - window, final) if (final - 1 - i) % thin == 0]
    return {schedule.n_anneal_sweeps + i + 1 for i in kept}


def _record(sampler, data, mask, grid, sweep):
    events, assignments, params = sampler.gather()
    train = train_log_likelihood(data, mask, events, params, grid)
    test = np.nan if mask.is_empty else masked_log_likelihood(data, mask, events, params, grid)
    return PosteriorSample(sweep, events, params, assignments, train), test


def run_chain(data, hyper, grid, schedule=None, mask=None, n_samples=config.N_SAMPLES, thin=config.THIN, rng=None,
              n_threads=config.N_THREADS, order=config.SWEEP_ORDER, params=None, checkpoint_path=None,
              checkpoint_every=config.CHECKPOINT_EVERY, resume=False, silent_mode=config.SILENT_MODE):
    """
    Annealed collapsed Gibbs sampling with split-merge moves and speckled-holdout imputation
    :param data: Dataset
    :param hyper: Hyperparams, matching the dataset's N and T
    :param grid: WarpGrid
    :param schedule: AnnealSchedule, from config when None
    :param mask: SpeckledMask; None trains on every spike
    :param n_samples: number of thinned samples to keep, None keeps the final half of the post-anneal sweeps
    :param thin: keep every `thin`-th sweep
    :param rng: numpy Generator, seeded from config when None
    :param n_threads: number of time shards sampled in parallel
    :param params: initial GlobalParams, drawn from the prior when None
    :param checkpoint_path: JSON checkpoint written every `checkpoint_every` sweeps and on interrupt
    :param resume: continue from `checkpoint_path` if it exists
    :return: PosteriorSummary
    """
    if data.n_neurons != hyper.n_neurons or data.duration != hyper.duration:
        raise ConfigError('Dataset has N={}, T={} but the hyperparameters say N={}, T={}'.format(
            data.n_neurons, data.duration, hyper.n_neurons, hyper.duration))
    schedule = AnnealSchedule(**config.ANNEAL_SCHEDULE) if schedule is None else schedule
    rng = np.random.default_rng(config.RANDOM_SEED) if rng is None else rng
    mask = SpeckledMask.empty(data.n_neurons, data.duration) if mask is None else mask
    params = sample_prior_globals(hyper, rng) if params is None else params
    sampler = ParallelSampler(data, params, grid, rng, n_threads=n_threads,
                              selector=~mask.contains(data.neurons, data.times))
    keep = retained_sweeps(schedule, n_samples, thin)

    initial, initial_test = _record(sampler, data, mask, grid, 0)
    samples = []
    traces = {'train': [initial.train_log_likelihood], 'test': [initial_test], 'n_events': [0],
              'temperature': [schedule.temperature_at(0)], 'accepted': [0]}
    start = 0
    if resume and checkpoint_path is not None and os.path.exists(checkpoint_path):
        payload = helpers.load_checkpoint(checkpoint_path)
        sampler.load_dict(payload['sampler'])
        samples = [PosteriorSample.from_dict(item) for item in payload['samples']]
        traces = payload['traces']
        start = int(payload['sweep'])
        logger.info('Resuming chain from sweep {} of {}'.format(start, schedule.n_sweeps))

    def snapshot(sweep):
        return {'sweep': sweep, 'sampler': sampler.to_dict(), 'samples': [s.to_dict() for s in samples],
                'traces': {key: list(value) for key, value in traces.items()}}

    last_snapshot = snapshot(start) if checkpoint_path is not None else None
    sweep = start
    try:
        for sweep in tqdm(range(start, schedule.n_sweeps), disable=silent_mode, desc='Sweeps'):
            temperature = schedule.temperature_at(sweep)
            annealed = annealed_hyperparams(hyper, temperature)
            if not mask.is_empty:
                sampler.map(_impute_shard, mask)
            sampler.sweep(annealed, order)
            accepted = sampler.split_merge(annealed, schedule.split_merge_moves)
            sample, test = _record(sampler, data, mask, grid, sweep + 1)
            traces['train'].append(sample.train_log_likelihood)
            traces['test'].append(test)
            traces['n_events'].append(len(sample.events))
            traces['temperature'].append(temperature)
            traces['accepted'].append(accepted)
            if sweep + 1 in keep:
                samples.append(sample)
            if config.DEBUG:
                logger.debug('Sweep {}: temperature {:.3g}, {} events, train log-likelihood {:.2f}'.format(
                    sweep + 1, temperature, len(sample.events), sample.train_log_likelihood))
            if checkpoint_path is not None:
                last_snapshot = snapshot(sweep + 1)
                if (sweep + 1) % checkpoint_every == 0:
                    helpers.save_checkpoint(checkpoint_path, last_snapshot)
    except KeyboardInterrupt:
        if checkpoint_path is not None:
            helpers.save_checkpoint(checkpoint_path, last_snapshot)
            logger.warning('Interrupted, checkpoint of sweep {} saved to {}'.format(last_snapshot['sweep'],
                                                                                   checkpoint_path))
        raise

    if not samples:
        sample, _ = _record(sampler, data, mask, grid, schedule.n_sweeps)
        samples.append(sample)
    if checkpoint_path is not None:
        helpers.save_checkpoint(checkpoint_path, snapshot(schedule.n_sweeps))
    return PosteriorSummary(samples=samples,
                            train_trace=np.asarray(traces['train'], dtype=float),
                            test_trace=np.asarray(traces['test'], dtype=float),
                            n_events_trace=np.asarray(traces['n_events'], dtype=np.int64),
                            temperatures=np.asarray(traces['temperature'], dtype=float),
                            accepted_moves=np.asarray(traces['accepted'], dtype=np.int64))


def run_chains(data, hyper, grid, schedule=None, mask=None, n_chains=config.N_CHAINS, rng=None,
               n_samples=config.N_SAMPLES, thin=config.THIN, order=config.SWEEP_ORDER, n_jobs=config.N_THREADS):
    """Independent chains, one spawned generator each, run as joblib jobs."""
    rng = np.random.default_rng(config.RANDOM_SEED) if rng is None else rng
    chain_rngs = rng.spawn(n_chains)
    return Parallel(n_jobs=n_jobs)(
        delayed(run_chain)(data, hyper, grid, schedule=schedule, mask=mask, n_samples=n_samples, thin=thin,
                           rng=chain_rng, n_threads=1, order=order, silent_mode=True)
        for chain_rng in chain_rngs)


def _joint_statistics(events, labels):
    labels = np.asarray(labels)
    amplitudes = [e.amplitude for e in events]
    return {'n_events': len(events),
            'n_spikes': len(labels),
            'mean_amplitude': float(np.mean(amplitudes)) if amplitudes else np.nan,
            'background_fraction': float(np.mean(labels == 0)) if len(labels) else np.nan}


def forward_joint_statistics(hyper, grid, rng, n_draws):
    """Statistics of independent draws from the generative model, induced spikes kept wherever they fall."""
    generative, _ = matched_inference_hyperparams(hyper)
    rows = []
    for _ in range(n_draws):
        params = sample_global_params(generative, rng)
        events = sample_latent_events(generative, grid, generative.duration, rng, type_probs=params.type_probs)
        _, _, labels = sample_spike_arrays(events, params, grid, generative.duration, rng)
        rows.append(_joint_statistics(events, labels))
    return pd.DataFrame(rows, columns=GEWEKE_STATISTICS)


def _state_from_labels(neurons, times, labels, events, params, grid, duration):
    present = np.unique(labels[labels > 0])
    return ChainState(neurons, times, params, grid, duration, assignments=labels,
                      events={int(k): events[k - 1] for k in present})


def successive_conditional_statistics(hyper, grid, rng, n_draws, sweeps_per_draw=1, split_merge_per_draw=0):
    """
    Statistics of the successive-conditional simulator: Gibbs sweeps (and optional split-merge proposals) given
    the spikes, then new spikes given the completed latent events (sampled clusters plus events with no spikes).
    Induced spikes are not truncated to [0, T], so both simulators target the same joint distribution.
    """
    generative, inference = matched_inference_hyperparams(hyper)
    duration = hyper.duration
    params = sample_global_params(generative, rng)
    events = sample_latent_events(generative, grid, duration, rng, type_probs=params.type_probs)
    neurons, times, labels = sample_spike_arrays(events, params, grid, duration, rng)
    state = _state_from_labels(neurons, times, labels, events, params, grid, duration)
    rows = []
    for _ in tqdm(range(n_draws), disable=config.SILENT_MODE, desc='Successive conditionals'):
        for _ in range(sweeps_per_draw):
            gibbs_sweep(None, state, inference, grid, rng)
        if split_merge_per_draw:
            split_merge_moves(state, None, inference, grid, rng, split_merge_per_draw)
        events = state.event_list() + sample_empty_events(inference, grid, state.params, rng)
        neurons, times, labels = sample_spike_arrays(events, state.params, grid, duration, rng)
        rows.append(_joint_statistics(events, labels))
        state = _state_from_labels(neurons, times, labels, events, state.params, grid, duration)
    return pd.DataFrame(rows, columns=GEWEKE_STATISTICS)


def batch_means_standard_error(values, n_batches=config.GEWEKE_BATCHES):
    """Standard error of the mean of an autocorrelated series from the spread of its batch means; NaN dropped."""
    values = np.asarray(values, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) < 2 * n_batches:
        raise ValueError('Need at least {} values for {} batches'.format(2 * n_batches, n_batches))
    batch_means = np.array([batch.mean() for batch in np.array_split(values, n_batches)])
    return float(batch_means.std(ddof=1) / np.sqrt(n_batches))


def geweke_z_scores(forward, conditional, n_batches=config.GEWEKE_BATCHES):
    """
    Per-statistic z-scores of the difference between forward and successive-conditional means
    :param forward: frame of independent forward draws
    :param conditional: frame of successive-conditional draws, in chain order
    :return: pandas Series indexed by statistic
    """
    scores = {}
    for name in GEWEKE_STATISTICS:
        a, b = forward[name].dropna(), conditional[name].dropna()
        spread = np.sqrt(a.var(ddof=1) / len(a) + batch_means_standard_error(b, n_batches) ** 2)
        scores[name] = float((a.mean() - b.mean()) / spread)
    return pd.Series(scores)


def fit_sequence_model(data, hyper=None, schedule=None, mask_fraction=config.MASK_FRACTION,
                       mask_block_length=config.MASK_BLOCK_LENGTH, n_chains=config.N_CHAINS,
                       n_threads=config.N_THREADS, n_samples=config.N_SAMPLES, thin=config.THIN,
                       random_seed=config.RANDOM_SEED, output_dir=config.OUTPUT_DIR, suffix=config.EXPERIMENT_SUFFIX,
                       save_results=True, resume=False, silent_mode=config.SILENT_MODE, provenance=None,
                       order=config.SWEEP_ORDER):
    """
    Complete fitting pipeline. Values can be set on the config.py or directly on function call.

    :param data: Dataset to fit
    :param hyper: Hyperparams; built from config.HYPERPARAMS and the dataset's N and T when None
    :param schedule: AnnealSchedule, from config when None
    :param mask_fraction: share of the data withheld for the heldout score, 0 disables masking
    :param mask_block_length: length of every withheld block (sec)
    :param n_chains: independent chains; more than one runs them as parallel jobs with one shard each
    :param n_threads: time shards per chain when a single chain runs, joblib jobs otherwise
    :param random_seed: master seed; mask and chains derive their generators from it
    :param output_dir: parent folder of the experiment folder
    :param suffix: string to distinguish between experiments
    :param save_results: write samples, traces and histograms to the experiment folder
    :param resume: continue an interrupted single-chain run from its checkpoint
    :param provenance: resolved configuration written at the top of every output file
    :param order: spike visiting order of the Gibbs sweeps
    :return: dict with the experiment folder, mask, summaries and heldout scores
    """
    if hyper is None:
        hyper = helpers.hyperparams_from_config(config.HYPERPARAMS, n_neurons=data.n_neurons,
                                                duration=data.duration)
    schedule = AnnealSchedule(**config.ANNEAL_SCHEDULE) if schedule is None else schedule
    provenance = provenance or {'hyperparams': hyper.as_dict(), 'anneal_schedule': asdict(schedule),
                                'mask_fraction': mask_fraction, 'mask_block_length': mask_block_length,
                                'n_chains': n_chains, 'n_threads': n_threads, 'n_samples': n_samples, 'thin': thin,
                                'seed': random_seed}

    # Define experiment id
    experiment_id = 'R{}_F{}_mask{}_seed{}_{}'.format(hyper.n_types, hyper.n_warps, mask_fraction, random_seed,
                                                      suffix)
    if experiment_id[-1] == '_':  # no suffix
        experiment_id = experiment_id[:-1]
    experiment_folder_path = None
    if save_results:
        experiment_folder_path = helpers.create_experiment_folder(output_dir, experiment_id, reuse=resume)
        helpers.save_config(experiment_folder_path, provenance)
    logger.info('Experiment id: {}, saving results in {}'.format(experiment_id, experiment_folder_path))

    start = time.time()
    rng = np.random.default_rng(random_seed)
    grid = build_warp_grid(hyper.n_warps, hyper.max_warp, hyper.warp_variance)
    mask = make_speckled_mask(data, mask_fraction, mask_block_length, rng)
    if n_chains == 1:
        checkpoint_path = os.path.join(experiment_folder_path, 'checkpoint.json') if save_results else None
        summaries = [run_chain(data, hyper, grid, schedule, mask, n_samples=n_samples, thin=thin, rng=rng,
                               n_threads=n_threads, order=order, checkpoint_path=checkpoint_path,
                               resume=resume, silent_mode=silent_mode)]
    else:
        summaries = run_chains(data, hyper, grid, schedule, mask, n_chains=n_chains, rng=rng, n_samples=n_samples,
                               thin=thin, order=order, n_jobs=n_threads)
    heldout = [heldout_log_likelihood(data, mask, s.samples, grid) if not mask.is_empty else np.nan
               for s in summaries]
    logger.info('Fit took {:.02f} s, heldout excess nats per unit time: {}'.format(time.time() - start, heldout))

    if save_results:
        helpers.write_frame(os.path.join(experiment_folder_path, 'mask.csv'), mask.to_frame(), provenance)
        traces, histograms = [], []
        for chain, summary in enumerate(summaries):
            helpers.write_samples(os.path.join(experiment_folder_path, 'samples_{}.jsonl'.format(chain)),
                                  summary.samples, provenance)
            traces.append(summary.traces_frame().assign(chain=chain))
            histograms.append(summary.k_histogram().reset_index().assign(chain=chain))
        helpers.write_frame(os.path.join(experiment_folder_path, 'traces.csv'), pd.concat(traces), provenance)
        helpers.write_frame(os.path.join(experiment_folder_path, 'k_histogram.csv'), pd.concat(histograms),
                            provenance)
        helpers.write_frame(os.path.join(experiment_folder_path, 'results.csv'),
                            pd.DataFrame({'chain': range(len(summaries)), 'heldout_log_likelihood': heldout,
                                          'final_train_log_likelihood': [s.train_trace[-1] for s in summaries]}),
                            provenance)
    return {'experiment_folder': experiment_folder_path, 'mask': mask, 'grid': grid, 'summaries': summaries,
            'heldout': heldout}

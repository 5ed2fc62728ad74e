#!/usr/bin/env python
# coding: utf-8
import copy
import json
import logging
import os

import numpy as np
import pandas as pd

import config
from exceptions import CheckpointVersionError, ConfigError, DataFormatError
from models import Dataset, Hyperparams, LatentEvent

logger = logging.getLogger(__name__)

SPIKE_COLUMNS = ['neuron', 'time']
EVENT_COLUMNS = ['time', 'type', 'amplitude', 'warp']
FREE_FORM_SECTIONS = ['search_space']


def default_config():
    """Resolved configuration built from config.py alone."""
    return {'hyperparams': dict(config.HYPERPARAMS),
            'anneal_schedule': dict(config.ANNEAL_SCHEDULE),
            'data': {'n_neurons': None, 'duration': None},
            'simulation': {'bg_rate': None, 'width': None, 'unit_offsets': False},
            'seed': config.RANDOM_SEED,
            'mask_fraction': config.MASK_FRACTION,
            'mask_block_length': config.MASK_BLOCK_LENGTH,
            'n_chains': config.N_CHAINS,
            'n_threads': config.N_THREADS,
            'n_samples': config.N_SAMPLES,
            'thin': config.THIN,
            'sweep_order': config.SWEEP_ORDER,
            'bin_size': config.BIN_SIZE,
            'max_shift_bins': config.MAX_SHIFT_BINS,
            'n_configs': config.N_CONFIGS,
            'search_space': copy.deepcopy(config.SEARCH_SPACE),
            'sweep_fixed': dict(config.SWEEP_FIXED)}


def merge_config(base, overrides, path=''):
    """Recursively overrides `base`; keys that `base` does not declare are rejected."""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        name = path + key
        if key not in merged:
            raise ConfigError('Unknown configuration key {}'.format(name))
        if isinstance(merged[key], dict) and key not in FREE_FORM_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError('Configuration key {} must be an object'.format(name))
            merged[key] = merge_config(merged[key], value, name + '.')
        else:
            merged[key] = value
    return merged


def read_overrides(path):
    """The JSON object of a configuration file, before merging."""
    try:
        with open(path) as fp:
            overrides = json.load(fp)
    except FileNotFoundError:
        raise ConfigError('Configuration file {} does not exist'.format(path))
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigError('Cannot read configuration file {}: {}'.format(path, error))
    if not isinstance(overrides, dict):
        raise ConfigError('Configuration file {} must contain a JSON object'.format(path))
    return overrides


def load_config(path=None):
    """
    Reads a JSON configuration and merges it over the config.py defaults
    :param path: JSON file, None for the defaults alone
    :return: resolved configuration dict
    """
    if path is None:
        return default_config()
    return merge_config(default_config(), read_overrides(path))


def check_data_matches(hyperparams, data):
    """
    Rejects a configuration whose explicitly set N or T disagrees with the spike data
    :param hyperparams: the hyperparams object of a configuration file, as written by the user
    :param data: Dataset
    """
    for name, value in (('n_neurons', data.n_neurons), ('duration', data.duration)):
        if name in hyperparams and hyperparams[name] != value:
            raise ConfigError('hyperparams.{} is {} but the spike data has {}={}'.format(
                name, hyperparams[name], name, value))


def hyperparams_from_config(values, n_neurons=None, duration=None):
    """Hyperparams from a configuration section, with N and T optionally taken from the data."""
    values = dict(values)
    if n_neurons is not None:
        values['n_neurons'] = int(n_neurons)
    if duration is not None:
        values['duration'] = float(duration)
    try:
        return Hyperparams(**values)
    except (TypeError, ValueError) as error:
        raise ConfigError('Invalid hyperparameters: {}'.format(error))


def provenance_header(kind, provenance=None):
    return '# ' + json.dumps({'format': kind, 'format_version': config.FORMAT_VERSION, 'config': provenance},
                             sort_keys=True)


def _count_comment_lines(path):
    count = 0
    with open(path) as fp:
        for line in fp:
            if not line.startswith('#'):
                break
            count += 1
    return count


def read_provenance(path):
    """Provenance dict of a file written by this package, None when the file has no header."""
    with open(path) as fp:
        first = fp.readline()
    if not first.startswith('# '):
        return None
    try:
        return json.loads(first[2:])
    except json.JSONDecodeError:
        return None


def write_frame(path, frame, provenance=None, kind=None):
    """CSV with a one-line JSON provenance header."""
    kind = kind or os.path.splitext(os.path.basename(path))[0]
    with open(path, 'w', newline='') as fp:
        fp.write(provenance_header(kind, provenance) + '\n')
        frame.to_csv(fp, index=False)


def read_frame(path):
    try:
        return pd.read_csv(path, skiprows=_count_comment_lines(path))
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as error:
        raise DataFormatError('Cannot parse {}: {}'.format(path, error))


def parse_spikes(path, n_neurons=None, duration=None):
    """
    Reads a `neuron,time` CSV into a Dataset. Leading `#` lines are skipped.
    :param path: CSV file with 1-based neuron ids and spike times in seconds
    :param n_neurons: number of neurons N; inferred as the largest id when None
    :param duration: recording length T; inferred as the largest time rounded up when None
    :return: Dataset in canonical order
    """
    if not os.path.exists(path):
        raise DataFormatError('Spike file {} does not exist'.format(path))
    n_comments = _count_comment_lines(path)
    try:
        frame = pd.read_csv(path, skiprows=n_comments, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise DataFormatError('Spike file {} is empty'.format(path))
    except pd.errors.ParserError as error:
        raise DataFormatError('Malformed spike file {}: {}'.format(path, error))
    header_line = n_comments + 1
    if [c.strip() for c in frame.columns] != SPIKE_COLUMNS:
        raise DataFormatError('expected header "neuron,time", got "{}"'.format(','.join(frame.columns)),
                              line=header_line)

    neurons = pd.to_numeric(frame.iloc[:, 0].str.strip(), errors='coerce').to_numpy(dtype=float)
    times = pd.to_numeric(frame.iloc[:, 1].str.strip(), errors='coerce').to_numpy(dtype=float)
    line_numbers = header_line + 1 + np.arange(len(frame))
    checks = [(np.isnan(neurons) | np.isnan(times), 'malformed row, expected an integer neuron id and a time'),
              (np.isnan(neurons) | (neurons != np.round(neurons)), 'neuron ids must be integers'),
              (neurons < 1, 'neuron ids are 1-based, got a value below 1'),
              (times < 0, 'spike times must be nonnegative'),
              (~np.isfinite(times), 'spike times must be finite')]
    if n_neurons is not None:
        checks.append((neurons > n_neurons, 'neuron id exceeds the configured N={}'.format(n_neurons)))
    if duration is not None:
        checks.append((times > duration, 'spike time exceeds the configured T={}'.format(duration)))
    for failed, message in checks:
        if np.any(failed):
            row = int(np.flatnonzero(failed)[0])
            raise DataFormatError('{} ({})'.format(message, ','.join(frame.iloc[row].astype(str))),
                                  line=int(line_numbers[row]))

    if n_neurons is None or duration is None:
        if not len(frame):
            raise DataFormatError('Cannot infer N and T from a spike file without spikes')
        if n_neurons is None:
            n_neurons = int(neurons.max())
        if duration is None:
            duration = float(max(np.ceil(times.max()), 1.))
        logger.warning('Inferred N={} and T={} from {}'.format(n_neurons, duration, path))
    return Dataset(neurons.astype(np.int64), times, int(n_neurons), float(duration))


def write_spikes(path, data, provenance=None, labels=None):
    frame = pd.DataFrame({'neuron': data.neurons, 'time': data.times})
    if labels is not None:
        frame['label'] = labels
    write_frame(path, frame, provenance, kind='spikes')


def write_events(path, events, provenance=None):
    frame = pd.DataFrame([[e.time, e.type, e.amplitude, e.warp] for e in events], columns=EVENT_COLUMNS)
    write_frame(path, frame, provenance, kind='events')


def read_events(path):
    """
    Event times from a CSV with at least a `time` column. Files with the full event columns come back as
    LatentEvents; time-only files (external detectors) come back as an array of times.
    """
    frame = read_frame(path)
    if 'time' not in frame.columns:
        raise DataFormatError('Event file {} has no time column'.format(path))
    if set(EVENT_COLUMNS) <= set(frame.columns):
        return [LatentEvent(float(t), int(r), float(a), int(f)) for t, r, a, f in frame[EVENT_COLUMNS].values]
    return frame['time'].to_numpy(dtype=float)


def rle_encode(values):
    """Run-length encoding as [[value, count], ...]."""
    values = np.asarray(values)
    if not len(values):
        return []
    starts = np.flatnonzero(np.concatenate([[True], values[1:] != values[:-1]]))
    counts = np.diff(np.concatenate([starts, [len(values)]]))
    return [[int(v), int(c)] for v, c in zip(values[starts], counts)]


def rle_decode(runs):
    if not runs:
        return np.zeros(0, dtype=np.int64)
    values, counts = zip(*runs)
    return np.repeat(np.asarray(values, dtype=np.int64), counts)


def write_samples(path, samples, provenance=None):
    """JSON-lines posterior samples: the provenance header, then one sample per line."""
    with open(path, 'w') as fp:
        fp.write(json.dumps({'format': 'posterior_samples', 'format_version': config.FORMAT_VERSION,
                             'config': provenance}, sort_keys=True) + '\n')
        for sample in samples:
            fp.write(json.dumps(sample.to_dict(), sort_keys=True) + '\n')


def read_samples(path):
    """
    :return: header dict and the list of sample dicts
    """
    if not os.path.exists(path):
        raise DataFormatError('Sample file {} does not exist'.format(path))
    with open(path) as fp:
        lines = [line for line in fp if line.strip()]
    try:
        header = json.loads(lines[0]) if lines else None
        samples = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as error:
        raise DataFormatError('Sample file {} is not valid JSON-lines: {}'.format(path, error), line=error.lineno)
    if not header or header.get('format') != 'posterior_samples':
        raise DataFormatError('{} is not a posterior sample file'.format(path), line=1)
    if header.get('format_version') != config.FORMAT_VERSION:
        raise DataFormatError('Sample file {} has format version {}, expected {}'.format(
            path, header.get('format_version'), config.FORMAT_VERSION), line=1)
    return header, samples


def save_checkpoint(path, payload):
    """Writes a versioned JSON checkpoint, replacing any previous one in a single rename."""
    temporary = path + '.tmp'
    with open(temporary, 'w') as fp:
        json.dump({'format_version': config.FORMAT_VERSION, **payload}, fp)
    os.replace(temporary, path)


def load_checkpoint(path):
    try:
        with open(path) as fp:
            payload = json.load(fp)
    except (OSError, json.JSONDecodeError) as error:
        raise CheckpointVersionError('Cannot read checkpoint {}: {}'.format(path, error))
    if payload.get('format_version') != config.FORMAT_VERSION:
        raise CheckpointVersionError('Checkpoint {} has format version {}, expected {}'.format(
            path, payload.get('format_version'), config.FORMAT_VERSION))
    return payload


def create_experiment_folder(output_dir, experiment_id, reuse=False):
    """
    Creates output_dir/experiment_id, adding a repetition suffix when it already exists
    :param reuse: return the existing folder instead, to resume a run
    """
    experiment_folder_path = os.path.join(output_dir, experiment_id)
    if os.path.exists(experiment_folder_path) and not reuse:
        experiment_repetitions = 0
        while os.path.exists(experiment_folder_path):
            experiment_repetitions += 1
            experiment_folder_path = os.path.join(output_dir, experiment_id + '_' + str(experiment_repetitions))
    os.makedirs(experiment_folder_path, exist_ok=True)
    return experiment_folder_path


def save_config(folder, provenance):
    with open(os.path.join(folder, 'config.json'), 'w') as fp:
        json.dump(provenance, fp, indent=2, sort_keys=True)

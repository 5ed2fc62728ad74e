#!/usr/bin/env python
# coding: utf-8
import logging
import time
from dataclasses import fields

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

import config
import helpers
from exceptions import ConfigError, PPSeqError
from fit_sequences import heldout_log_likelihood, make_speckled_mask, run_chain
from models import Hyperparams, build_warp_grid

logger = logging.getLogger(__name__)

DERIVED_KEYS = ['amplitude_mean', 'background_amplitude_mean', 'width']
HYPERPARAM_KEYS = [f.name for f in fields(Hyperparams)]


def _sample_value(name, dimension, rng):
    kind = dimension.get('type')
    if kind == 'choice':
        values = list(dimension['values'])
        if not values:
            raise ConfigError('Search dimension {} has no values to choose from'.format(name))
        return values[int(rng.integers(len(values)))]
    low, high = dimension.get('low'), dimension.get('high')
    if low is None or high is None or not low <= high:
        raise ConfigError('Search dimension {} needs low <= high, got {} and {}'.format(name, low, high))
    if kind == 'uniform':
        return float(rng.uniform(low, high))
    if kind == 'log_uniform':
        if not low > 0:
            raise ConfigError('Log-uniform dimension {} needs a positive lower bound'.format(name))
        return float(np.exp(rng.uniform(np.log(low), np.log(high))))
    raise ConfigError('Unknown search dimension type {} for {}'.format(kind, name))


def sample_configs(search_space=config.SEARCH_SPACE, n_configs=config.N_CONFIGS, rng=None):
    """
    Independent random draws from the search space
    :param search_space: dict name -> {'type': 'choice', 'values': [...]} or
                         {'type': 'uniform' | 'log_uniform', 'low': a, 'high': b}
    :return: list of dicts, one per configuration
    """
    rng = np.random.default_rng(config.RANDOM_SEED) if rng is None else rng
    for name in search_space:
        if name not in HYPERPARAM_KEYS + DERIVED_KEYS:
            raise ConfigError('Search dimension {} is not a hyperparameter'.format(name))
    return [{name: _sample_value(name, dimension, rng) for name, dimension in search_space.items()}
            for _ in range(n_configs)]


def config_to_hyperparams(values, n_neurons, duration, base=None):
    """
    Hyperparams of one sampled configuration. Derived keys:
    amplitude_mean m sets alpha = m and beta = 1; background_amplitude_mean m sets alpha_bg = m / N and
    beta_bg = T; width sets sigma2.
    :param base: dict of defaults the sampled values override
    """
    resolved = dict(config.HYPERPARAMS if base is None else base)
    for name, value in values.items():
        if name == 'amplitude_mean':
            resolved.update(alpha=float(value), beta=1.)
        elif name == 'background_amplitude_mean':
            resolved.update(alpha_bg=float(value) / n_neurons, beta_bg=float(duration))
        elif name == 'width':
            resolved['sigma2'] = float(value)
        else:
            resolved[name] = value
    return helpers.hyperparams_from_config(resolved, n_neurons=n_neurons, duration=duration)


def _evaluate_config(index, values, data, mask, schedule, base, rng, seed):
    row = {'config_index': index, **values, 'seed': seed}
    start = time.time()
    try:
        hyper = config_to_hyperparams(values, data.n_neurons, data.duration, base)
        grid = build_warp_grid(hyper.n_warps, hyper.max_warp, hyper.warp_variance)
        summary = run_chain(data, hyper, grid, schedule, mask, rng=rng, n_threads=1, silent_mode=True)
        row.update(train_log_likelihood=float(np.mean([s.train_log_likelihood for s in summary.samples])),
                   heldout_log_likelihood=heldout_log_likelihood(data, mask, summary.samples, grid),
                   status='ok', error='')
    except (PPSeqError, ValueError, FloatingPointError) as error:
        logger.warning('Configuration {} failed: {}'.format(index, error))
        row.update(train_log_likelihood=np.nan, heldout_log_likelihood=np.nan, status='failed', error=str(error))
    row['runtime'] = time.time() - start
    return row


def hyperparameter_sweep(data, search_space=config.SEARCH_SPACE, n_configs=config.N_CONFIGS, schedule=None,
                         rng=None, base=None, mask=None, mask_fraction=config.MASK_FRACTION,
                         mask_block_length=config.MASK_BLOCK_LENGTH, n_jobs=config.N_THREADS, seed=None,
                         output_path=None, provenance=None, silent_mode=config.SILENT_MODE):
    """
    Randomized search ranked by speckled-holdout log-likelihood. Every configuration is fit on the same mask
    with its own spawned generator; failures are recorded in the table, not raised.
    :param data: Dataset
    :param search_space: see sample_configs
    :param n_configs: number of configurations
    :param schedule: AnnealSchedule for every fit
    :param rng: master generator; draws the configurations, the mask and the per-configuration generators
    :param base: hyperparameter defaults, config.HYPERPARAMS updated with config.SWEEP_FIXED when None
    :param mask: SpeckledMask to reuse; drawn from `rng` when None
    :param seed: master seed recorded in the results table
    :param output_path: CSV file for the results table
    :return: results DataFrame sorted by heldout score, ties broken by configuration index
    """
    rng = np.random.default_rng(config.RANDOM_SEED) if rng is None else rng
    base = {**config.HYPERPARAMS, **config.SWEEP_FIXED} if base is None else base
    configs = sample_configs(search_space, n_configs, rng)
    mask = make_speckled_mask(data, mask_fraction, mask_block_length, rng) if mask is None else mask
    config_rngs = rng.spawn(n_configs)
    logger.info('Evaluating {} configurations on {} masked blocks'.format(n_configs, len(mask)))

    rows = Parallel(n_jobs=n_jobs, verbose=0 if silent_mode else 5)(
        delayed(_evaluate_config)(index, values, data, mask, schedule, base, config_rng, seed)
        for index, (values, config_rng) in enumerate(zip(configs, config_rngs)))
    results = pd.DataFrame(rows).sort_values('config_index')
    results = results.sort_values('heldout_log_likelihood', ascending=False, kind='mergesort', na_position='last')
    results = results.reset_index(drop=True)
    if output_path is not None:
        helpers.write_frame(output_path, results, provenance)
    n_failed = int((results['status'] == 'failed').sum())
    if n_failed:
        logger.warning('{} of {} configurations failed'.format(n_failed, n_configs))
    return results

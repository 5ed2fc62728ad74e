#!/usr/bin/env python
# coding: utf-8
import logging
import os
from dataclasses import replace

import numpy as np
import pandas as pd

import config
import helpers
from data_generators import simulate
from evaluate_detection import detection_report, event_rate_vector, shifted_roc_auc
from fit_sequences import AnnealSchedule, fit_sequence_model
from models import build_warp_grid

logger = logging.getLogger(__name__)

# Low-noise synthetic benchmark: per-neuron background rate, response width, unit-variance offsets
BENCHMARK_BG_RATE = 0.03
BENCHMARK_WIDTH = 0.04


def model_selection(simulation, fits, seeds, schedule, save_results=True):
    """
    Heldout excess nats of several model sizes on data simulated from one configuration
    :param simulation: hyperparameter section the data is simulated from
    :param fits: (n_types, n_warps) pairs to fit; warped models reuse the simulation's max_warp
    :param seeds: one simulated dataset and fit per seed
    :return: DataFrame with one row per seed and model
    """
    rows = []
    for seed in seeds:
        generative = helpers.hyperparams_from_config(simulation)
        grid = build_warp_grid(generative.n_warps, generative.max_warp, generative.warp_variance)
        data, _ = simulate(generative, grid, np.random.default_rng(seed))
        for n_types, n_warps in fits:
            hyper = replace(generative, n_types=n_types, n_warps=n_warps,
                            max_warp=generative.max_warp if n_warps > 1 else 1.)
            results = fit_sequence_model(data, hyper=hyper, schedule=schedule, random_seed=seed,
                                         suffix='selection', save_results=save_results, silent_mode=True)
            rows.append({'seed': seed, 'n_types': n_types, 'n_warps': n_warps,
                         'heldout_log_likelihood': np.mean(results['heldout'])})
    return pd.DataFrame(rows)


def jittered_hyperparams(hyper, jitter):
    """Response widths scaled by the squared jitter factor; offsets keep unit variance, so kappa follows."""
    return replace(hyper, sigma2=hyper.sigma2 * jitter ** 2, kappa=hyper.kappa * jitter ** 2)


def jitter_detection(hyper, jitter_factors, seeds, schedule, bin_size=config.BIN_SIZE,
                     max_shift_bins=config.MAX_SHIFT_BINS, save_results=False):
    """
    Detection accuracy as the spikes of every sequence get noisier
    :param hyper: benchmark Hyperparams at unit jitter
    :param jitter_factors: multipliers of the response standard deviation
    :return: DataFrame with the posterior AUC and the AUC of uniform random scores per seed and jitter
    """
    rows = []
    for seed in seeds:
        for jitter in jitter_factors:
            jittered = jittered_hyperparams(hyper, jitter)
            grid = build_warp_grid(jittered.n_warps, jittered.max_warp, jittered.warp_variance)
            rng = np.random.default_rng(seed)
            data, truth = simulate(jittered, grid, rng, bg_rate=BENCHMARK_BG_RATE,
                                   width=BENCHMARK_WIDTH * jitter ** 2, unit_offsets=True)
            results = fit_sequence_model(data, hyper=jittered, schedule=schedule, mask_fraction=0.,
                                         random_seed=seed, suffix='jitter{}'.format(jitter),
                                         save_results=save_results, silent_mode=True)
            report = detection_report(results['summaries'][0].samples, truth.events, jittered.duration,
                                      bin_size=bin_size, max_shift_bins=max_shift_bins, posterior=True)
            target = event_rate_vector(truth.events, bin_size, jittered.duration, posterior=False)
            random_auc, _ = shifted_roc_auc(rng.random(len(target)), target, max_shift_bins)
            logger.info('Jitter {}, seed {}: AUC {:.3f} against {:.3f} for random scores'.format(
                jitter, seed, report['auc'], random_auc))
            rows.append({'seed': seed, 'jitter': jitter, 'auc': report['auc'], 'shift': report['shift'],
                         'random_auc': random_auc})
    return pd.DataFrame(rows)


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    save = True  # Whether to write every fit to disk or only the summary tables
    os.makedirs(config.OUTPUT_DIR, exist_ok=True)
    schedule = AnnealSchedule(initial_temp=500., n_stages=10, sweeps_per_stage=10, final_sweeps=50,
                              split_merge_moves=100)
    seeds = [0, 1, 2]

    # Synthetic two-type data at desk scale, fit with a grid of model sizes
    simulation = dict(config.HYPERPARAMS, n_neurons=50, duration=500., n_types=2, n_warps=10, max_warp=3.)
    fits = [(n_types, n_warps) for n_types in [1, 2, 3] for n_warps in [1, 10]]
    table = model_selection(simulation, fits, seeds, schedule, save_results=save)
    helpers.write_frame(os.path.join(config.OUTPUT_DIR, 'model_selection.csv'), table)
    print(table.groupby(['n_types', 'n_warps'])['heldout_log_likelihood'].agg(['mean', 'std']))

    # Detection accuracy on the low-noise benchmark as the sequences get jittered
    benchmark = helpers.hyperparams_from_config(config.HYPERPARAMS)
    jitter_factors = [1., 2., 3., 4.]
    detection = jitter_detection(benchmark, jitter_factors, seeds, schedule, save_results=save)
    helpers.write_frame(os.path.join(config.OUTPUT_DIR, 'jitter_detection.csv'), detection)
    print(detection.groupby('jitter')[['auc', 'random_auc']].agg(['mean', 'std']))

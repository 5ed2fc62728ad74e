#!/usr/bin/env python
# coding: utf-8
import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

import config
import helpers
from data_generators import simulate
from evaluate_detection import detection_report
from exceptions import ConfigError, PPSeqError
from fit_sequences import (PosteriorSample, SpeckledMask, fit_sequence_model, heldout_log_likelihood,
                           schedule_from_config)
from hyperparameter_sweep import hyperparameter_sweep
from models import build_warp_grid

logger = logging.getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """Raises instead of exiting so the caller decides the exit code."""

    def error(self, message):
        raise ConfigError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON configuration merged over the defaults')
    common.add_argument('--seed', type=int, help='master random seed')
    common.add_argument('--threads', type=int, help='parallel shards or jobs')
    common.add_argument('--output-dir', default=config.OUTPUT_DIR, help='where results are written')
    common.add_argument('--mask-fraction', type=float, help='share of the data withheld for validation')
    common.add_argument('--chains', type=int, help='number of independent chains')
    common.add_argument('--verbose', action='store_true', help='log debug messages')

    parser = _ArgumentParser(prog='ppseq', description='Point process model for neural sequences')
    commands = parser.add_subparsers(dest='command', parser_class=_ArgumentParser)
    commands.required = True

    commands.add_parser('generate', parents=[common], help='simulate spikes and ground-truth events')

    fit = commands.add_parser('fit', parents=[common], help='run chains on a spike file')
    fit.add_argument('--spikes', required=True, help='CSV with neuron,time columns')
    fit.add_argument('--resume', action='store_true', help='continue from the experiment checkpoint')

    evaluate = commands.add_parser('evaluate', parents=[common], help='score saved outputs')
    evaluate.add_argument('--events', help='ground-truth events CSV')
    evaluate.add_argument('--samples', nargs='+', default=[], help='posterior sample JSON-lines files')
    evaluate.add_argument('--predictions', help='CSV of externally detected event times (time column)')
    evaluate.add_argument('--spikes', help='spike CSV, required for the heldout score')
    evaluate.add_argument('--mask', help='mask CSV written by fit, required for the heldout score')

    sweep = commands.add_parser('sweep', parents=[common], help='randomized hyperparameter search')
    sweep.add_argument('--spikes', required=True, help='CSV with neuron,time columns')
    return parser


def resolve_config(args):
    resolved = helpers.load_config(args.config)
    overrides = {'seed': args.seed, 'n_threads': args.threads, 'mask_fraction': args.mask_fraction,
                 'n_chains': args.chains}
    resolved.update({key: value for key, value in overrides.items() if value is not None})
    return resolved


def _load_spikes(path, resolved):
    return helpers.parse_spikes(path, n_neurons=resolved['data']['n_neurons'],
                                duration=resolved['data']['duration'])


def run_generate(args, resolved):
    hyper = helpers.hyperparams_from_config(resolved['hyperparams'])
    grid = build_warp_grid(hyper.n_warps, hyper.max_warp, hyper.warp_variance)
    rng = np.random.default_rng(resolved['seed'])
    data, truth = simulate(hyper, grid, rng, **resolved['simulation'])
    os.makedirs(args.output_dir, exist_ok=True)
    helpers.write_spikes(os.path.join(args.output_dir, 'spikes.csv'), data, resolved)
    helpers.write_spikes(os.path.join(args.output_dir, 'labels.csv'), data, resolved, labels=truth.labels)
    helpers.write_events(os.path.join(args.output_dir, 'events.csv'), truth.events, resolved)
    logger.info('Wrote {} spikes and {} events to {}'.format(len(data), len(truth.events), args.output_dir))


def run_fit(args, resolved):
    data = _load_spikes(args.spikes, resolved)
    if args.config:
        helpers.check_data_matches(helpers.read_overrides(args.config).get('hyperparams', {}), data)
    hyper = helpers.hyperparams_from_config(resolved['hyperparams'], n_neurons=data.n_neurons,
                                            duration=data.duration)
    provenance = dict(resolved, hyperparams=hyper.as_dict())
    results = fit_sequence_model(data, hyper=hyper, schedule=schedule_from_config(resolved['anneal_schedule']),
                                 mask_fraction=resolved['mask_fraction'],
                                 mask_block_length=resolved['mask_block_length'], n_chains=resolved['n_chains'],
                                 n_threads=resolved['n_threads'], n_samples=resolved['n_samples'],
                                 thin=resolved['thin'], random_seed=resolved['seed'], output_dir=args.output_dir,
                                 resume=args.resume, silent_mode=config.SILENT_MODE, provenance=provenance,
                                 order=resolved['sweep_order'])
    logger.info('Results saved in {}'.format(results['experiment_folder']))


def _sample_config(header):
    return (header.get('config') or {}).get('hyperparams') or {}


def run_evaluate(args, resolved):
    if not args.samples and not args.predictions:
        raise ConfigError('evaluate needs --samples or --predictions')
    headers, samples = [], []
    for path in args.samples:
        header, items = helpers.read_samples(path)
        headers.append(header)
        samples.extend(PosteriorSample.from_dict(item) for item in items)
    hyper_values = _sample_config(headers[0]) if headers else resolved['hyperparams']
    duration = float(hyper_values.get('duration', resolved['hyperparams']['duration']))
    rows = []
    os.makedirs(args.output_dir, exist_ok=True)

    if args.events:
        truth = helpers.read_events(args.events)
        if samples:
            report = detection_report(samples, truth, duration, resolved['bin_size'], resolved['max_shift_bins'],
                                      posterior=True)
            rows.append({'source': 'posterior', 'metric': 'auc', 'value': report['auc'], 'shift': report['shift']})
            helpers.write_frame(os.path.join(args.output_dir, 'roc_posterior.csv'), report['roc'], resolved)
        if args.predictions:
            predicted = helpers.read_events(args.predictions)
            report = detection_report(predicted, truth, duration, resolved['bin_size'],
                                      resolved['max_shift_bins'], posterior=False)
            rows.append({'source': 'predictions', 'metric': 'auc', 'value': report['auc'],
                         'shift': report['shift']})
            helpers.write_frame(os.path.join(args.output_dir, 'roc_predictions.csv'), report['roc'], resolved)

    if args.spikes and args.mask and samples:
        data = _load_spikes(args.spikes, resolved)
        hyper = helpers.hyperparams_from_config(hyper_values or resolved['hyperparams'],
                                                n_neurons=data.n_neurons, duration=data.duration)
        grid = build_warp_grid(hyper.n_warps, hyper.max_warp, hyper.warp_variance)
        mask = SpeckledMask.from_frame(helpers.read_frame(args.mask), data.n_neurons, data.duration)
        rows.append({'source': 'posterior', 'metric': 'heldout_log_likelihood',
                     'value': heldout_log_likelihood(data, mask, samples, grid), 'shift': np.nan})

    if not rows:
        raise ConfigError('Nothing to evaluate: pass --events, or --spikes with --mask and --samples')
    frame = pd.DataFrame(rows)
    helpers.write_frame(os.path.join(args.output_dir, 'evaluation.csv'), frame, resolved)
    for row in rows:
        logger.info('{source} {metric}: {value:.4f}'.format(**row))


def run_sweep(args, resolved):
    data = _load_spikes(args.spikes, resolved)
    os.makedirs(args.output_dir, exist_ok=True)
    base = dict(resolved['hyperparams'], **resolved['sweep_fixed'])
    output_path = os.path.join(args.output_dir, 'sweep_seed{}.csv'.format(resolved['seed']))
    results = hyperparameter_sweep(data, search_space=resolved['search_space'], n_configs=resolved['n_configs'],
                                   schedule=schedule_from_config(resolved['anneal_schedule']),
                                   rng=np.random.default_rng(resolved['seed']), base=base,
                                   mask_fraction=resolved['mask_fraction'],
                                   mask_block_length=resolved['mask_block_length'], n_jobs=resolved['n_threads'],
                                   seed=resolved['seed'], output_path=output_path, provenance=resolved)
    logger.info('Best configuration:\n{}'.format(results.head(1).T))


COMMANDS = {'generate': run_generate, 'fit': run_fit, 'evaluate': run_evaluate, 'sweep': run_sweep}


def cli_main(argv=None):
    """
    :param argv: command-line arguments without the program name
    :return: exit code, 0 on success
    """
    try:
        args = build_parser().parse_args(argv)
    except PPSeqError as error:
        logging.basicConfig(format='%(levelname)s %(name)s: %(message)s')
        logger.error('ConfigError: {}'.format(error))
        return error.exit_code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        resolved = resolve_config(args)
        COMMANDS[args.command](args, resolved)
    except PPSeqError as error:
        logger.error('{}: {}'.format(type(error).__name__, error))
        return error.exit_code
    except OSError as error:
        logger.error('IOError: {}'.format(error))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(cli_main())

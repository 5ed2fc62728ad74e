# !/usr/bin/env python
# coding: utf-8
import os

EXPERIMENT_SUFFIX = ''
RANDOM_SEED = 29  # To ensure reproducibility of results
FORMAT_VERSION = 1  # Bump whenever sample, checkpoint or CSV layouts change

DEBUG = False  # Logs extra per-sweep information
SILENT_MODE = False  # Suppress progress bars
OUTPUT_DIR = os.environ.get('PPSEQ_OUTPUT_DIR', 'experiments')

# Model hyperparameters. Defaults follow the synthetic benchmark settings (low-noise regime)
HYPERPARAMS = {'n_neurons': 100,
               'duration': 2000.,
               'n_types': 1,
               'psi': 0.02,  # sequence events per second
               'alpha': 225.,  # amplitude gamma shape
               'beta': 7.5,  # amplitude gamma rate
               'gamma': 3.,  # Dirichlet concentration of type probabilities
               'gamma_bg': 1.,  # background Dirichlet concentration, only used when simulating
               'phi': 1.,  # Dirichlet concentration of neuron weights
               'nu': 4.,  # widths, scaled inverse chi-squared degrees of freedom
               'sigma2': 0.04,  # widths, scaled inverse chi-squared scale
               'kappa': 0.04,  # delays, precision scale
               'alpha_bg': 30.,  # background rate gamma shape
               'beta_bg': 10.,  # background rate gamma rate
               'n_warps': 1,
               'max_warp': 1.,
               'warp_variance': 100.,
               'window': 5.}  # split-merge pairing window (sec)

ANNEAL_SCHEDULE = {'initial_temp': 500.,
                   'n_stages': 20,
                   'sweeps_per_stage': 100,
                   'final_sweeps': 100,
                   'split_merge_moves': 1000}

# Chain settings
N_SAMPLES = None  # None keeps the final half of the post-anneal sweeps
THIN = 1
N_CHAINS = 1
N_THREADS = 1
SWEEP_ORDER = 'time'  # 'time', 'reverse' or 'random'
CHECKPOINT_EVERY = 10  # sweeps between checkpoint writes
PRUNE_SIGMAS = 12.  # clusters further than this many response widths from a spike are not scored, None scores all

# Speckled holdout
MASK_FRACTION = 0.075
MASK_BLOCK_LENGTH = 1.

# Detection evaluation
BIN_SIZE = 0.2
MAX_SHIFT_BINS = 20

# Hyperparameter sweep
N_CONFIGS = 20
SEARCH_SPACE = {'n_types': {'type': 'choice', 'values': [1, 2, 3, 4]},
                'max_warp': {'type': 'uniform', 'low': 1., 'high': 1.5},
                'amplitude_mean': {'type': 'log_uniform', 'low': 1e2, 'high': 1e4},
                'psi': {'type': 'log_uniform', 'low': 1e-3, 'high': 1e-1},
                'width': {'type': 'log_uniform', 'low': 1e-1, 'high': 1e1}}
SWEEP_FIXED = {'gamma': 3., 'phi': 1., 'nu': 4., 'n_warps': 10, 'warp_variance': 100.}

# Sampler validation
GEWEKE_BATCHES = 50  # batches for the batch-means standard error of successive-conditional draws

import itertools

import numpy as np
import pytest
from hypothesis import settings

from collapsed_gibbs import ChainState, log_joint_partition
from data_generators import simulate
from models import GlobalParams, Hyperparams, build_warp_grid

settings.register_profile('ppseq', max_examples=25, deadline=None)
settings.load_profile('ppseq')


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_hyper():
    return Hyperparams(n_neurons=5, duration=20., n_types=2, psi=0.3, alpha=12., beta=1., gamma=3., phi=1.,
                       nu=4., sigma2=0.05, kappa=1., alpha_bg=4., beta_bg=4., n_warps=3, max_warp=1.5,
                       window=2.)


@pytest.fixture
def tiny_grid(tiny_hyper):
    return build_warp_grid(tiny_hyper.n_warps, tiny_hyper.max_warp, tiny_hyper.warp_variance)


@pytest.fixture
def tiny_simulation(tiny_hyper, tiny_grid):
    return simulate(tiny_hyper, tiny_grid, np.random.default_rng(3))


@pytest.fixture
def tiny_data(tiny_simulation):
    return tiny_simulation[0]


def make_params(n_neurons, n_types=1, bg_rate=1., delay=0., width=0.25, weights=None):
    """Hand-set global parameters with uniform neuron weights unless given."""
    if weights is None:
        weights = np.full((n_types, n_neurons), 1. / n_neurons)
    return GlobalParams(np.full(n_neurons, float(bg_rate)), np.full(n_types, 1. / n_types), weights,
                        np.full((n_neurons, n_types), float(delay)), np.full((n_neurons, n_types), float(width)))


def canonical(labels):
    """Cluster ids relabeled by first appearance so equal partitions compare equal."""
    lookup = {}
    return tuple(0 if k == 0 else lookup.setdefault(k, len(lookup) + 1) for k in labels)


def enumerate_labelings(n_spikes):
    return sorted({canonical(labels) for labels in itertools.product(range(n_spikes + 1), repeat=n_spikes)})


def exact_partition_posterior(neurons, times, params, grid, hyper):
    """Posterior probability of every partition of a handful of spikes, by enumeration."""
    labelings = enumerate_labelings(len(times))
    log_joint = np.array([log_joint_partition(ChainState(neurons, times, params, grid, hyper.duration,
                                                         assignments=labels), hyper)
                          for labels in labelings])
    probs = np.exp(log_joint - log_joint.max())
    return dict(zip(labelings, probs / probs.sum()))

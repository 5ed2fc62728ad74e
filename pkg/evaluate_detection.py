#!/usr/bin/env python
# coding: utf-8
import logging

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn import metrics

import config
from exceptions import DegenerateInputError

logger = logging.getLogger(__name__)


def n_bins(duration, bin_size):
    return int(np.ceil(round(duration / bin_size, 9)))


def _event_times(item):
    """Times of a ground-truth or sampled event collection: LatentEvents, a PosteriorSample or plain floats."""
    item = getattr(item, 'events', item)
    return np.array([getattr(e, 'time', e) for e in item], dtype=float)


def _occupied_bins(times, bin_size, duration):
    occupied = np.zeros(n_bins(duration, bin_size))
    times = times[(times >= 0) & (times <= duration)]
    index = np.floor(np.round(times / bin_size, 9)).astype(np.int64)
    occupied[np.minimum(index, len(occupied) - 1)] = 1.
    return occupied


def event_rate_vector(events, bin_size=config.BIN_SIZE, duration=None, posterior=None):
    """
    Per-bin detection scores on half-open bins [i * bin_size, (i + 1) * bin_size)
    :param events: ground-truth events (or times), or one event collection per posterior sample
    :param bin_size: bin width (sec)
    :param duration: recording length T
    :param posterior: True for a list of samples; guessed from the input when None
    :return: binary indicators for ground truth, the fraction of samples with an event in the bin otherwise
    """
    if not bin_size > 0:
        raise ValueError('bin_size must be strictly positive')
    if duration is None:
        raise ValueError('duration is required')
    events = list(events)
    if posterior is None:
        posterior = bool(events) and (hasattr(events[0], 'events') or isinstance(events[0], (list, tuple,
                                                                                             np.ndarray)))
    if not posterior:
        return _occupied_bins(_event_times(events), bin_size, duration)
    if not events:
        return np.zeros(n_bins(duration, bin_size))
    return np.mean([_occupied_bins(_event_times(sample), bin_size, duration) for sample in events], axis=0)


def _check_truth(truth):
    truth = np.asarray(truth).astype(bool)
    n_positive = int(truth.sum())
    if n_positive == 0 or n_positive == len(truth):
        raise DegenerateInputError('ROC needs both positive and negative bins, got {} of {} positive'.format(
            n_positive, len(truth)))
    return truth


def roc_auc(scores, truth):
    """
    Area under the ROC curve from the Mann-Whitney rank statistic; ties count one half
    :param scores: per-bin scores
    :param truth: per-bin binary labels with both classes present
    """
    truth = _check_truth(truth)
    ranks = rankdata(np.asarray(scores, dtype=float))
    n_positive = truth.sum()
    n_negative = len(truth) - n_positive
    return float((ranks[truth].sum() - n_positive * (n_positive + 1) / 2.) / (n_positive * n_negative))


def align(scores, truth, shift):
    """
    Overlapping parts of scores delayed by `shift` bins and the truth: shifted[i] = scores[i - shift].
    A positive shift moves the scores later in time.
    """
    scores, truth = np.asarray(scores), np.asarray(truth)
    if len(scores) != len(truth):
        raise ValueError('scores and truth must have the same length')
    if abs(shift) >= len(scores):
        raise ValueError('Shift {} leaves no overlap between {} bins'.format(shift, len(scores)))
    if shift >= 0:
        return scores[:len(scores) - shift], truth[shift:]
    return scores[-shift:], truth[:len(truth) + shift]


def shifted_roc_auc(scores, truth, max_shift_bins=config.MAX_SHIFT_BINS):
    """
    Best AUC over integer shifts of the scores in [-max_shift_bins, max_shift_bins]
    :return: (AUC, shift); ties go to the smallest absolute shift, then the negative one
    """
    truth = _check_truth(truth)
    reach = min(max_shift_bins, len(truth) - 1)
    best_auc, best_shift = -np.inf, 0
    for shift in sorted(range(-reach, reach + 1), key=lambda s: (abs(s), s)):
        shifted, target = align(scores, truth, shift)
        try:
            auc = roc_auc(shifted, target)
        except DegenerateInputError:
            continue
        if auc > best_auc:
            best_auc, best_shift = auc, shift
    return best_auc, best_shift


def roc_points(scores, truth, shift=0):
    """Threshold-sweep ROC curve of the aligned scores, ready to be written as CSV."""
    shifted, target = align(scores, truth, shift)
    false_positive_rate, true_positive_rate, thresholds = metrics.roc_curve(_check_truth(target), shifted)
    return pd.DataFrame({'fpr': false_positive_rate, 'tpr': true_positive_rate, 'threshold': thresholds})


def detection_report(predicted, truth_events, duration, bin_size=config.BIN_SIZE,
                     max_shift_bins=config.MAX_SHIFT_BINS, posterior=None):
    """
    Shifted ROC evaluation of predicted event times against the ground truth
    :param predicted: posterior samples, or a single collection of predicted times for an external detector
    :return: dict with the AUC, the shift and the ROC points at that shift
    """
    scores = event_rate_vector(predicted, bin_size, duration, posterior=posterior)
    truth = event_rate_vector(truth_events, bin_size, duration, posterior=False)
    auc, shift = shifted_roc_auc(scores, truth, max_shift_bins)
    logger.info('Detection AUC {:.4f} at a shift of {} bins'.format(auc, shift))
    return {'auc': auc, 'shift': shift, 'n_bins': len(truth), 'n_positive': int(truth.sum()),
            'roc': roc_points(scores, truth, shift)}

"""
Class weights, the masked negative log-likelihood shared by every training
loss, and rank-based AUC.
"""

import logging

import numpy as np
from sklearn.metrics import roc_auc_score
from sklearn.utils.class_weight import compute_class_weight

from kegraph import numeric_core as nc
from kegraph.errors import DimensionError, MetricError, WeightError

logger = logging.getLogger(__name__)

CLASSES = np.array([0, 1])


def class_weights(labels):
    """
    Inverse-frequency weights with sample mean 1 ("balanced").

    Returns:
        array of shape (2,): (w_non_fraud, w_fraud)
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=2)
    if counts.size > 2 or np.any(counts[:2] == 0):
        raise WeightError(f"Class weights need both classes present, got counts {counts.tolist()}")
    return compute_class_weight("balanced", classes=CLASSES, y=labels)


def one_hot(labels):
    return np.eye(2)[np.asarray(labels, dtype=np.int64)]


def weighted_nll(probs, labels, weights):
    """
    (1/N) sum_v w_{y_v} * (-log probs[v, y_v]).

    Only the probability of each node's own label is passed through log.
    """
    probs = probs if isinstance(probs, nc.Tensor) else nc.Tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape != (len(labels), 2):
        raise DimensionError(f"probabilities have shape {probs.shape}, expected {(len(labels), 2)}")
    target = nc.row_sum(nc.mul(probs, nc.Tensor(one_hot(labels))))
    per_node = nc.mul(nc.scale(nc.log(target), -1.0),
                      nc.Tensor(np.asarray(weights, dtype=np.float64)[labels][:, None]))
    return nc.scale(nc.sum_all(per_node), 1.0 / len(labels))


def weighted_cross_entropy(probs, labels, weights=None):
    """Weighted cross-entropy; ``weights`` default to class_weights(labels)."""
    weights = class_weights(labels) if weights is None else weights
    return weighted_nll(probs, labels, weights)


def auc(scores, labels):
    """Probability that a random fraud outranks a random non-fraud; ties count 0.5."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise MetricError(f"AUC needs both classes, got only {np.unique(labels).tolist()}")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))

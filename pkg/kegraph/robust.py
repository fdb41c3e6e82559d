"""
Hidden-fraud robust two-stage learning.

Stage I trains a throwaway reference model with a confidence regularizer,
reads estimated Bayes labels off it and sieves out unreliable samples, then
fits a one-layer MW-GCN transition model that predicts, per node, the hidden
fraud rate gamma = P(noisy non-fraud | Bayes fraud). Stage II trains the base
model with the forward-corrected loss built from those rates.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from kegraph import numeric_core as nc
from kegraph.errors import ConfigError, DomainError, NumericError, SieveError, TrainingError
from kegraph.metrics import class_weights, weighted_nll
from kegraph.model import glorot, mwgcn_layer
from kegraph.trainer import BaseModelTrainer, TrainingConfig

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SieveConfig:
    beta: float = 2.0
    warmup_fraction: float = 0.1
    reference_epochs: int = 100

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"robust.beta must be >= 0, got {self.beta}")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError(f"robust.warmup_fraction must be in [0, 1], got {self.warmup_fraction}")
        if self.reference_epochs < 1:
            raise ConfigError(f"robust.reference_epochs must be >= 1, got {self.reference_epochs}")

    @property
    def warmup_epochs(self):
        return math.ceil(self.warmup_fraction * self.reference_epochs)

    def beta_at(self, epoch):
        """
        Zero during the warm-up epochs, then a linear ramp that reaches the
        full beta on the last reference epoch.
        """
        if epoch < self.warmup_epochs:
            return 0.0
        ramp = max(1, self.reference_epochs - self.warmup_epochs)
        return self.beta * min(1.0, (epoch - self.warmup_epochs + 1) / ramp)


@dataclass(frozen=True)
class SievedSample:
    node_id: int
    noisy_label: int
    bayes_label: int
    kept: bool


@dataclass
class SieveResult:
    samples: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def kept(self):
        return [s for s in self.samples if s.kept]


def regularized_loss(probs, labels, weights, beta):
    """
    Sample-weighted confidence-regularized loss used to train the reference model:
    (1/N) sum_v w_{y_v} * (CE(p_v, y_v) - beta * mean_c CE(p_v, c)).

    For beta <= 2 every per-node term decreases in the probability of the
    node's own label, so a confidently wrong node is never a minimum.
    """
    clipped = nc.clip(probs, PROB_FLOOR, 1.0)
    loss = weighted_nll(clipped, labels, weights)
    if beta == 0:
        return loss
    node_weights = nc.Tensor(np.asarray(weights, dtype=np.float64)[np.asarray(labels, dtype=np.int64)][:, None])
    # -beta * mean_c(-log p_vc) = beta / 2 * sum_c log p_vc
    regularizer = nc.sum_all(nc.mul(nc.row_sum(nc.log(clipped)), node_weights))
    return nc.add(loss, nc.scale(regularizer, beta / (2 * len(labels))))


def per_sample_regularized_loss(probs, labels, weights, beta):
    """Sieve score w_{y_v} * CE(p_v, y_v) - beta * mean_c CE(p_v, c); kept when <= 0."""
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, 1.0)
    labels = np.asarray(labels, dtype=np.int64)
    own = -np.asarray(weights)[labels] * np.log(probs[np.arange(len(labels)), labels])
    return own + beta * np.log(probs).mean(axis=1)


def collect_bayes_labels(model_factory, subgraphs, x_att, x_ke, train_idx, noisy_labels, config,
                         training_config, clean_labels=None, valid_idx=None, valid_labels=None):
    """
    Estimate Bayes-optimal labels for the training nodes and sieve them.

    Args:
        model_factory: Callable returning a fresh KeModel for the reference run.
        subgraphs, x_att, x_ke: Base-model inputs.
        train_idx: Training company indices.
        noisy_labels: Observed labels of ``train_idx`` (same order).
        config: SieveConfig.
        training_config: Optimizer settings for the reference run.
        clean_labels: Ground-truth labels of ``train_idx`` for diagnostics, if known.
        valid_idx / valid_labels: When given, the reference epoch with the best
            validation AUC is the one read; otherwise the last epoch.

    Returns:
        SieveResult with one SievedSample per training node.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    weights = class_weights(noisy_labels)

    reference = model_factory()
    trainer = BaseModelTrainer(reference, subgraphs, x_att, x_ke, TrainingConfig(
        max_epochs=config.reference_epochs,
        patience=config.reference_epochs,
        learning_rate=training_config.learning_rate,
        optimizer=training_config.optimizer,
        progress=training_config.progress,
    ))
    trainer.fit(train_idx, lambda probs, epoch: regularized_loss(probs, noisy_labels, weights,
                                                                 config.beta_at(epoch)),
                valid_idx=valid_idx, valid_labels=valid_labels, early_stopping=valid_idx is not None,
                desc="Reference model")
    probs = trainer.predict()[0][train_idx]
    bayes = probs.argmax(axis=1)
    if config.beta == 0:
        kept = np.ones(len(train_idx), dtype=bool)
    else:
        kept = per_sample_regularized_loss(probs, noisy_labels, weights, config.beta) <= 0

    samples = [SievedSample(int(node), int(noisy), int(b), bool(k))
               for node, noisy, b, k in zip(train_idx, noisy_labels, bayes, kept)]
    diagnostics = sieve_diagnostics(noisy_labels, bayes, kept, clean_labels)
    logger.info(f"Sieve kept {diagnostics['n_kept']} of {diagnostics['n_train']} training nodes "
                f"({diagnostics['kept_bayes_fraud']} estimated frauds)")
    if diagnostics["kept_bayes_fraud"] == 0 or diagnostics["kept_bayes_non_fraud"] == 0:
        raise SieveError(f"Sieve kept a single estimated class: {diagnostics}")
    return SieveResult(samples, diagnostics)


def sieve_diagnostics(noisy_labels, bayes_labels, kept, clean_labels=None):
    noisy_labels, bayes_labels, kept = map(np.asarray, (noisy_labels, bayes_labels, kept))
    diagnostics = {
        "n_train": int(len(kept)),
        "n_kept": int(kept.sum()),
        "kept_noisy_non_fraud": int((kept & (noisy_labels == 0)).sum()),
        "kept_noisy_fraud": int((kept & (noisy_labels == 1)).sum()),
        "kept_bayes_non_fraud": int((kept & (bayes_labels == 0)).sum()),
        "kept_bayes_fraud": int((kept & (bayes_labels == 1)).sum()),
        "kept_agreement_noisy": float(np.mean(bayes_labels[kept] == noisy_labels[kept])) if kept.any() else float("nan"),
    }
    if clean_labels is not None:
        clean_labels = np.asarray(clean_labels)
        agree = bayes_labels == clean_labels
        diagnostics["kept_agreement_clean"] = float(agree[kept].mean()) if kept.any() else float("nan")
        diagnostics["dropped_agreement_clean"] = float(agree[~kept].mean()) if (~kept).any() else float("nan")
    return diagnostics


# =============================================================================
# Transition model
# =============================================================================

@dataclass(frozen=True)
class TransitionConfig:
    hidden: int = 32
    epochs: int = 200
    learning_rate: float = 0.01
    epsilon: float = 1e-6
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.epsilon < 0.5:
            raise ConfigError(f"robust.epsilon must be in (0, 0.5), got {self.epsilon}")

    @classmethod
    def from_section(cls, section):
        return cls(hidden=section["transition_hidden"], epochs=section["transition_epochs"],
                   learning_rate=section["transition_lr"], epsilon=section["epsilon"])


class TransitionModel:
    """One ReLU MW-GCN layer over the sum-up graph and a sigmoid head, clamped to [eps, 1 - eps]."""

    def __init__(self, input_dim, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params = {
            "gcn.W": glorot(rng, input_dim, config.hidden),
            "head.W": glorot(rng, config.hidden, 1),
            "head.b": np.zeros((1, 1)),
        }
        self.loss_history = []

    def gamma(self, sum_graph, x, params=None):
        params = params or {name: nc.Tensor(value) for name, value in self.params.items()}
        h = mwgcn_layer(x, sum_graph.normalized, params["gcn.W"], activation="relu")
        logits = nc.add(nc.matmul(h, params["head.W"]), params["head.b"])
        return nc.clip(nc.sigmoid(logits), self.config.epsilon, 1.0 - self.config.epsilon)

    def predict(self, sum_graph, x):
        return np.array(self.gamma(sum_graph, nc.Tensor(x)).values[:, 0])


def bernoulli_nll(gamma, noisy_labels):
    """-(1/m) sum [noisy=0] log gamma + [noisy=1] log(1 - gamma)."""
    probs = nc.concat([gamma, nc.shift(nc.scale(gamma, -1.0), 1.0)], axis=1)
    return weighted_nll(probs, noisy_labels, np.ones(2))


def train_transition_model(samples, sum_graph, x_att, config, seed=0, progress=False):
    """
    Fit the transition model on kept samples whose estimated Bayes label is fraud.

    Returns:
        Frozen TransitionModel.
    """
    selected = [s for s in samples if s.kept and s.bayes_label == 1]
    if not selected:
        raise TrainingError("No kept sample has an estimated Bayes label of fraud; "
                            "the transition model has nothing to learn from")
    nodes = np.array([s.node_id for s in selected], dtype=np.int64)
    noisy = np.array([s.noisy_label for s in selected], dtype=np.int64)
    x = nc.Tensor(x_att)

    model = TransitionModel(x.shape[1], config, seed)
    optimizer = nc.Optimizer(nc.OptimizerConfig(config.optimizer, config.learning_rate))
    logger.info(f"Training transition model on {len(nodes)} samples "
                f"({int((noisy == 0).sum())} observed as non-fraud)")
    for _ in tqdm(range(config.epochs), desc="Transition model", disable=not progress):
        with nc.ComputationTape() as tape:
            tensors = {name: nc.Tensor(value) for name, value in model.params.items()}
            loss = bernoulli_nll(nc.take_rows(model.gamma(sum_graph, x, tensors), nodes), noisy)
        grads = nc.backward(tape, loss, tensors)
        model.params = optimizer.step(model.params, grads)
        model.loss_history.append(loss.item())
    return model


@dataclass(frozen=True)
class TransitionState:
    """Per training node hidden-fraud rates; read-only during stage II."""

    node_ids: np.ndarray
    gamma: np.ndarray

    def matrix(self, position):
        return transition_matrix(float(self.gamma[position]))


def transition_matrix(gamma):
    """[[1, 0], [gamma, 1 - gamma]] with rows and columns ordered (non-fraud, fraud)."""
    if not 0 < gamma < 1:
        raise DomainError(f"Hidden fraud rate must be in (0, 1), got {gamma}")
    return np.array([[1.0, 0.0], [gamma, 1.0 - gamma]])


def forward_corrected_loss(probs, noisy_labels, gamma, weights):
    """
    Weighted NLL of the corrected prediction p = y_hat . T(v).

    p_v = (y_hat_v0 + y_hat_v1 * gamma_v, y_hat_v1 * (1 - gamma_v)). With gamma
    all zero this is exactly the weighted cross-entropy of ``probs``.
    """
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1, 1)
    if np.any(gamma < 0) or np.any(gamma >= 1):
        raise DomainError("Hidden fraud rates must lie in [0, 1)")
    probs = probs if isinstance(probs, nc.Tensor) else nc.Tensor(probs)
    non_fraud = nc.take_columns(probs, [0])
    fraud = nc.take_columns(probs, [1])
    corrected = nc.concat([
        nc.add(non_fraud, nc.mul(fraud, nc.Tensor(gamma))),
        nc.mul(fraud, nc.Tensor(1.0 - gamma)),
    ], axis=1)
    if np.any(corrected.values <= 0):
        raise NumericError("Corrected prediction has a non-positive component")
    return weighted_nll(corrected, noisy_labels, weights)


# =============================================================================
# Audit files
# =============================================================================

def write_sieve_csv(samples, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "node_id": [s.node_id for s in samples],
        "noisy_label": [s.noisy_label for s in samples],
        "bayes_label": [s.bayes_label for s in samples],
        "kept": [int(s.kept) for s in samples],
    })
    frame.to_csv(path, index=False)


def write_gamma_csv(state, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "node_id": state.node_ids,
        "gamma_hat": state.gamma,
        "t10": state.gamma,
        "t11": 1.0 - state.gamma,
    })
    frame.to_csv(path, index=False, float_format="%.10g")

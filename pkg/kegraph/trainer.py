"""
Full-batch training loop for KeModel with early stopping on validation AUC.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from kegraph import numeric_core as nc
from kegraph.errors import TrainingError
from kegraph.metrics import auc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    max_epochs: int = 300
    patience: int = 30
    learning_rate: float = 0.01
    optimizer: str = "adam"
    progress: bool = False


@dataclass
class TrainingResult:
    best_epoch: int
    best_score: float
    criterion: str
    epochs_run: int
    curves: list = field(default_factory=list)


class BaseModelTrainer:
    """
    Trains a KeModel in place on fixed graph inputs.

    Args:
        model: KeModel whose ``params`` are updated.
        subgraphs: One CompanySubgraph per model meta-path.
        x_att: Attribute matrix (or None when the branch is disabled).
        x_ke: Knowledge-embedding matrix (or None).
        config: TrainingConfig.
    """

    def __init__(self, model, subgraphs, x_att, x_ke, config):
        self.model = model
        self.subgraphs = subgraphs
        self.x_att = None if x_att is None else nc.Tensor(x_att)
        self.x_ke = None if x_ke is None else nc.Tensor(x_ke)
        self.config = config

    def predict(self):
        y_hat, trace = self.model.forward(self.subgraphs, self.x_att, self.x_ke)
        return np.array(y_hat.values), trace

    def fit(self, train_idx, loss_fn, valid_idx=None, valid_labels=None, early_stopping=True, desc="Training"):
        """
        Args:
            train_idx: Company indices whose predictions enter the loss.
            loss_fn: Callable (train probabilities Tensor, epoch) -> scalar Tensor.
            valid_idx / valid_labels: Validation nodes for model selection.
            early_stopping: Restore the best epoch and stop after ``patience``
                epochs without improvement; when False the final parameters are kept.

        Returns:
            TrainingResult with one curve entry per epoch run.
        """
        if len(train_idx) == 0:
            raise TrainingError("Training split is empty")
        train_idx = np.asarray(train_idx, dtype=np.int64)
        optimizer = nc.Optimizer(nc.OptimizerConfig(self.config.optimizer, self.config.learning_rate))

        use_auc = valid_idx is not None and len(np.unique(valid_labels)) == 2
        if early_stopping and valid_idx is not None and not use_auc:
            logger.warning("Validation split has a single class; selecting epochs by training loss")
        criterion = "valid_auc" if use_auc else "train_loss"

        best_score, best_epoch, best_params, wait = -np.inf, -1, None, 0
        curves = []
        for epoch in tqdm(range(self.config.max_epochs), desc=desc, disable=not self.config.progress):
            with nc.ComputationTape() as tape:
                tensors = self.model.tensors()
                y_hat, _ = self.model.forward(self.subgraphs, self.x_att, self.x_ke, params=tensors)
                loss = loss_fn(nc.take_rows(y_hat, train_idx), epoch)
            grads = nc.backward(tape, loss, tensors)

            valid_auc = auc(y_hat.values[valid_idx, 1], valid_labels) if use_auc else float("nan")
            curves.append({"epoch": epoch, "train_loss": loss.item(), "valid_auc": valid_auc})

            if early_stopping:
                score = valid_auc if use_auc else -loss.item()
                if score > best_score:
                    best_score, best_epoch, wait = score, epoch, 0
                    best_params = {name: value.copy() for name, value in self.model.params.items()}
                else:
                    wait += 1
                    if wait >= self.config.patience:
                        logger.info(f"Early stopping at epoch {epoch} (best epoch {best_epoch})")
                        break
            self.model.params = optimizer.step(self.model.params, grads)

        if early_stopping and best_params is not None:
            self.model.params = best_params
        else:
            best_epoch = len(curves) - 1
            best_score = -curves[-1]["train_loss"] if curves else float("nan")
        return TrainingResult(best_epoch=best_epoch, best_score=float(best_score), criterion=criterion,
                              epochs_run=len(curves), curves=curves)

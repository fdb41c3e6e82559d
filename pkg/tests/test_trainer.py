import numpy as np
import pytest
import scipy.sparse as sp

from kegraph.errors import TrainingError
from kegraph.metapath import CompanySubgraph, MultiPathWeightMatrix
from kegraph.metrics import auc, class_weights, weighted_nll
from kegraph.model import KeModel, ModeFlags, ModelConfig
from kegraph.trainer import BaseModelTrainer, TrainingConfig

N_NODES = 12
TRAIN = np.arange(8)
VALID = np.arange(8, 12)


@pytest.fixture
def setup(rng):
    ring = np.roll(np.eye(N_NODES, dtype=np.int64), 1, axis=1)
    graph = CompanySubgraph(N_NODES, MultiPathWeightMatrix(sp.csr_matrix(ring + ring.T)), "RPT")
    labels = np.array([0, 1, 0, 0, 1, 0, 0, 1, 0, 1, 0, 1])
    x_att = rng.normal(size=(N_NODES, 4)) + labels[:, None]
    model = KeModel(ModelConfig(hidden_dim=4), ModeFlags.from_mode("wo_ke"), ["RPT"], {"att": 4}, seed=1)
    return model, [graph], x_att, labels


def make_loss(labels):
    weights = class_weights(labels[TRAIN])
    return lambda probs, epoch: weighted_nll(probs, labels[TRAIN], weights)


def test_early_stopping_restores_best_epoch(setup):
    model, graphs, x_att, labels = setup
    trainer = BaseModelTrainer(model, graphs, x_att, None,
                               TrainingConfig(max_epochs=200, patience=5, learning_rate=0.05))
    result = trainer.fit(TRAIN, make_loss(labels), VALID, labels[VALID])
    assert result.criterion == "valid_auc"
    assert result.epochs_run == len(result.curves)
    assert 0 <= result.best_epoch < result.epochs_run
    if result.epochs_run < 200:
        assert result.epochs_run - 1 - result.best_epoch == 5
    probs, _ = trainer.predict()
    assert auc(probs[VALID, 1], labels[VALID]) == result.curves[result.best_epoch]["valid_auc"]
    assert result.best_score == result.curves[result.best_epoch]["valid_auc"]


def test_without_early_stopping_runs_every_epoch(setup):
    model, graphs, x_att, labels = setup
    trainer = BaseModelTrainer(model, graphs, x_att, None,
                               TrainingConfig(max_epochs=30, learning_rate=0.05))
    result = trainer.fit(TRAIN, make_loss(labels), early_stopping=False)
    assert result.epochs_run == 30
    assert result.best_epoch == 29
    losses = [entry["train_loss"] for entry in result.curves]
    assert losses[-1] < losses[0]
    assert np.isnan(result.curves[0]["valid_auc"])


def test_single_class_validation_falls_back_to_loss(setup, caplog):
    model, graphs, x_att, labels = setup
    trainer = BaseModelTrainer(model, graphs, x_att, None, TrainingConfig(max_epochs=5))
    result = trainer.fit(TRAIN, make_loss(labels), np.array([8, 10]), np.array([0, 0]))
    assert result.criterion == "train_loss"
    assert "single class" in caplog.text


def test_empty_training_split(setup):
    model, graphs, x_att, labels = setup
    trainer = BaseModelTrainer(model, graphs, x_att, None, TrainingConfig(max_epochs=5))
    with pytest.raises(TrainingError):
        trainer.fit(np.array([], dtype=int), make_loss(labels))

"""
KeGCN base network: per-branch, per-meta-path MW-GCN stacks fused by
relation attention and embedding attention, then a two-column classifier.

Classifier columns are ordered (non-fraud, fraud).
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from kegraph import numeric_core as nc
from kegraph.errors import ConfigError, ContractError, DimensionError, ParseError

logger = logging.getLogger(__name__)

BRANCHES = ("ke", "att")
MODES = ("full", "wo_ke", "wo_attr", "wo_attn", "wo_robust", "mwgcn_sum")
ROW_SUM_TOLERANCE = 1e-9
ACTIVATIONS = {
    "relu": nc.relu,
    "tanh": nc.tanh,
    "sigmoid": nc.sigmoid,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class ModeFlags:
    use_ke: bool = True
    use_attr: bool = True
    use_attention: bool = True
    robust: bool = True
    sum_graph_only: bool = False

    @classmethod
    def from_mode(cls, mode):
        if mode not in MODES:
            raise ConfigError(f"Unknown mode '{mode}'. Choose from: {', '.join(MODES)}")
        if mode == "wo_ke":
            return cls(use_ke=False)
        if mode == "wo_attr":
            return cls(use_attr=False)
        if mode == "wo_attn":
            return cls(use_attention=False)
        if mode == "wo_robust":
            return cls(robust=False)
        if mode == "mwgcn_sum":
            return cls(use_ke=False, use_attention=False, robust=False, sum_graph_only=True)
        return cls()

    @property
    def branches(self):
        enabled = {"ke": self.use_ke, "att": self.use_attr}
        return [branch for branch in BRANCHES if enabled[branch]]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_dim: int = 16
    learning_rate: float = 0.01
    optimizer: str = "adam"
    classifier_activation: str = "sigmoid"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"model.n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_dim < 1:
            raise ConfigError(f"model.hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.classifier_activation not in ("sigmoid", "softmax"):
            raise ConfigError("model.classifier_activation must be 'sigmoid' or 'softmax', "
                              f"got {self.classifier_activation!r}")

    @classmethod
    def from_section(cls, section):
        return cls(**section)


@dataclass
class FusionTrace:
    """Attention weights of one forward pass. Weights are None under plain-sum fusion."""

    relation_weights: dict
    branch_weights: object
    z: np.ndarray


def check_normalized(weights):
    """Every row of the aggregation matrix must sum to 1 (within 1e-9) or be empty."""
    row_sums = np.asarray(weights.sum(axis=1)).ravel()
    bad = (row_sums != 0) & (np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise ContractError(f"Aggregation matrix is not row-normalized: row {row} sums to {row_sums[row]}")


def mwgcn_layer(h, normalized_weights, weight, activation="relu", checked=False):
    """
    One multi-path weighted convolution: act((W_hat H + H) W).

    Args:
        h: (N, d_in) Tensor of node representations.
        normalized_weights: Row-normalized (N, N) sparse matrix.
        weight: (d_in, d_out) Tensor.
        activation: Name in ACTIVATIONS.
        checked: Skip the row-normalization check when the caller already ran it.

    Returns:
        (N, d_out) Tensor
    """
    if not checked:
        check_normalized(normalized_weights)
    aggregated = nc.sparse_aggregate(normalized_weights, h)
    return ACTIVATIONS[activation](nc.matmul(nc.add(aggregated, h), weight))


def _readout_scores(reps, weight, bias):
    scores = [nc.tanh(nc.add(nc.matmul(nc.mean_rows(rep), weight), bias)) for rep in reps]
    return nc.softmax(nc.concat(scores, axis=1))


def relation_attention(reps, weight, bias):
    """
    Fuse the per-meta-path representations of one branch.

    Returns:
        (Z_rel Tensor, (1, K) weight Tensor)
    """
    if not reps:
        raise ContractError("relation_attention needs at least one representation")
    if len({rep.shape for rep in reps}) != 1:
        raise DimensionError(f"relation_attention shape mismatch {[rep.shape for rep in reps]}")
    weights = _readout_scores(reps, weight, bias)
    return nc.blend(reps, weights), weights


def embedding_attention(z_ke, z_att, weight, bias):
    """Fuse the two branch outputs with the same readout-score mechanism."""
    if z_ke.shape != z_att.shape:
        raise DimensionError(f"embedding_attention shape mismatch {z_ke.shape} vs {z_att.shape}")
    weights = _readout_scores([z_ke, z_att], weight, bias)
    return nc.blend([z_ke, z_att], weights), weights


def classify(z, weight, bias, activation="sigmoid"):
    logits = nc.add(nc.matmul(z, weight), bias)
    return nc.sigmoid(logits) if activation == "sigmoid" else nc.softmax(logits)


def _plain_sum(tensors):
    total = tensors[0]
    for tensor in tensors[1:]:
        total = nc.add(total, tensor)
    return total


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class KeModel:
    """
    All learnable parameters of the base network plus its forward pass.

    Parameters are plain arrays in ``self.params``; ``forward`` wraps them as
    Tensors unless a dict of Tensors is passed in (for training).
    """

    def __init__(self, config, flags, metapath_names, input_dims, seed=0):
        self.config = config
        self.flags = flags
        self.metapath_names = list(metapath_names)
        self.input_dims = dict(input_dims)
        self.seed = seed
        self.branches = flags.branches
        if not self.branches:
            raise ConfigError("Mode disables both the knowledge-embedding and the attribute branch")
        if not self.metapath_names:
            raise ConfigError("KeModel needs at least one meta-path subgraph")
        for branch in self.branches:
            if branch not in self.input_dims:
                raise ConfigError(f"Missing input width for branch '{branch}'")
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        d = self.config.hidden_dim
        params = {}
        for branch in self.branches:
            for name in self.metapath_names:
                widths = [self.input_dims[branch]] + [d] * self.config.n_layers
                for layer in range(self.config.n_layers):
                    params[f"{branch}.{name}.W{layer}"] = glorot(rng, widths[layer], widths[layer + 1])
            if self.flags.use_attention:
                params[f"rel_att.{branch}.W"] = glorot(rng, d, 1)
                params[f"rel_att.{branch}.b"] = np.zeros((1, 1))
        if len(self.branches) == 2 and self.flags.use_attention:
            params["emb_att.W"] = glorot(rng, d, 1)
            params["emb_att.b"] = np.zeros((1, 1))
        params["pred.W"] = glorot(rng, d, 2)
        params["pred.b"] = np.zeros((1, 2))
        return params

    def tensors(self):
        return {name: nc.Tensor(value) for name, value in self.params.items()}

    def _branch(self, branch, x, subgraphs, params):
        reps = []
        for name, subgraph in zip(self.metapath_names, subgraphs):
            h = x
            for layer in range(self.config.n_layers):
                h = mwgcn_layer(h, subgraph.normalized, params[f"{branch}.{name}.W{layer}"],
                                activation="relu", checked=True)
            reps.append(h)
        if not self.flags.use_attention:
            return _plain_sum(reps), None
        z, weights = relation_attention(reps, params[f"rel_att.{branch}.W"], params[f"rel_att.{branch}.b"])
        return z, weights.values[0].copy()

    def forward(self, subgraphs, x_att, x_ke, params=None):
        """
        Args:
            subgraphs: One CompanySubgraph per meta-path name, same order.
            x_att: (N, d_att) attribute matrix, ignored when the branch is off.
            x_ke: (N, d_ke) knowledge embeddings, ignored when the branch is off.
            params: Optional dict name -> Tensor (defaults to the stored arrays).

        Returns:
            (y_hat Tensor of shape (N, 2), FusionTrace)
        """
        if len(subgraphs) != len(self.metapath_names):
            raise DimensionError(f"Model expects {len(self.metapath_names)} subgraphs, got {len(subgraphs)}")
        for subgraph in subgraphs:
            check_normalized(subgraph.normalized)
        params = self.tensors() if params is None else params
        inputs = {"ke": x_ke, "att": x_att}

        branch_outputs, relation_weights = [], {}
        for branch in self.branches:
            x = inputs[branch]
            if x is None:
                raise ContractError(f"Branch '{branch}' is enabled but its input is missing")
            x = x if isinstance(x, nc.Tensor) else nc.Tensor(x)
            if x.shape != (subgraphs[0].n_nodes, self.input_dims[branch]):
                raise DimensionError(f"Branch '{branch}' input has shape {x.shape}, expected "
                                     f"{(subgraphs[0].n_nodes, self.input_dims[branch])}")
            z, weights = self._branch(branch, x, subgraphs, params)
            branch_outputs.append(z)
            relation_weights[branch] = weights

        if len(branch_outputs) == 1:
            z = branch_outputs[0]
            branch_weights = np.array([1.0]) if self.flags.use_attention else None
        elif self.flags.use_attention:
            z, weights = embedding_attention(branch_outputs[0], branch_outputs[1],
                                             params["emb_att.W"], params["emb_att.b"])
            branch_weights = weights.values[0].copy()
        else:
            z = _plain_sum(branch_outputs)
            branch_weights = None

        y_hat = classify(z, params["pred.W"], params["pred.b"], self.config.classifier_activation)
        trace = FusionTrace(relation_weights=relation_weights, branch_weights=branch_weights,
                            z=np.array(z.values))
        return y_hat, trace

    def fraud_scores(self, subgraphs, x_att, x_ke):
        y_hat, _ = self.forward(subgraphs, x_att, x_ke)
        return np.array(y_hat.values[:, 1])


def forward(model, subgraphs, x_att, x_ke, params=None):
    return model.forward(subgraphs, x_att, x_ke, params)


# =============================================================================
# Checkpoints
# =============================================================================

def save_checkpoint(model, path, mode="full"):
    """Write ``<path>.npz`` with named parameters and ``<path>.json`` with the model shape."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **model.params)
    sidecar = {
        "mode": mode,
        "flags": asdict(model.flags),
        "config": asdict(model.config),
        "metapaths": model.metapath_names,
        "input_dims": model.input_dims,
        "seed": model.seed,
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise ParseError(sidecar_path, 0, "checkpoint sidecar not found")
    with open(sidecar_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    model = KeModel(ModelConfig(**sidecar["config"]), ModeFlags(**sidecar["flags"]),
                    sidecar["metapaths"], sidecar["input_dims"], sidecar["seed"])
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as archive:
        stored = {name: np.array(archive[name]) for name in archive.files}
    if set(stored) != set(model.params):
        raise ParseError(path, 0, "checkpoint parameter names do not match the model")
    for name, value in stored.items():
        if value.shape != model.params[name].shape:
            raise ParseError(path, 0, f"parameter '{name}' has shape {value.shape}, "
                                      f"expected {model.params[name].shape}")
    model.params = stored
    return model, sidecar["mode"]

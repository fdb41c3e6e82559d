"""
TransE pretraining over the FKG and extraction of company knowledge embeddings.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from kegraph import numeric_core as nc
from kegraph.errors import ConfigError, ContractError, DanglingReferenceError, ParseError, SamplingError
from kegraph.graph_store import Triple, write_entity_index

logger = logging.getLogger(__name__)

TABLE_MAGIC = b"KEGE"
TABLE_VERSION = 1
TABLE_HEADER = struct.Struct("<4sIIQQB")
NORMS = ("L1", "L2")
MAX_RESAMPLE = 100


@dataclass(frozen=True)
class KgeConfig:
    dim: int = 32
    learning_rate: float = 0.01
    margin: float = 1.0
    negatives_per_positive: int = 1
    max_steps: int = 2000
    batch_size: int = 1024
    norm: str = "L1"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "learning_rate", "margin", "negatives_per_positive", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"kge.{name} must be positive, got {getattr(self, name)}")
        if self.max_steps < 0:
            raise ConfigError(f"kge.max_steps must be >= 0, got {self.max_steps}")
        if self.norm not in NORMS:
            raise ConfigError(f"kge.norm must be one of {NORMS}, got {self.norm!r}")

    @classmethod
    def from_section(cls, section, seed=0):
        return cls(seed=seed, **section)


@dataclass(frozen=True)
class EmbeddingTable:
    entity: np.ndarray
    relation: np.ndarray
    norm: str = "L1"
    loss_history: tuple = field(default=(), compare=False)

    @property
    def dim(self):
        return self.entity.shape[1]


def _distance(vectors, norm):
    if norm == "L1":
        return np.abs(vectors).sum(axis=-1)
    return np.sqrt((vectors * vectors).sum(axis=-1))


def transe_score(table, triple):
    """f(h, r, t) = -||h + r - t||; higher means more plausible."""
    head, relation, tail = (int(x) for x in triple)
    n_entities, n_relations = table.entity.shape[0], table.relation.shape[0]
    if not (0 <= head < n_entities and 0 <= tail < n_entities):
        raise DanglingReferenceError(f"Entity id out of range in {tuple(triple)} (have {n_entities})")
    if not 0 <= relation < n_relations:
        raise DanglingReferenceError(f"Relation id {relation} out of range (have {n_relations})")
    return -float(_distance(table.entity[head] + table.relation[relation] - table.entity[tail],
                            table.norm))


class NegativeSampler:
    """Corrupts heads or tails with uniformly drawn entities of the same kind."""

    def __init__(self, fkg):
        self.n_entities = fkg.n_entities
        self.n_relations = max(fkg.n_relations, 1)
        self.entity_kinds = fkg.entity_kinds
        self.members = {}
        self.position = np.zeros(fkg.n_entities, dtype=np.int64)
        self.kind_size = np.zeros(fkg.n_entities, dtype=np.int64)
        for code in np.unique(fkg.entity_kinds).tolist():
            members = np.flatnonzero(fkg.entity_kinds == code)
            self.members[code] = members
            self.position[members] = np.arange(len(members))
            self.kind_size[members] = len(members)
        self.known = np.sort(self._encode(fkg.triples))

    def _encode(self, triples):
        return (triples[:, 0] * self.n_relations + triples[:, 1]) * self.n_entities + triples[:, 2]

    def _is_known(self, triples):
        keys = self._encode(triples)
        if len(self.known) == 0:
            return np.zeros(len(keys), dtype=bool)
        slots = np.minimum(np.searchsorted(self.known, keys), len(self.known) - 1)
        return self.known[slots] == keys

    def _draw(self, entities, rng):
        """A same-kind entity different from each given one."""
        drawn = np.empty_like(entities)
        kinds = self.entity_kinds[entities]
        for code in np.unique(kinds):
            mask = kinds == code
            members = self.members[int(code)]
            offsets = rng.integers(0, len(members) - 1, size=int(mask.sum()))
            offsets = offsets + (offsets >= self.position[entities[mask]])
            drawn[mask] = members[offsets]
        return drawn

    def sample(self, triples, k, rng):
        """
        Corrupt every triple ``k`` times.

        Returns:
            (len(triples) * k, 3) int64 array; the k corruptions of a triple
            are consecutive rows.
        """
        if k < 1:
            raise ContractError(f"negatives_per_positive must be >= 1, got {k}")
        triples = np.repeat(np.asarray(triples, dtype=np.int64).reshape(-1, 3), k, axis=0)
        head_ok = self.kind_size[triples[:, 0]] > 1
        tail_ok = self.kind_size[triples[:, 2]] > 1
        if np.any(~head_ok & ~tail_ok):
            bad = triples[~head_ok & ~tail_ok][0]
            raise SamplingError(f"Cannot corrupt triple {tuple(bad.tolist())}: "
                                f"head and tail kinds each have a single member")
        corrupt_head = rng.random(len(triples)) < 0.5
        corrupt_head = np.where(corrupt_head & ~head_ok, False, corrupt_head)
        corrupt_head = np.where(~corrupt_head & ~tail_ok, True, corrupt_head)
        column = np.where(corrupt_head, 0, 2)
        rows = np.arange(len(triples))

        corrupted = triples.copy()
        pending = rows
        for _ in range(MAX_RESAMPLE):
            originals = triples[pending, column[pending]]
            corrupted[pending, column[pending]] = self._draw(originals, rng)
            pending = pending[self._is_known(corrupted[pending])]
            if len(pending) == 0:
                break
        return corrupted


def negative_sample(triple, fkg, k, rng):
    """k corrupted copies of one triple, each absent from the FKG when possible."""
    corrupted = NegativeSampler(fkg).sample(np.array([tuple(triple)]), k, rng)
    return [Triple(*row) for row in corrupted.tolist()]


def _project_rows(matrix, max_norm=1.0):
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.where(norms > max_norm, matrix * (max_norm / np.maximum(norms, 1e-300)), matrix)


def initialize_table(n_entities, n_relations, config):
    rng = np.random.default_rng(config.seed)
    bound = 6.0 / np.sqrt(config.dim)
    entity = rng.uniform(-bound, bound, size=(n_entities, config.dim))
    relation = rng.uniform(-bound, bound, size=(n_relations, config.dim))
    relation = relation / np.maximum(np.linalg.norm(relation, axis=1, keepdims=True), 1e-300)
    return _project_rows(entity), relation, rng


def _tensor_distance(vectors, norm):
    if norm == "L1":
        return nc.row_sum(nc.absolute(vectors))
    return nc.sqrt(nc.shift(nc.row_sum(nc.mul(vectors, vectors)), 1e-12))


def margin_loss(params, positives, negatives, config):
    """Mean of max(0, margin + d(pos) - d(neg)) over aligned positive/negative rows."""
    entity, relation = params["entity"], params["relation"]

    def distance(triples):
        h = nc.take_rows(entity, triples[:, 0])
        r = nc.take_rows(relation, triples[:, 1])
        t = nc.take_rows(entity, triples[:, 2])
        return _tensor_distance(nc.sub(nc.add(h, r), t), config.norm)

    gap = nc.sub(distance(positives), distance(negatives))
    return nc.mean_all(nc.relu(nc.shift(gap, config.margin)))


def train_kge(fkg, config, progress=False):
    """
    Train TransE embeddings with a margin ranking loss.

    Args:
        fkg: Graph with at least one triple.
        config: KgeConfig.
        progress: Show a tqdm bar over steps.

    Returns:
        EmbeddingTable; entity rows have L2 norm <= 1.
    """
    if fkg.n_triples == 0:
        raise ContractError("Cannot train embeddings on a graph with no triples")
    entity, relation, rng = initialize_table(fkg.n_entities, fkg.n_relations, config)
    sampler = NegativeSampler(fkg)
    optimizer = nc.Optimizer(nc.OptimizerConfig(config.optimizer, config.learning_rate))
    params = {"entity": entity, "relation": relation}
    history = []
    batch_size = min(config.batch_size, fkg.n_triples)

    logger.info(f"Training TransE: {fkg.n_entities} entities, {fkg.n_relations} relations, "
                f"{fkg.n_triples} triples, dim {config.dim}, {config.max_steps} steps")
    for _ in tqdm(range(config.max_steps), desc="TransE", disable=not progress):
        batch = rng.choice(fkg.n_triples, size=batch_size, replace=False)
        positives = np.repeat(fkg.triples[batch], config.negatives_per_positive, axis=0)
        negatives = sampler.sample(fkg.triples[batch], config.negatives_per_positive, rng)
        with nc.ComputationTape() as tape:
            tensors = {name: nc.Tensor(value) for name, value in params.items()}
            loss = margin_loss(tensors, positives, negatives, config)
        grads = nc.backward(tape, loss, tensors)
        params = optimizer.step(params, grads)
        params["entity"] = _project_rows(params["entity"])
        history.append(loss.item())

    if history:
        logger.info(f"TransE finished: loss {history[0]:.4f} -> {history[-1]:.4f}")
    return EmbeddingTable(params["entity"], params["relation"], config.norm, tuple(history))


def extract_company_embeddings(table, fkg):
    """X^ke: the first N^c entity rows, which are the companies in index order."""
    return np.array(table.entity[:fkg.n_companies])


def mean_rank(table, fkg, sample=100, seed=0):
    """Filtered mean tail rank over a sample of triples, among same-kind candidates."""
    if fkg.n_triples == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(fkg.n_triples, size=min(sample, fkg.n_triples), replace=False)
    known = fkg.triple_set()
    ranks = []
    for head, relation, tail in fkg.triples[chosen].tolist():
        candidates = np.flatnonzero(fkg.entity_kinds == fkg.entity_kinds[tail])
        translated = table.entity[head] + table.relation[relation]
        scores = -_distance(translated[None, :] - table.entity[candidates], table.norm)
        true_score = -_distance(translated - table.entity[tail], table.norm)
        better = [c for c, s in zip(candidates.tolist(), scores.tolist())
                  if s > true_score and (head, relation, c) not in known]
        ranks.append(1 + len(better))
    return float(np.mean(ranks))


def save_table(table, path, fkg=None):
    """Binary table (header, entity rows, relation rows) plus an optional TSV key index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = TABLE_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, table.dim, table.entity.shape[0],
                               table.relation.shape[0], NORMS.index(table.norm))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(table.entity, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(table.relation, dtype="<f8").tobytes())
    if fkg is not None:
        write_entity_index(fkg, path.with_suffix(".tsv"))
    logger.info(f"Saved embedding table to {path}")


def load_table(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < TABLE_HEADER.size:
        raise ParseError(path, 0, "embedding table header truncated")
    magic, version, dim, n_entities, n_relations, norm_code = TABLE_HEADER.unpack_from(raw)
    if magic != TABLE_MAGIC or version != TABLE_VERSION:
        raise ParseError(path, 0, f"not an embedding table (magic {magic!r}, version {version})")
    body = np.frombuffer(raw, dtype="<f8", offset=TABLE_HEADER.size)
    expected = (n_entities + n_relations) * dim
    if body.size != expected:
        raise ParseError(path, 0, f"expected {expected} values, found {body.size}")
    entity = body[:n_entities * dim].reshape(n_entities, dim).astype(np.float64)
    relation = body[n_entities * dim:].reshape(n_relations, dim).astype(np.float64)
    return EmbeddingTable(entity, relation, NORMS[norm_code])

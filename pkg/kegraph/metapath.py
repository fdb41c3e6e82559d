"""
Company meta-paths, multi-path weight matrices and company subgraphs.

A meta-path alternates entity kinds and relations and starts and ends at
CompanyYear. Relations are traversed in both directions. Counts are numbers
of simple paths (no node revisited), so the diagonal is always zero.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from tqdm import tqdm

from kegraph.errors import ContractError, DimensionError, DomainError, SpecError
from kegraph.graph_store import (
    KIND_BY_NAME,
    KIND_CODES,
    RELATED_PARTY,
    SAME_COMPANY,
    SERVES_AT,
    STANDARD_RELATIONS,
    EntityKind,
)

logger = logging.getLogger(__name__)

SUM_UP = "sum_up"
COMPANY = EntityKind.COMPANY_YEAR.value


@dataclass(frozen=True)
class MetaPathSpec:
    """A named chain ``Kind, relation, Kind, ..., Kind``."""

    name: str
    steps: tuple

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if len(steps) < 3 or len(steps) % 2 == 0:
            raise SpecError(f"Meta-path '{self.name}' must alternate kind and relation "
                            f"and end on a kind, got {len(steps)} steps")
        for kind in steps[::2]:
            if kind not in KIND_BY_NAME:
                raise SpecError(f"Meta-path '{self.name}' names unknown kind '{kind}'")
        if steps[0] != COMPANY or steps[-1] != COMPANY:
            raise SpecError(f"Meta-path '{self.name}' must start and end at {COMPANY}")

    @property
    def kinds(self):
        return [KIND_BY_NAME[k] for k in self.steps[::2]]

    @property
    def relations(self):
        return list(self.steps[1::2])

    @property
    def n_hops(self):
        return len(self.relations)


PREDEFINED = {
    "RPT": MetaPathSpec("RPT", (COMPANY, RELATED_PARTY, "RPT", RELATED_PARTY, COMPANY)),
    "SC": MetaPathSpec("SC", (COMPANY, SAME_COMPANY, "CompanyMeta", SAME_COMPANY, COMPANY)),
    "SDSE": MetaPathSpec("SDSE", (COMPANY, SERVES_AT, "DSE", SERVES_AT, COMPANY)),
}


def parse_metapath(text):
    """Parse ``NAME:Kind,relation,Kind,...`` into a MetaPathSpec."""
    if ":" not in text:
        raise SpecError(f"Custom meta-path must look like NAME:Kind,relation,...,Kind, got {text!r}")
    name, chain = text.split(":", 1)
    steps = [s.strip() for s in chain.split(",") if s.strip()]
    return MetaPathSpec(name.strip(), tuple(steps))


def resolve_metapaths(names, custom=()):
    """Turn predefined names plus custom chain strings into specs, in order."""
    specs = []
    for name in names:
        if name not in PREDEFINED:
            raise SpecError(f"Unknown meta-path '{name}'. Predefined: {', '.join(PREDEFINED)}")
        specs.append(PREDEFINED[name])
    specs.extend(parse_metapath(text) for text in custom)
    seen = set()
    for spec in specs:
        if spec.name in seen:
            raise SpecError(f"Meta-path name '{spec.name}' used twice")
        seen.add(spec.name)
    return specs


# =============================================================================
# Weight matrices
# =============================================================================

def row_normalize(w):
    """
    Row-normalize a non-negative matrix; empty rows stay all-zero.

    Args:
        w: MultiPathWeightMatrix, scipy sparse matrix or dense array.

    Returns:
        scipy.sparse.csr_matrix of float64
    """
    counts = w.counts if isinstance(w, MultiPathWeightMatrix) else w
    counts = sp.csr_matrix(counts, dtype=np.float64)
    counts.eliminate_zeros()
    if counts.nnz and counts.data.min() < 0:
        raise DomainError("Cannot row-normalize a matrix with negative entries")
    row_sums = np.asarray(counts.sum(axis=1)).ravel()
    rows = np.repeat(np.arange(counts.shape[0]), np.diff(counts.indptr))
    normalized = counts.copy()
    # divide per entry so that scaling every count leaves the result unchanged
    normalized.data = counts.data / row_sums[rows]
    return normalized


@dataclass(frozen=True)
class MultiPathWeightMatrix:
    """Integer path counts between companies plus the row-normalized companion."""

    counts: sp.csr_matrix

    def __post_init__(self):
        counts = sp.csr_matrix(self.counts, dtype=np.int64)
        counts.eliminate_zeros()
        counts.sort_indices()
        object.__setattr__(self, "counts", counts)

    @property
    def shape(self):
        return self.counts.shape

    @cached_property
    def normalized(self):
        return row_normalize(self.counts)

    def is_symmetric(self):
        return (self.counts != self.counts.T).nnz == 0


@dataclass(frozen=True)
class CompanySubgraph:
    """Company-only graph for one meta-path (or the sum-up graph)."""

    n_nodes: int
    weights: MultiPathWeightMatrix
    provenance: str

    def __post_init__(self):
        if self.weights.shape != (self.n_nodes, self.n_nodes):
            raise DimensionError(f"Subgraph '{self.provenance}' weights have shape "
                                 f"{self.weights.shape}, expected {(self.n_nodes, self.n_nodes)}")

    @property
    def normalized(self):
        return self.weights.normalized

    @property
    def n_edges(self):
        return self.weights.counts.nnz

    def edges(self):
        coo = self.weights.counts.tocoo()
        return sorted(zip(coo.row.tolist(), coo.col.tolist()))


def relation_adjacency(fkg, relation):
    """Binary undirected entity adjacency for one relation, self-loops removed."""
    if relation not in fkg.relation_index and relation not in STANDARD_RELATIONS:
        raise SpecError(f"Relation '{relation}' is not in the graph vocabulary")
    rows = fkg.triples_of(relation)
    n = fkg.n_entities
    heads, tails = rows[:, 0], rows[:, 2]
    adjacency = sp.coo_matrix(
        (np.ones(2 * len(rows), dtype=np.int64),
         (np.concatenate([heads, tails]), np.concatenate([tails, heads]))),
        shape=(n, n),
    ).tocsr()
    adjacency.setdiag(0)
    adjacency.eliminate_zeros()
    adjacency.data[:] = 1
    return adjacency


def _two_hop_counts(fkg, spec, adjacencies):
    """Company x middle x company product for paths with a non-company middle."""
    n_companies = fkg.n_companies
    companies = np.arange(n_companies)
    middles = fkg.entities_of_kind(spec.kinds[1])
    first = adjacencies[0][companies][:, middles]
    second = adjacencies[1][middles][:, companies]
    counts = (first @ second).tocsr()
    counts.setdiag(0)
    counts.eliminate_zeros()
    return counts


def _enumerate_counts(fkg, spec, adjacencies, progress=False):
    """Count simple meta-path instances by depth-first enumeration."""
    kind_codes = [KIND_CODES[kind] for kind in spec.kinds]
    entity_kinds = fkg.entity_kinds
    n_companies = fkg.n_companies
    rows, cols = [], []

    def walk(node, depth, visited, start):
        if depth == spec.n_hops:
            rows.append(start)
            cols.append(node)
            return
        adjacency = adjacencies[depth]
        for neighbor in adjacency.indices[adjacency.indptr[node]:adjacency.indptr[node + 1]]:
            neighbor = int(neighbor)
            if neighbor in visited or entity_kinds[neighbor] != kind_codes[depth + 1]:
                continue
            visited.add(neighbor)
            walk(neighbor, depth + 1, visited, start)
            visited.remove(neighbor)

    for start in tqdm(range(n_companies), desc=f"Enumerating {spec.name}", disable=not progress):
        walk(start, 0, {start}, start)
    return sp.coo_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)),
                         shape=(n_companies, n_companies)).tocsr()


def build_weight_matrix(fkg, spec, progress=False):
    """
    Count distinct simple meta-path instances between every pair of companies.

    Args:
        fkg: Loaded FKG.
        spec: MetaPathSpec; every relation must be known to the graph schema.
        progress: Show a progress bar while enumerating long paths.

    Returns:
        MultiPathWeightMatrix
    """
    adjacencies = [relation_adjacency(fkg, relation) for relation in spec.relations]
    if spec.n_hops == 2 and spec.kinds[1] is not EntityKind.COMPANY_YEAR:
        counts = _two_hop_counts(fkg, spec, adjacencies)
    else:
        counts = _enumerate_counts(fkg, spec, adjacencies, progress=progress)
    weights = MultiPathWeightMatrix(counts)
    logger.info(f"Meta-path {spec.name}: {weights.counts.nnz} company pairs, "
                f"{int(weights.counts.sum())} path instances")
    return weights


def build_company_subgraph(fkg, spec, progress=False):
    """Company subgraph for one meta-path; isolated companies are kept."""
    return CompanySubgraph(fkg.n_companies, build_weight_matrix(fkg, spec, progress), spec.name)


def build_subgraphs(fkg, specs, progress=False):
    return [build_company_subgraph(fkg, spec, progress) for spec in specs]


def sum_up_graph(subgraphs):
    """Elementwise sum of the count matrices, normalized afresh."""
    if not subgraphs:
        raise ContractError("sum_up_graph needs at least one subgraph")
    n_nodes = subgraphs[0].n_nodes
    total = sp.csr_matrix((n_nodes, n_nodes), dtype=np.int64)
    for subgraph in subgraphs:
        if subgraph.n_nodes != n_nodes:
            raise DimensionError(f"Subgraph '{subgraph.provenance}' has {subgraph.n_nodes} nodes, "
                                 f"expected {n_nodes}")
        total = total + subgraph.weights.counts
    return CompanySubgraph(n_nodes, MultiPathWeightMatrix(total), SUM_UP)


# =============================================================================
# Persistence
# =============================================================================

def save_subgraph(subgraph, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    counts = subgraph.weights.counts
    np.savez_compressed(
        path,
        data=counts.data,
        indices=counts.indices,
        indptr=counts.indptr,
        n_nodes=np.array(subgraph.n_nodes),
        provenance=np.array(subgraph.provenance),
    )


def load_subgraph(path):
    with np.load(path, allow_pickle=False) as archive:
        n_nodes = int(archive["n_nodes"])
        counts = sp.csr_matrix(
            (archive["data"], archive["indices"], archive["indptr"]), shape=(n_nodes, n_nodes))
        return CompanySubgraph(n_nodes, MultiPathWeightMatrix(counts), str(archive["provenance"]))

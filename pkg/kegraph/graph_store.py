"""
Financial knowledge graph (FKG) data model, file ingestion and schema checks.

Entity keys in files carry their kind as a prefix, ``Kind:name``. Company
instances are keyed ``CompanyYear:<company>@<year>``. Companies are numbered
first, in attributes-file order, so company index i is also entity id i.
"""

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from kegraph.errors import DanglingReferenceError, ParseError, SchemaError

logger = logging.getLogger(__name__)


class EntityKind(Enum):
    COMPANY_YEAR = "CompanyYear"
    COMPANY_META = "CompanyMeta"
    DSE = "DSE"
    DSE_META = "DSEMeta"
    RPT = "RPT"
    ATTRIBUTE_VALUE = "AttributeValue"


KIND_BY_NAME = {kind.value: kind for kind in EntityKind}
KIND_CODES = {kind: code for code, kind in enumerate(EntityKind)}

# Relations the schema knows about even when a graph holds none of them.
SAME_COMPANY = "same_company_as"
SAME_PERSON = "same_person_as"
RELATED_PARTY = "related_party"
SERVES_AT = "serves_at"
STANDARD_RELATIONS = (SAME_COMPANY, SAME_PERSON, RELATED_PARTY, SERVES_AT)

LABEL_COLUMNS = ["company_key", "year", "label", "violation_year", "declared_year"]
MAX_EXAMPLES = 10


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def parse_key(key):
    """Split an external key into (EntityKind, name)."""
    if ":" not in key:
        raise SchemaError(f"Entity key '{key}' has no kind prefix")
    prefix, name = key.split(":", 1)
    if prefix not in KIND_BY_NAME:
        raise SchemaError(f"Unknown entity kind '{prefix}' in key '{key}'")
    if not name:
        raise SchemaError(f"Entity key '{key}' has an empty name")
    return KIND_BY_NAME[prefix], name


def company_year_key(company, year):
    return f"{EntityKind.COMPANY_YEAR.value}:{company}@{int(year)}"


def instance_owner(name):
    """``600001@2015`` -> ``600001`` for year-instance names; other names unchanged."""
    return name.rsplit("@", 1)[0] if "@" in name else name


@dataclass(frozen=True)
class LabelTable:
    """Per-company label records, aligned with company index.

    ``noisy`` is -1 where a company has no label record. Absent years are NaN.
    """

    noisy: np.ndarray
    violation_year: np.ndarray
    declared_year: np.ndarray
    record_year: np.ndarray

    @classmethod
    def empty(cls, record_years):
        n = len(record_years)
        return cls(
            noisy=np.full(n, -1, dtype=np.int64),
            violation_year=np.full(n, np.nan),
            declared_year=np.full(n, np.nan),
            record_year=np.asarray(record_years, dtype=np.int64),
        )


@dataclass(frozen=True)
class FKG:
    """Typed multi-relational graph plus company attributes and labels.

    Immutable after construction; arrays are flagged read-only.
    """

    entity_keys: tuple
    entity_kinds: np.ndarray        # kind code per entity id
    relations: tuple
    triples: np.ndarray             # (M, 3) int64 rows of (head, relation, tail)
    attributes: np.ndarray          # (N^c, d^att), 0.0 where missing
    attribute_mask: np.ndarray      # True where observed
    attribute_names: tuple
    labels: LabelTable
    key_index: dict = field(init=False, repr=False, compare=False)
    relation_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "key_index", {k: i for i, k in enumerate(self.entity_keys)})
        object.__setattr__(self, "relation_index", {r: i for i, r in enumerate(self.relations)})
        for array in (self.entity_kinds, self.triples, self.attributes, self.attribute_mask,
                      self.labels.noisy, self.labels.violation_year,
                      self.labels.declared_year, self.labels.record_year):
            array.setflags(write=False)

    @property
    def n_entities(self):
        return len(self.entity_keys)

    @property
    def n_relations(self):
        return len(self.relations)

    @property
    def n_companies(self):
        return self.attributes.shape[0]

    @property
    def n_triples(self):
        return self.triples.shape[0]

    def kind_of(self, entity_id):
        return list(EntityKind)[int(self.entity_kinds[entity_id])]

    def entities_of_kind(self, kind):
        return np.flatnonzero(self.entity_kinds == KIND_CODES[kind])

    def entity_id(self, key):
        if key not in self.key_index:
            raise DanglingReferenceError(f"Unknown entity '{key}'")
        return self.key_index[key]

    def company_records(self):
        """(company key, year) for every company index."""
        records = []
        for key in self.entity_keys[:self.n_companies]:
            company, year = parse_key(key)[1].rsplit("@", 1)
            records.append((company, int(year)))
        return records

    def triples_of(self, relation):
        """Rows of ``triples`` with the given relation name (empty if unknown)."""
        if relation not in self.relation_index:
            return self.triples[:0]
        return self.triples[self.triples[:, 1] == self.relation_index[relation]]

    def triple_set(self):
        return {tuple(row) for row in self.triples.tolist()}

    def with_labels(self, labels):
        return replace(self, labels=labels)


class FKGBuilder:
    """Accumulates entities and triples with dense ids and deduplication."""

    def __init__(self):
        self.keys = []
        self.kinds = []
        self.key_index = {}
        self.relations = []
        self.relation_index = {}
        self.triples = []
        self._seen = set()

    def add_entity(self, key):
        if key in self.key_index:
            return self.key_index[key]
        kind, _ = parse_key(key)
        entity_id = len(self.keys)
        self.keys.append(key)
        self.kinds.append(KIND_CODES[kind])
        self.key_index[key] = entity_id
        return entity_id

    def add_relation(self, name):
        if name not in self.relation_index:
            self.relation_index[name] = len(self.relations)
            self.relations.append(name)
        return self.relation_index[name]

    def add_triple(self, head_key, relation, tail_key):
        """Add a triple; returns False when it was a duplicate."""
        triple = (self.add_entity(head_key), self.add_relation(relation), self.add_entity(tail_key))
        if triple in self._seen:
            return False
        self._seen.add(triple)
        self.triples.append(triple)
        return True

    def build(self, attributes, attribute_mask, attribute_names, labels):
        triples = np.array(self.triples, dtype=np.int64).reshape(-1, 3)
        return FKG(
            entity_keys=tuple(self.keys),
            entity_kinds=np.array(self.kinds, dtype=np.int64),
            relations=tuple(self.relations),
            triples=triples,
            attributes=np.asarray(attributes, dtype=np.float64),
            attribute_mask=np.asarray(attribute_mask, dtype=bool),
            attribute_names=tuple(attribute_names),
            labels=labels,
        )


# =============================================================================
# File ingestion
# =============================================================================

def _read_csv(path):
    """Read a CSV as strings; an empty file yields an empty frame and short rows get empty cells."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(path, int(match.group(1)) if match else 0, str(e)) from e
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(path, 0, f"cannot read file: {e}") from e
    return frame.fillna("")


def _parse_number(path, line_number, column, text):
    if text.strip() == "":
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(path, line_number, f"column '{column}' is not a number: {text!r}")


def _parse_year(path, line_number, column, text):
    if text.strip() == "":
        return np.nan
    try:
        return float(int(text))
    except ValueError:
        raise ParseError(path, line_number, f"column '{column}' is not an integer year: {text!r}")


def read_triples(path):
    """Yield (line number, head key, relation, tail key) from a TSV triples file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(path, 0, f"cannot read file: {e}") from e
    for line_number, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3 or not all(fields):
            raise ParseError(path, line_number, f"expected 3 tab-separated fields, got {len(fields)}")
        yield line_number, fields[0], fields[1], fields[2]


def load_fkg(triples_path, attrs_path, labels_path, strict=False):
    """
    Load and validate an FKG from its three files.

    Args:
        triples_path: TSV of head_key, relation, tail_key.
        attrs_path: CSV with header company_key,year,f_0,...; empty cell = missing.
        labels_path: CSV with header company_key,year,label,violation_year,declared_year.
        strict: Raise SchemaError when validate_schema reports any violation.

    Returns:
        FKG
    """
    logger.info(f"Loading FKG from {Path(triples_path).parent}")
    builder = FKGBuilder()

    # Companies come first so that company index == entity id.
    attrs = _read_csv(attrs_path)
    if len(attrs.columns) and list(attrs.columns[:2]) != ["company_key", "year"]:
        raise ParseError(attrs_path, 1, "header must start with company_key,year")
    attribute_names = [c for c in attrs.columns[2:]]
    n_companies = len(attrs)
    values = np.zeros((n_companies, len(attribute_names)))
    mask = np.zeros((n_companies, len(attribute_names)), dtype=bool)
    record_years = np.zeros(n_companies, dtype=np.int64)
    for row_index, row in enumerate(attrs.itertuples(index=False)):
        line_number = row_index + 2
        company, year_text = row[0], row[1]
        year = _parse_year(attrs_path, line_number, "year", year_text)
        if not company or np.isnan(year):
            raise ParseError(attrs_path, line_number, "company_key and year are required")
        key = company_year_key(company, year)
        if key in builder.key_index:
            raise SchemaError(f"{attrs_path}:{line_number}: duplicate attribute row for {key}")
        builder.add_entity(key)
        record_years[row_index] = int(year)
        for column_index, text in enumerate(row[2:]):
            number = _parse_number(attrs_path, line_number, attribute_names[column_index], text)
            if not np.isnan(number):
                values[row_index, column_index] = number
                mask[row_index, column_index] = True

    n_duplicates = 0
    for line_number, head, relation, tail in read_triples(triples_path):
        for key in (head, tail):
            kind, _ = parse_key(key)
            if kind is EntityKind.COMPANY_YEAR and key not in builder.key_index:
                raise DanglingReferenceError(
                    f"{triples_path}:{line_number}: company {key} has no attribute row")
        if not builder.add_triple(head, relation, tail):
            n_duplicates += 1
    if n_duplicates:
        logger.info(f"Dropped {n_duplicates} duplicate triples")

    labels = LabelTable.empty(record_years)
    noisy = labels.noisy.copy()
    violation = labels.violation_year.copy()
    declared = labels.declared_year.copy()
    label_frame = _read_csv(labels_path)
    if len(label_frame.columns) and list(label_frame.columns) != LABEL_COLUMNS:
        raise ParseError(labels_path, 1, f"header must be {','.join(LABEL_COLUMNS)}")
    for row_index, row in enumerate(label_frame.itertuples(index=False)):
        line_number = row_index + 2
        company, year_text, label_text, violation_text, declared_text = row
        year = _parse_year(labels_path, line_number, "year", year_text)
        if np.isnan(year):
            raise ParseError(labels_path, line_number, "year is required")
        key = company_year_key(company, year)
        if key not in builder.key_index:
            raise DanglingReferenceError(f"{labels_path}:{line_number}: label for unknown company {key}")
        company_index = builder.key_index[key]
        if noisy[company_index] != -1:
            raise SchemaError(f"{labels_path}:{line_number}: duplicate label row for {key}")
        if label_text not in ("0", "1"):
            raise ParseError(labels_path, line_number, f"label must be 0 or 1, got {label_text!r}")
        noisy[company_index] = int(label_text)
        violation[company_index] = _parse_year(labels_path, line_number, "violation_year", violation_text)
        declared[company_index] = _parse_year(labels_path, line_number, "declared_year", declared_text)
    labels = LabelTable(noisy=noisy, violation_year=violation, declared_year=declared,
                        record_year=record_years)

    fkg = builder.build(values, mask, attribute_names, labels)
    logger.info(f"Loaded {fkg.n_entities} entities, {fkg.n_relations} relations, "
                f"{fkg.n_triples} triples, {fkg.n_companies} companies")
    if strict:
        report = validate_schema(fkg)
        if not report.is_empty:
            raise SchemaError("Schema validation failed:\n" + "\n".join(report.to_lines()))
    return fkg


def load_fkg_dir(data_dir, strict=False):
    """Load the conventional ``triples.tsv`` / ``attributes.csv`` / ``labels.csv`` trio."""
    data_dir = Path(data_dir)
    return load_fkg(data_dir / "triples.tsv", data_dir / "attributes.csv",
                    data_dir / "labels.csv", strict=strict)


def _year_column(values):
    return pd.array([None if np.isnan(v) else int(v) for v in values], dtype="Int64")


def write_fkg(fkg, triples_path, attrs_path, labels_path):
    """Write an FKG back to the three-file format read by load_fkg."""
    for path in (triples_path, attrs_path, labels_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)

    keys = fkg.entity_keys
    with open(triples_path, "w", encoding="utf-8") as f:
        for head, relation, tail in fkg.triples.tolist():
            f.write(f"{keys[head]}\t{fkg.relations[relation]}\t{keys[tail]}\n")

    records = fkg.company_records()
    attrs = pd.DataFrame({
        "company_key": [company for company, _ in records],
        "year": [year for _, year in records],
    })
    observed = np.where(fkg.attribute_mask, fkg.attributes, np.nan)
    for column_index, name in enumerate(fkg.attribute_names):
        attrs[name] = observed[:, column_index]
    attrs.to_csv(attrs_path, index=False, float_format=None)

    has_label = fkg.labels.noisy >= 0
    labels = pd.DataFrame({
        "company_key": [records[i][0] for i in np.flatnonzero(has_label)],
        "year": [records[i][1] for i in np.flatnonzero(has_label)],
        "label": fkg.labels.noisy[has_label],
        "violation_year": _year_column(fkg.labels.violation_year[has_label]),
        "declared_year": _year_column(fkg.labels.declared_year[has_label]),
    })
    labels.to_csv(labels_path, index=False, columns=LABEL_COLUMNS)


def write_fkg_dir(fkg, data_dir):
    data_dir = Path(data_dir)
    write_fkg(fkg, data_dir / "triples.tsv", data_dir / "attributes.csv", data_dir / "labels.csv")


def write_entity_index(fkg, path):
    """Persist the external-key to dense-id mapping so outputs stay joinable."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "entity_id": np.arange(fkg.n_entities),
        "kind": [fkg.kind_of(i).value for i in range(fkg.n_entities)],
        "key": list(fkg.entity_keys),
    })
    frame.to_csv(path, sep="\t", index=False)


# =============================================================================
# Validation
# =============================================================================

@dataclass
class Violation:
    invariant: str
    count: int
    examples: list


class ValidationReport:
    """Violations found per invariant; empty iff every invariant holds."""

    def __init__(self):
        self.violations = {}

    def add(self, invariant, offenders):
        offenders = list(offenders)
        if offenders:
            self.violations[invariant] = Violation(invariant, len(offenders), offenders[:MAX_EXAMPLES])

    @property
    def is_empty(self):
        return not self.violations

    def __contains__(self, invariant):
        return invariant in self.violations

    def __getitem__(self, invariant):
        return self.violations[invariant]

    def to_lines(self):
        return [f"{v.invariant}: {v.count} violation(s), e.g. {', '.join(map(str, v.examples))}"
                for v in self.violations.values()]


def _meta_link_offenders(fkg, instance_kind, meta_kind, relation):
    """Instances not linked to exactly one meta node, or whose group is split."""
    links = defaultdict(set)
    for head, tail in fkg.triples_of(relation)[:, [0, 2]].tolist():
        for instance, meta in ((head, tail), (tail, head)):
            if fkg.kind_of(instance) is instance_kind and fkg.kind_of(meta) is meta_kind:
                links[instance].add(meta)

    offenders = []
    metas_by_owner = defaultdict(set)
    for entity_id in fkg.entities_of_kind(instance_kind).tolist():
        metas = links.get(entity_id, set())
        if len(metas) != 1:
            offenders.append(fkg.entity_keys[entity_id])
            continue
        owner = instance_owner(parse_key(fkg.entity_keys[entity_id])[1])
        metas_by_owner[owner].update(metas)
    split_owners = {owner for owner, metas in metas_by_owner.items() if len(metas) > 1}
    for entity_id in fkg.entities_of_kind(instance_kind).tolist():
        owner = instance_owner(parse_key(fkg.entity_keys[entity_id])[1])
        if owner in split_owners:
            offenders.append(fkg.entity_keys[entity_id])
    return offenders


def validate_schema(fkg):
    """
    Check the FKG invariants and report every violation found.

    Returns:
        ValidationReport listing, per invariant, the violation count and the
        first offending identifiers.
    """
    report = ValidationReport()
    keys = fkg.entity_keys

    out_of_range = [i for i, (h, r, t) in enumerate(fkg.triples.tolist())
                    if not (0 <= h < fkg.n_entities and 0 <= t < fkg.n_entities
                            and 0 <= r < fkg.n_relations)]
    report.add("triple_reference", out_of_range)

    report.add("company_meta_link", _meta_link_offenders(
        fkg, EntityKind.COMPANY_YEAR, EntityKind.COMPANY_META, SAME_COMPANY))
    report.add("dse_meta_link", _meta_link_offenders(
        fkg, EntityKind.DSE, EntityKind.DSE_META, SAME_PERSON))

    n_companies = len(fkg.entities_of_kind(EntityKind.COMPANY_YEAR))
    n_label_records = int((fkg.labels.noisy >= 0).sum())
    if not (n_companies == fkg.attributes.shape[0] == n_label_records):
        unlabeled = [keys[i] for i in np.flatnonzero(fkg.labels.noisy < 0)]
        report.add("company_row_count", unlabeled or
                   [f"companies={n_companies}, attribute_rows={fkg.attributes.shape[0]}, "
                    f"label_records={n_label_records}"])

    noisy = fkg.labels.noisy
    violation = fkg.labels.violation_year
    declared = fkg.labels.declared_year
    fraud = noisy == 1
    with np.errstate(invalid="ignore"):
        bad_order = fraud & (np.isnan(violation) | np.isnan(declared) | (declared < violation))
    report.add("label_order", [keys[i] for i in np.flatnonzero(bad_order)])
    return report


def year_gap_summary(fkg):
    """Distribution of declared_year - violation_year over observed frauds."""
    fraud = (fkg.labels.noisy == 1) & ~np.isnan(fkg.labels.violation_year) \
        & ~np.isnan(fkg.labels.declared_year)
    gaps = (fkg.labels.declared_year[fraud] - fkg.labels.violation_year[fraud]).astype(np.int64)
    if gaps.size == 0:
        return {"n_frauds": 0, "gap_counts": {}, "gap0_share": 0.0, "gap_gt8_share": 0.0,
                "mean_gap": 0.0, "median_gap": 0.0}
    counts = pd.Series(gaps).value_counts().sort_index()
    return {
        "n_frauds": int(gaps.size),
        "gap_counts": {int(k): int(v) for k, v in counts.items()},
        "gap0_share": float(np.mean(gaps == 0)),
        "gap_gt8_share": float(np.mean(gaps > 8)),
        "mean_gap": float(gaps.mean()),
        "median_gap": float(np.median(gaps)),
    }

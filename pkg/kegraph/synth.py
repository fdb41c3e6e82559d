"""
Synthetic financial knowledge graphs with a planted fraud signal and
instance- and neighbour-dependent hidden-fraud noise.

Every generated company-year carries its ground truth (clean label, flip
probability, years), so robustness claims can be checked exactly.
"""

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.special import expit, logit

from kegraph.errors import ConfigError
from kegraph.graph_store import (
    RELATED_PARTY,
    SAME_COMPANY,
    SAME_PERSON,
    SERVES_AT,
    FKGBuilder,
    LabelTable,
    company_year_key,
    write_fkg_dir,
)
from kegraph.metapath import PREDEFINED, build_weight_matrix

logger = logging.getLogger(__name__)

SIGNAL_LOCATIONS = ("attributes", "support")
DSE_ROLES = ("chair", "director", "supervisor", "executive")
DSE_GENDERS = ("female", "male")
RPT_TYPES = ("commodity", "loan", "guarantee", "asset")
RISKY_RPT_TYPE = "guarantee"
AMOUNT_BANDS = ("small", "medium", "large")

# risk-flag and risky-transaction rates for latent fraud-prone vs. other companies
HIGH_RISK_RATE = (0.1, 0.8)
RISKY_RPT_RATE = (0.15, 0.7)
NEUTRAL_RISK = 0.4
SUPPORT_SIGNAL_SCALE = 4.0

MAX_LABEL_DRAWS = 20
RATIO_TOLERANCE = 0.2
GROUND_TRUTH_COLUMNS = ["company_key", "year", "clean_label", "noisy_label", "flip_prob",
                        "violation_year", "declared_year"]


@dataclass(frozen=True)
class SynthConfig:
    n_companies: int = 2000
    year_start: int = 2003
    year_end: int = 2020
    support_ratio: float = 18.0
    dse_share: float = 0.8
    dse_persistence: float = 0.7
    dse_share_prob: float = 0.1
    rpt_homophily: float = 0.6
    d_att: int = 24
    fraud_base_rate: float = 0.127
    signal_location: str = "attributes"
    signal_dims: int = 6
    attr_shift: float = 1.0
    attr_coef: float = 1.5
    neighbor_coef: float = 2.0
    flip_low: float = 0.2
    flip_high: float = 0.6
    neighbor_threshold: int = 2
    flip_attr_coef: float = 0.0
    gap_zero_share: float = 0.30
    gap_tail_share: float = 0.022
    gap_tail_year: int = 8
    attr_missing_rate: float = 0.05
    support_missing_rate: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.n_companies < 1:
            raise ConfigError(f"synth.n_companies must be >= 1, got {self.n_companies}")
        if self.year_end < self.year_start:
            raise ConfigError(f"synth.year_end {self.year_end} is before year_start {self.year_start}")
        if self.support_ratio < 0:
            raise ConfigError(f"synth.support_ratio must be >= 0, got {self.support_ratio}")
        if not 0 < self.fraud_base_rate < 1:
            raise ConfigError(f"synth.fraud_base_rate must be in (0, 1), got {self.fraud_base_rate}")
        for name in ("dse_share", "dse_persistence", "dse_share_prob", "rpt_homophily", "flip_low",
                     "flip_high", "gap_zero_share", "gap_tail_share", "attr_missing_rate",
                     "support_missing_rate"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"synth.{name} must be a probability, got {value}")
        if self.gap_tail_share >= 1 - self.gap_zero_share:
            raise ConfigError("synth.gap_tail_share must be below 1 - gap_zero_share")
        if self.gap_tail_year < 1:
            raise ConfigError(f"synth.gap_tail_year must be >= 1, got {self.gap_tail_year}")
        if self.signal_location not in SIGNAL_LOCATIONS:
            raise ConfigError(f"synth.signal_location must be one of {SIGNAL_LOCATIONS}, "
                              f"got {self.signal_location!r}")
        if self.d_att < 1 or not 0 <= self.signal_dims <= self.d_att:
            raise ConfigError(f"synth.signal_dims must be in [0, d_att], got {self.signal_dims}")
        expected = self.fraud_base_rate * self.n_companies
        if math.floor((1 + RATIO_TOLERANCE) * expected) < max(1, math.ceil((1 - RATIO_TOLERANCE) * expected)):
            raise ConfigError(f"A fraud rate of {self.fraud_base_rate} over {self.n_companies} "
                              f"companies cannot land within {RATIO_TOLERANCE:.0%} of target")

    @classmethod
    def from_section(cls, section):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in known})


def _nullable_years(values):
    return pd.array([None if np.isnan(v) else int(v) for v in values], dtype="Int64")


@dataclass
class GroundTruth:
    """Per company-year truth, aligned with company index."""

    company_keys: list
    years: np.ndarray
    latent: np.ndarray
    risk_score: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    flip_prob: np.ndarray
    violation_year: np.ndarray
    declared_year: np.ndarray

    def label_table(self):
        """What a regulator's records show: hidden frauds look like non-frauds."""
        observed = self.noisy == 1
        return LabelTable(
            noisy=self.noisy.astype(np.int64),
            violation_year=np.where(observed, self.violation_year, np.nan),
            declared_year=np.where(observed, self.declared_year, np.nan),
            record_year=self.years.astype(np.int64),
        )

    def to_frame(self):
        return pd.DataFrame({
            "company_key": self.company_keys,
            "year": self.years,
            "clean_label": self.clean,
            "noisy_label": self.noisy,
            "flip_prob": self.flip_prob,
            "violation_year": _nullable_years(self.violation_year),
            "declared_year": _nullable_years(self.declared_year),
        })[GROUND_TRUTH_COLUMNS]


@dataclass
class SyntheticDataset:
    fkg: object
    ground_truth: GroundTruth
    company_graph: sp.csr_matrix
    config: SynthConfig


# =============================================================================
# Structure
# =============================================================================

def _company_years(config, rng):
    """Firms with contiguous lifespans until n_companies instances exist."""
    n_years = config.year_end - config.year_start + 1
    records = []
    firm = 0
    while len(records) < config.n_companies:
        length = min(int(rng.integers(1, n_years + 1)), config.n_companies - len(records))
        first = int(rng.integers(config.year_start, config.year_end - length + 2))
        records.extend((f"F{firm:05d}", first + offset) for offset in range(length))
        firm += 1
    return records


def _allocate(total, n, rng):
    """Split ``total`` items over ``n`` slots as evenly as possible."""
    counts = np.full(n, total // n, dtype=np.int64)
    extra = rng.choice(n, size=total - int(counts.sum()), replace=False)
    counts[extra] += 1
    return counts


def _pick_partner(company, same_year, latent, homophily, rng):
    candidates = same_year[same_year != company]
    if len(candidates) == 0:
        return None
    if rng.random() < homophily:
        matching = candidates[latent[candidates] == latent[company]]
        if len(matching):
            return int(rng.choice(matching))
    return int(rng.choice(candidates))


def _attribute_triples(builder, entity_key, values, missing_rate, rng):
    """Attach attribute-value entities, dropping one at random with ``missing_rate``."""
    dropped = int(rng.integers(len(values))) if rng.random() < missing_rate else -1
    for position, (relation, value) in enumerate(values):
        if position != dropped:
            builder.add_triple(entity_key, relation, f"AttributeValue:{relation}={value}")


def _build_support(builder, records, latent, config, rng):
    """DSE and RPT nodes; returns per-company counts of risky and total support links."""
    n = len(records)
    keys = [company_year_key(firm, year) for firm, year in records]
    years = np.array([year for _, year in records])
    by_year = {year: np.flatnonzero(years == year) for year in np.unique(years).tolist()}
    plant = config.signal_location == "support"
    risky = np.zeros(n)
    total = np.zeros(n)

    n_support = int(round(config.support_ratio * n))
    n_dse = int(round(config.dse_share * n_support))
    n_rpt = n_support - n_dse

    previous = {}
    person_traits = {}
    next_person = 0
    for company, count in enumerate(_allocate(n_dse, n, rng).tolist()):
        firm, year = records[company]
        carry = list(previous.get(firm, ()))
        current = []
        for _ in range(count):
            if carry and rng.random() < config.dse_persistence:
                person = carry.pop(0)
            else:
                person = next_person
                next_person += 1
                person_traits[person] = (DSE_ROLES[int(rng.integers(len(DSE_ROLES)))],
                                         DSE_GENDERS[int(rng.integers(len(DSE_GENDERS)))])
            current.append(person)
            dse_key = f"DSE:P{person:06d}@{year}"
            high = rng.random() < (HIGH_RISK_RATE[int(latent[company])] if plant else HIGH_RISK_RATE[0])
            builder.add_triple(dse_key, SERVES_AT, keys[company])
            builder.add_triple(dse_key, SAME_PERSON, f"DSEMeta:P{person:06d}")
            role, gender = person_traits[person]
            _attribute_triples(builder, dse_key, [("dse_role", role), ("dse_gender", gender),
                                                  ("dse_risk_flag", "high" if high else "low")],
                               config.support_missing_rate, rng)
            served = [company]
            if rng.random() < config.dse_share_prob:
                partner = _pick_partner(company, by_year[year], latent, config.rpt_homophily, rng)
                if partner is not None:
                    builder.add_triple(dse_key, SERVES_AT, keys[partner])
                    served.append(partner)
            for c in served:
                risky[c] += high
                total[c] += 1
        previous[firm] = current

    rpt_id = 0
    for company, count in enumerate(_allocate(n_rpt, n, rng).tolist()):
        year = records[company][1]
        for _ in range(count):
            rpt_key = f"RPT:R{rpt_id:07d}"
            rpt_id += 1
            rate = RISKY_RPT_RATE[int(latent[company])] if plant else RISKY_RPT_RATE[0]
            if rng.random() < rate:
                rpt_type = RISKY_RPT_TYPE
            else:
                others = [t for t in RPT_TYPES if t != RISKY_RPT_TYPE]
                rpt_type = others[int(rng.integers(len(others)))]
            builder.add_triple(keys[company], RELATED_PARTY, rpt_key)
            parties = [company]
            partner = _pick_partner(company, by_year[year], latent, config.rpt_homophily, rng)
            if partner is not None:
                builder.add_triple(keys[partner], RELATED_PARTY, rpt_key)
                parties.append(partner)
            _attribute_triples(builder, rpt_key, [
                ("rpt_type", rpt_type),
                ("rpt_amount_band", AMOUNT_BANDS[int(rng.integers(len(AMOUNT_BANDS)))]),
            ], config.support_missing_rate, rng)
            for c in parties:
                risky[c] += rpt_type == RISKY_RPT_TYPE
                total[c] += 1
    return risky, total


def company_graph(fkg):
    """Binary company adjacency: shared transactions or shared directors."""
    counts = build_weight_matrix(fkg, PREDEFINED["RPT"]).counts + \
        build_weight_matrix(fkg, PREDEFINED["SDSE"]).counts
    adjacency = sp.csr_matrix(counts, dtype=np.int64)
    adjacency.data[:] = 1
    return adjacency


# =============================================================================
# Labels
# =============================================================================

def calibrate_intercept(score, target, low=-30.0, high=30.0, iterations=100):
    """Intercept a with mean(sigmoid(a + score)) == target, by bisection."""
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        if expit(mid + score).mean() < target:
            low = mid
        else:
            high = mid
    return 0.5 * (low + high)


def _draw_clean_labels(score, config, rng):
    intercept = calibrate_intercept(score, config.fraud_base_rate)
    probability = expit(intercept + score)
    target = config.fraud_base_rate
    for _ in range(MAX_LABEL_DRAWS):
        labels = (rng.random(len(score)) < probability).astype(np.int64)
        if abs(labels.mean() - target) <= RATIO_TOLERANCE * target:
            return labels
    raise ConfigError(f"Could not draw a fraud ratio within {RATIO_TOLERANCE:.0%} of {target} "
                      f"in {MAX_LABEL_DRAWS} attempts")


def generate_fkg(config):
    """
    Generate the graph and clean labels.

    Returns:
        (FKG labelled with clean labels, GroundTruth with noisy == clean)
    """
    rng = np.random.default_rng(config.seed)
    records = _company_years(config, rng)
    n = len(records)
    latent = (rng.random(n) < config.fraud_base_rate).astype(np.int64)

    builder = FKGBuilder()
    for firm, year in records:
        builder.add_entity(company_year_key(firm, year))
    for firm, year in records:
        builder.add_triple(company_year_key(firm, year), SAME_COMPANY, f"CompanyMeta:{firm}")
    risky, total = _build_support(builder, records, latent, config, rng)

    attributes = rng.standard_normal((n, config.d_att))
    if config.signal_location == "attributes" and config.signal_dims:
        attributes[:, :config.signal_dims] += config.attr_shift * latent[:, None]
        signal = attributes[:, :config.signal_dims].sum(axis=1) / np.sqrt(config.signal_dims)
    elif config.signal_location == "support":
        risky_share = np.where(total > 0, risky / np.maximum(total, 1), NEUTRAL_RISK)
        signal = SUPPORT_SIGNAL_SCALE * config.attr_shift * (risky_share - NEUTRAL_RISK)
    else:
        signal = np.zeros(n)
    observed = rng.random((n, config.d_att)) >= config.attr_missing_rate
    years = np.array([year for _, year in records], dtype=np.int64)
    names = [f"f_{k}" for k in range(config.d_att)]
    fkg = builder.build(np.where(observed, attributes, 0.0), observed, names, LabelTable.empty(years))

    graph = company_graph(fkg)
    degree = np.asarray(graph.sum(axis=1)).ravel()
    density = np.where(degree > 0, (graph @ latent) / np.maximum(degree, 1), 0.0)
    clean = _draw_clean_labels(config.attr_coef * signal + config.neighbor_coef * density, config, rng)

    fraud_years = np.where(clean == 1, years.astype(np.float64), np.nan)
    truth = GroundTruth(
        company_keys=[firm for firm, _ in records],
        years=years,
        latent=latent,
        risk_score=signal,
        clean=clean,
        noisy=clean.copy(),
        flip_prob=np.zeros(n),
        violation_year=fraud_years,
        declared_year=fraud_years.copy(),
    )
    logger.info(f"Generated {n} company-years, {fkg.n_entities} entities, {fkg.n_triples} triples, "
                f"{int(clean.sum())} clean frauds")
    return fkg.with_labels(truth.label_table()), truth


def gap_tail_probability(config):
    """Success probability q of the geometric tail so that P(gap > tail_year) hits the target."""
    return 1.0 - (config.gap_tail_share / (1.0 - config.gap_zero_share)) ** (1.0 / config.gap_tail_year)


def sample_gaps(n, config, rng):
    """Declared-minus-violation years: 0 with gap_zero_share, else geometric on 1, 2, ..."""
    q = gap_tail_probability(config)
    gaps = rng.geometric(q, size=n)
    return np.where(rng.random(n) < config.gap_zero_share, 0, gaps)


def flip_probabilities(clean, fraud_neighbors, risk_score, config):
    """Two-regime hidden-fraud probability; non-frauds never flip."""
    base = np.where(fraud_neighbors >= config.neighbor_threshold, config.flip_high, config.flip_low)
    if config.flip_attr_coef:
        interior = (base > 0) & (base < 1)
        modulated = expit(logit(np.clip(base, 1e-12, 1 - 1e-12)) + config.flip_attr_coef * risk_score)
        base = np.where(interior, modulated, base)
    return np.where(clean == 1, base, 0.0)


def inject_hidden_fraud(truth, fkg, graph, config, rng=None):
    """
    Hide frauds with their instance- and neighbour-dependent flip probability.
    Frauds whose sampled declaration falls after ``year_end`` stay hidden too.

    Returns:
        New GroundTruth with noisy labels and declared years for observed frauds.
    """
    rng = np.random.default_rng([config.seed, 1]) if rng is None else rng
    graph = company_graph(fkg) if graph is None else graph
    fraud_neighbors = np.asarray(graph @ truth.clean).ravel()
    flip_prob = flip_probabilities(truth.clean, fraud_neighbors, truth.risk_score, config)
    hidden = rng.random(len(truth.clean)) < flip_prob
    gaps = sample_gaps(len(hidden), config, rng)
    declared = truth.violation_year + gaps
    # not declared by the end of the record: still hidden
    late = (truth.clean == 1) & ~hidden & (declared > config.year_end)
    noisy = np.where(hidden | late, 0, truth.clean).astype(np.int64)
    declared = np.where(noisy == 1, declared, np.nan)
    logger.info(f"Hid {int(hidden.sum())} of {int(truth.clean.sum())} frauds, "
                f"{int(late.sum())} more declared after {config.year_end}")
    return GroundTruth(
        company_keys=truth.company_keys,
        years=truth.years,
        latent=truth.latent,
        risk_score=truth.risk_score,
        clean=truth.clean,
        noisy=noisy,
        flip_prob=flip_prob,
        violation_year=truth.violation_year,
        declared_year=declared,
    )


def generate_dataset(config):
    fkg, truth = generate_fkg(config)
    graph = company_graph(fkg)
    truth = inject_hidden_fraud(truth, fkg, graph, config)
    return SyntheticDataset(fkg.with_labels(truth.label_table()), truth, graph, config)


def write_dataset(dataset, out_dir):
    """The three graph files plus ground_truth.csv."""
    out_dir = Path(out_dir)
    write_fkg_dir(dataset.fkg, out_dir)
    dataset.ground_truth.to_frame().to_csv(out_dir / "ground_truth.csv", index=False)
    logger.info(f"Wrote synthetic dataset to {out_dir}")


def load_ground_truth(path):
    return pd.read_csv(path, dtype={"company_key": str})

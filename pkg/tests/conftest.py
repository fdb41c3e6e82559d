import copy

import numpy as np
import pytest

from kegraph.config import RunConfig
from kegraph.graph_store import FKGBuilder, LabelTable, company_year_key, load_fkg_dir

TOY_TRIPLES = """\
# company meta links
CompanyYear:A@2010\tsame_company_as\tCompanyMeta:A
CompanyYear:A@2011\tsame_company_as\tCompanyMeta:A
CompanyYear:B@2010\tsame_company_as\tCompanyMeta:B
CompanyYear:C@2011\tsame_company_as\tCompanyMeta:C
CompanyYear:A@2010\trelated_party\tRPT:r1
CompanyYear:B@2010\trelated_party\tRPT:r1
DSE:p1@2010\tserves_at\tCompanyYear:A@2010
DSE:p1@2010\tserves_at\tCompanyYear:B@2010
DSE:p1@2010\tsame_person_as\tDSEMeta:p1
DSE:p1@2011\tserves_at\tCompanyYear:A@2011
DSE:p1@2011\tserves_at\tCompanyYear:C@2011
DSE:p1@2011\tsame_person_as\tDSEMeta:p1
DSE:p1@2010\tdse_role\tAttributeValue:dse_role=chair
"""

TOY_ATTRIBUTES = """\
company_key,year,f_0,f_1
A,2010,1.0,
A,2011,2.0,0.5
B,2010,3.0,1.5
C,2011,,2.5
"""

TOY_LABELS = """\
company_key,year,label,violation_year,declared_year
A,2010,1,2010,2012
A,2011,0,,
B,2010,0,,
C,2011,1,2011,2011
"""

# Company ids: 0 = A@2010, 1 = A@2011, 2 = B@2010, 3 = C@2011
TOY_COUNTS = {
    "SC": {(0, 1): 1, (1, 0): 1},
    "RPT": {(0, 2): 1, (2, 0): 1},
    "SDSE": {(0, 2): 1, (2, 0): 1, (1, 3): 1, (3, 1): 1},
}

SMALL_VALUES = {
    "synth": {"n_companies": 150, "support_ratio": 3.0, "d_att": 6, "signal_dims": 3,
              "attr_shift": 2.0, "fraud_base_rate": 0.25, "seed": 1},
    "kge": {"dim": 8, "max_steps": 30, "batch_size": 64},
    "model": {"hidden_dim": 4, "learning_rate": 0.05},
    "robust": {"reference_epochs": 30, "transition_epochs": 30, "transition_hidden": 8},
    "harness": {"seeds": [0], "max_epochs": 20, "patience": 5, "progress": False},
}


def write_toy_files(directory, triples=TOY_TRIPLES, attributes=TOY_ATTRIBUTES, labels=TOY_LABELS):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "triples.tsv").write_text(triples, encoding="utf-8")
    (directory / "attributes.csv").write_text(attributes, encoding="utf-8")
    (directory / "labels.csv").write_text(labels, encoding="utf-8")
    return directory


@pytest.fixture
def toy_dir(tmp_path):
    return write_toy_files(tmp_path / "toy")


@pytest.fixture
def toy_fkg(toy_dir):
    return load_fkg_dir(toy_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def companies_only_fkg(labels, years, attributes=None):
    """An FKG of bare company-years, for split and preprocessing tests."""
    builder = FKGBuilder()
    for i, year in enumerate(years):
        builder.add_entity(company_year_key(f"c{i}", year))
    n = len(years)
    attributes = np.zeros((n, 1)) if attributes is None else np.asarray(attributes, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    fraud_years = np.where(labels == 1, np.asarray(years, dtype=float), np.nan)
    table = LabelTable(noisy=labels, violation_year=fraud_years, declared_year=fraud_years.copy(),
                       record_year=np.asarray(years, dtype=np.int64))
    names = [f"f_{k}" for k in range(attributes.shape[1])]
    return builder.build(attributes, np.ones_like(attributes, dtype=bool), names, table)


def small_values(**sections):
    values = copy.deepcopy(SMALL_VALUES)
    for section, entries in sections.items():
        values.setdefault(section, {}).update(entries)
    return values


@pytest.fixture
def small_config(tmp_path):
    values = small_values(paths={"results_dir": str(tmp_path / "results")})
    return RunConfig(values)


@pytest.fixture(scope="session")
def small_data():
    from kegraph.harness import load_experiment_data
    return load_experiment_data(RunConfig(copy.deepcopy(SMALL_VALUES)))

import numpy as np
import pytest
from scipy.stats import chisquare

from kegraph import numeric_core as nc
from kegraph.errors import (
    ConfigError, ContractError, DanglingReferenceError, ParseError, SamplingError,
)
from kegraph.graph_store import FKGBuilder, LabelTable
from kegraph.kge import (
    EmbeddingTable, KgeConfig, NegativeSampler, extract_company_embeddings, initialize_table,
    load_table, margin_loss, mean_rank, negative_sample, save_table, train_kge, transe_score,
)


def test_transe_score_by_hand():
    entity = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    relation = np.array([[-1.0, 1.0]])
    table = EmbeddingTable(entity, relation, "L1")
    assert transe_score(table, (0, 0, 1)) == 0.0
    assert transe_score(table, (0, 0, 2)) == pytest.approx(-1.0)
    l2 = EmbeddingTable(entity, relation, "L2")
    assert transe_score(l2, (0, 0, 2)) == pytest.approx(-np.sqrt(0.5))


def test_transe_score_out_of_range():
    table = EmbeddingTable(np.zeros((2, 3)), np.zeros((1, 3)))
    with pytest.raises(DanglingReferenceError):
        transe_score(table, (0, 0, 2))
    with pytest.raises(DanglingReferenceError):
        transe_score(table, (0, 1, 1))


def test_negatives_keep_kinds_and_avoid_known_triples(small_data, rng):
    fkg = small_data.fkg
    positives = fkg.triples[rng.choice(fkg.n_triples, size=300, replace=False)]
    negatives = NegativeSampler(fkg).sample(positives, 3, rng)
    repeated = np.repeat(positives, 3, axis=0)
    assert negatives.shape == repeated.shape
    changed = negatives != repeated
    assert np.all(changed[:, 1] == 0)
    assert np.all(changed[:, 0] ^ changed[:, 2])
    np.testing.assert_array_equal(fkg.entity_kinds[negatives[:, 0]], fkg.entity_kinds[repeated[:, 0]])
    np.testing.assert_array_equal(fkg.entity_kinds[negatives[:, 2]], fkg.entity_kinds[repeated[:, 2]])
    known = fkg.triple_set()
    assert not any(tuple(row) in known for row in negatives.tolist())


def test_negative_sample_single_triple(toy_fkg, rng):
    triple = tuple(toy_fkg.triples[4])
    corrupted = negative_sample(triple, toy_fkg, 4, rng)
    assert len(corrupted) == 4
    assert all(c.relation == triple[1] for c in corrupted)


def test_single_member_kinds_cannot_be_corrupted(rng):
    builder = FKGBuilder()
    builder.add_triple("CompanyYear:A@2010", "same_company_as", "CompanyMeta:A")
    fkg = builder.build(np.zeros((1, 1)), np.ones((1, 1), dtype=bool), ["f_0"],
                        LabelTable.empty([2010]))
    with pytest.raises(SamplingError):
        NegativeSampler(fkg).sample(fkg.triples, 1, rng)
    with pytest.raises(ContractError):
        NegativeSampler(fkg).sample(fkg.triples, 0, rng)


@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_margin_loss_gradient(toy_fkg, rng, norm):
    config = KgeConfig(dim=4, norm=norm, margin=2.0)
    entity, relation, _ = initialize_table(toy_fkg.n_entities, toy_fkg.n_relations, config)
    negatives = NegativeSampler(toy_fkg).sample(toy_fkg.triples, 1, rng)
    result = nc.gradient_check(
        lambda p: margin_loss(p, toy_fkg.triples, negatives, config),
        {"entity": entity, "relation": relation},
    )
    assert result.passed, result


def test_margin_loss_value(rng):
    config = KgeConfig(dim=2, margin=1.0)
    params = {"entity": nc.Tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]]),
              "relation": nc.Tensor([[1.0, 0.0]])}
    # d(pos) = 0, d(neg) = 4 -> max(0, 1 + 0 - 4) = 0; d(neg') = 0 -> 1
    positives = np.array([[0, 0, 1], [0, 0, 1]])
    negatives = np.array([[0, 0, 2], [0, 0, 1]])
    assert margin_loss(params, positives, negatives, config).item() == pytest.approx(0.5)


def test_training_reduces_loss_and_bounds_norms(toy_fkg):
    config = KgeConfig(dim=8, learning_rate=0.05, max_steps=300, batch_size=64, seed=3)
    table = train_kge(toy_fkg, config)
    history = np.array(table.loss_history)
    assert len(history) == 300
    assert history[-20:].mean() < history[:20].mean()
    assert np.all(np.linalg.norm(table.entity, axis=1) <= 1.0 + 1e-12)
    assert extract_company_embeddings(table, toy_fkg).shape == (4, 8)
    assert mean_rank(table, toy_fkg) >= 1.0


def test_training_is_deterministic(toy_fkg):
    config = KgeConfig(dim=4, max_steps=20, seed=5)
    first, second = train_kge(toy_fkg, config), train_kge(toy_fkg, config)
    np.testing.assert_array_equal(first.entity, second.entity)
    np.testing.assert_array_equal(first.relation, second.relation)


def company_graph_fkg(n_companies, triples):
    builder = FKGBuilder()
    for i in range(n_companies):
        builder.add_entity(f"CompanyYear:C{i}@2010")
    for triple in triples:
        builder.add_triple(*triple)
    return builder.build(np.zeros((n_companies, 1)), np.ones((n_companies, 1), dtype=bool), ["f_0"],
                         LabelTable.empty(np.full(n_companies, 2010)))


def test_zero_steps_returns_the_initial_table(toy_fkg):
    config = KgeConfig(dim=4, max_steps=0, seed=2)
    table = train_kge(toy_fkg, config)
    entity, relation, _ = initialize_table(toy_fkg.n_entities, toy_fkg.n_relations, config)
    np.testing.assert_array_equal(table.entity, entity)
    np.testing.assert_array_equal(table.relation, relation)
    assert table.loss_history == ()


def test_training_orients_a_single_edge():
    fkg = company_graph_fkg(2, [("CompanyYear:C0@2010", "related_party", "CompanyYear:C1@2010")])
    table = train_kge(fkg, KgeConfig(dim=4, learning_rate=0.05, max_steps=1000, seed=0))
    assert transe_score(table, (0, 0, 1)) > transe_score(table, (1, 0, 0))


def test_companies_sharing_transactions_embed_close():
    fkg = company_graph_fkg(4, [
        ("CompanyYear:C0@2010", "related_party", "RPT:t0"),
        ("CompanyYear:C1@2010", "related_party", "RPT:t0"),
        ("CompanyYear:C0@2010", "related_party", "RPT:t1"),
        ("CompanyYear:C1@2010", "related_party", "RPT:t1"),
        ("CompanyYear:C2@2010", "related_party", "RPT:t2"),
        ("CompanyYear:C3@2010", "related_party", "RPT:t2"),
        ("CompanyYear:C2@2010", "related_party", "RPT:t3"),
        ("CompanyYear:C3@2010", "related_party", "RPT:t3"),
    ])
    table = train_kge(fkg, KgeConfig(dim=8, learning_rate=0.05, max_steps=1000, seed=1))
    x = extract_company_embeddings(table, fkg)

    def cosine(i, j):
        return x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))

    assert cosine(0, 1) > cosine(0, 2)


def test_replacement_companies_are_uniform(rng):
    fkg = company_graph_fkg(10, [("CompanyYear:C0@2010", "related_party", "RPT:t0")])
    # the single transaction cannot be swapped, so every draw replaces the head
    negatives = NegativeSampler(fkg).sample(fkg.triples, 10_000, rng)
    assert np.all(negatives[:, 2] == fkg.triples[0, 2])
    counts = np.bincount(negatives[:, 0], minlength=10)
    assert counts[0] == 0
    assert chisquare(counts[1:]).pvalue > 1e-3
    sigma = np.sqrt(10_000 * (1 / 9) * (8 / 9))
    assert np.all(np.abs(counts[1:] - 10_000 / 9) <= 4 * sigma)


def test_empty_graph_cannot_train():
    fkg = FKGBuilder().build(np.zeros((0, 1)), np.zeros((0, 1), dtype=bool), ["f_0"],
                             LabelTable.empty([]))
    with pytest.raises(ContractError):
        train_kge(fkg, KgeConfig(max_steps=1))


@pytest.mark.parametrize("changes", [{"dim": 0}, {"norm": "L3"}, {"max_steps": -1},
                                     {"learning_rate": 0.0}])
def test_config_validation(changes):
    with pytest.raises(ConfigError):
        KgeConfig(**changes)


def test_table_save_load(toy_fkg, tmp_path):
    table = train_kge(toy_fkg, KgeConfig(dim=4, max_steps=5, norm="L2"))
    path = tmp_path / "kge" / "table.bin"
    save_table(table, path, toy_fkg)
    again = load_table(path)
    np.testing.assert_array_equal(again.entity, table.entity)
    np.testing.assert_array_equal(again.relation, table.relation)
    assert again.norm == "L2"
    index = path.with_suffix(".tsv").read_text(encoding="utf-8").splitlines()
    assert index[0] == "entity_id\tkind\tkey"
    assert index[1] == "0\tCompanyYear\tCompanyYear:A@2010"


def test_load_table_rejects_damaged_files(toy_fkg, tmp_path):
    table = train_kge(toy_fkg, KgeConfig(dim=4, max_steps=1))
    path = tmp_path / "table.bin"
    save_table(table, path)
    raw = path.read_bytes()

    (tmp_path / "short.bin").write_bytes(raw[:10])
    (tmp_path / "magic.bin").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    for name in ("short.bin", "magic.bin", "cut.bin"):
        with pytest.raises(ParseError):
            load_table(tmp_path / name)

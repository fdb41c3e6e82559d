import json

import numpy as np
import pandas as pd
import pytest

from kegraph.config import RunConfig
from kegraph.errors import ConfigError, ParseError, SchemaError
from kegraph.harness import (
    SCHEMA_VERSION, aggregate_reports, build_graph_inputs, evaluate_checkpoint, json_ready,
    load_experiment_data, preprocess_attributes, run_experiment, run_seed, split_dataset, stage,
    standard_error, summarize_runs,
)
from kegraph.synth import SynthConfig, generate_dataset

from conftest import companies_only_fkg, small_values


# =============================================================================
# Preprocessing
# =============================================================================

def test_preprocess_imputes_then_scales():
    values = np.array([[1.0], [0.0], [3.0]])
    mask = np.array([[True], [False], [True]])
    result = preprocess_attributes(values, mask, np.arange(3))
    np.testing.assert_allclose(result.values[:, 0], [0.0, 0.5, 1.0])
    assert result.means[0] == 2.0


def test_preprocess_constant_and_empty_columns(caplog):
    values = np.array([[5.0, 1.0, 0.0], [5.0, 2.0, 0.0], [5.0, 3.0, 7.0]])
    mask = np.array([[True, True, False], [True, True, False], [True, True, True]])
    result = preprocess_attributes(values, mask, np.array([0, 1]), names=["a", "b", "c"])
    assert result.dropped_columns == ["c"]
    assert result.kept_columns == ["a", "b"]
    assert np.all(result.values[:, 0] == 0.0)
    # the test row is clipped into the training range
    np.testing.assert_allclose(result.values[:, 1], [0.0, 1.0, 1.0])
    assert "Dropping 1 attribute columns" in caplog.text


def test_preprocess_uses_training_rows_only(rng):
    values = rng.normal(size=(10, 3))
    mask = np.ones((10, 3), dtype=bool)
    train = np.arange(6)
    before = preprocess_attributes(values, mask, train)
    changed = values.copy()
    changed[6:] *= 100.0
    after = preprocess_attributes(changed, mask, train)
    np.testing.assert_array_equal(before.means, after.means)
    np.testing.assert_array_equal(before.values[train], after.values[train])
    assert np.all((after.values >= 0) & (after.values <= 1))


def test_preprocess_without_any_observed_column():
    with pytest.raises(SchemaError):
        preprocess_attributes(np.zeros((3, 2)), np.zeros((3, 2), dtype=bool), np.arange(3))


# =============================================================================
# Splitting
# =============================================================================

def test_split_sizes_and_stratification():
    labels = np.array([1] * 13 + [0] * 87)
    fkg = companies_only_fkg(labels, [2010] * 100)
    split = split_dataset(fkg, seed=3, clean_years=0)
    assert (len(split.train), len(split.valid), len(split.test)) == (60, 20, 20)
    assert labels[split.test].sum() == 3
    assert labels[split.valid].sum() == 3
    everything = np.concatenate([split.train, split.valid, split.test])
    assert sorted(everything.tolist()) == list(range(100))
    assert split.test_shortfall == 0


def test_split_applies_clean_test_rule():
    years = [2000 + (i % 21) for i in range(200)]
    labels = np.array([1 if i % 7 == 0 else 0 for i in range(200)])
    fkg = companies_only_fkg(labels, years)
    split = split_dataset(fkg, seed=0, clean_years=8)
    test_non = split.test[labels[split.test] == 0]
    assert np.all(np.asarray(years)[test_non] <= 2020 - 8)
    assert split.horizon == 2020


def test_clean_test_rule_boundary_year():
    # horizon 2020: non-frauds from 2012 qualify, 2013 do not
    labels = np.array([1] * 10 + [0] * 10 + [0] * 30)
    years = [2020] * 10 + [2012] * 10 + [2013] * 30
    fkg = companies_only_fkg(labels, years)
    split = split_dataset(fkg, seed=5, clean_years=8)
    test_non = split.test[labels[split.test] == 0]
    assert len(test_non) == 8 and split.test_shortfall == 0
    assert set(np.asarray(years)[test_non]) == {2012}
    assert labels[split.test].sum() == 2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clean_test_rule_holds_on_synthetic_data(small_data, seed):
    fkg = small_data.fkg
    split = split_dataset(fkg, seed)
    years = fkg.labels.record_year
    test_non = split.test[fkg.labels.noisy[split.test] == 0]
    assert len(test_non) > 0
    assert np.all(years[test_non] <= years.max() - 8)


def test_split_without_eligible_non_frauds(caplog):
    labels = np.array([1] * 10 + [0] * 40)
    fkg = companies_only_fkg(labels, [2020] * 50)
    split = split_dataset(fkg, seed=1, clean_years=8)
    assert labels[split.test].tolist() == [1, 1]
    assert split.test_shortfall == 8
    assert "clean-test rule" in caplog.text


def test_split_is_seeded():
    labels = np.array([1] * 10 + [0] * 40)
    fkg = companies_only_fkg(labels, [2010] * 50)
    first, second = split_dataset(fkg, seed=4, clean_years=0), split_dataset(fkg, seed=4, clean_years=0)
    np.testing.assert_array_equal(first.test, second.test)


def test_split_ratio_validation():
    fkg = companies_only_fkg([0, 1], [2010, 2010])
    with pytest.raises(ConfigError):
        split_dataset(fkg, 0, ratios=(0.5, 0.5, 0.5))


# =============================================================================
# Pipeline
# =============================================================================

def test_stage_attaches_context():
    with pytest.raises(ConfigError) as excinfo:
        with stage("kge", 3):
            raise ConfigError("boom")
    assert excinfo.value.stage == "kge"
    assert excinfo.value.seed == 3
    assert str(excinfo.value) == "[stage=kge, seed=3] boom"


def test_generated_data_matches_loaded_data(small_data):
    again = generate_dataset(SynthConfig.from_section(RunConfig(small_values()).section("synth")))
    assert small_data.is_synthetic and small_data.source == "synthetic"
    np.testing.assert_array_equal(again.fkg.labels.noisy, small_data.fkg.labels.noisy)
    np.testing.assert_array_equal(again.ground_truth.clean, small_data.clean_labels)


def test_run_seed_without_robust_training(small_data):
    config = RunConfig(small_values(harness={"mode": "wo_robust"}))
    graphs = build_graph_inputs(small_data.fkg, config)
    result = run_seed(small_data, graphs, config, seed=0)
    metrics = result.metrics
    assert metrics["n_train"] + metrics["n_valid"] + metrics["n_test"] == 150
    assert metrics["asymmetry_violations"] == 0
    assert 0.0 <= metrics["test_auc"] <= 1.0
    assert result.sieve is None
    assert {row["level"] for row in result.attention} == {"relation", "branch"}


def test_mwgcn_sum_uses_the_sum_graph(small_data):
    config = RunConfig(small_values(harness={"mode": "mwgcn_sum"}))
    graphs = build_graph_inputs(small_data.fkg, config)
    result = run_seed(small_data, graphs, config, seed=0)
    assert result.model.metapath_names == ["sum_up"]
    assert result.attention == []


def test_full_run_writes_every_artifact(small_config, small_data, tmp_path):
    small_config.set("harness", "mode", "full")
    out = tmp_path / "full"
    report = run_experiment(small_config, data=small_data, out_dir=out)
    for name in ("config.json", "metrics.json", "curves.csv", "attention.csv",
                 "seed_0/checkpoint.npz", "seed_0/checkpoint.json", "seed_0/sieve.csv",
                 "seed_0/gamma.csv"):
        assert (out / name).exists(), name

    metrics = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["schema_version"] == SCHEMA_VERSION
    assert metrics["mode"] == "full"
    assert metrics["seeds"] == [0]
    assert metrics["dataset"]["synthetic"] is True
    run = metrics["runs"][0]
    assert "sieve" in run and run["sieve"]["n_train"] == run["n_train"]
    assert run["sieve"]["kept_bayes_fraud"] > 0 and run["sieve"]["kept_bayes_non_fraud"] > 0
    assert report.summary["test_auc"]["n"] == 1

    gamma = pd.read_csv(out / "seed_0" / "gamma.csv")
    assert len(gamma) == run["n_train"]
    assert gamma["gamma_hat"].between(0, 1).all()
    curves = pd.read_csv(out / "curves.csv")
    assert list(curves.columns) == ["seed", "epoch", "train_loss", "valid_auc"]


def test_runs_are_reproducible(small_data, tmp_path):
    texts = []
    for parent in ("first", "second"):
        config = RunConfig(small_values(harness={"mode": "full", "seeds": [7]}))
        out = tmp_path / parent / "run"
        run_experiment(config, data=small_data, out_dir=out)
        texts.append(((out / "metrics.json").read_text(encoding="utf-8"),
                      (out / "curves.csv").read_text(encoding="utf-8")))
    assert texts[0] == texts[1]


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_sieve_keeps_both_estimated_classes(small_data, seed):
    config = RunConfig(small_values(harness={"mode": "full"}))
    graphs = build_graph_inputs(small_data.fkg, config)
    result = run_seed(small_data, graphs, config, seed=seed)
    assert result.sieve.diagnostics["kept_bayes_fraud"] > 0
    assert result.sieve.diagnostics["kept_bayes_non_fraud"] > 0
    assert 0 < result.transition_state.gamma.min() <= result.transition_state.gamma.max() < 1


def test_checkpoint_evaluation_reproduces_test_auc(small_data, tmp_path):
    config = RunConfig(small_values(harness={"mode": "wo_robust"}))
    out = tmp_path / "run"
    report = run_experiment(config, data=small_data, out_dir=out)
    result = evaluate_checkpoint(out / "seed_0" / "checkpoint", config, data=small_data)
    assert result["mode"] == "wo_robust"
    assert result["test_auc"] == report.runs[0]["test_auc"]


def test_bad_seeds_are_rejected(small_config):
    small_config.set("harness", "seeds", ["a"])
    with pytest.raises(ConfigError):
        run_experiment(small_config)


# =============================================================================
# Reports
# =============================================================================

def test_summaries():
    assert standard_error([1.0]) == 0.0
    assert standard_error([1.0, 3.0]) == pytest.approx(1.0)
    runs = [{"seed": 0, "test_auc": 0.6}, {"seed": 1, "test_auc": 0.8}, {"seed": 2, "test_auc": None}]
    summary = summarize_runs(runs)
    assert summary["test_auc"]["n"] == 2
    assert summary["test_auc"]["mean"] == pytest.approx(0.7)
    assert "valid_auc" not in summary


def write_metrics(path, mode, values, version=SCHEMA_VERSION):
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"schema_version": version, "mode": mode, "run_name": path.parent.name,
               "runs": [{"seed": i, "test_auc": v} for i, v in enumerate(values)]}
    path.write_text(json.dumps(payload), encoding="utf-8")


def test_aggregate_reports(tmp_path):
    write_metrics(tmp_path / "a" / "metrics.json", "full", [0.7, 0.8, 0.9])
    write_metrics(tmp_path / "b" / "metrics.json", "wo_robust", [0.6, 0.65])
    table = aggregate_reports([tmp_path])
    assert list(table.columns) == ["mode", "run_name", "metric", "mean", "stderr", "n"]
    full = table[table["mode"] == "full"].iloc[0]
    assert full["mean"] == pytest.approx(0.8)
    assert full["stderr"] == pytest.approx(0.1 / np.sqrt(3))
    assert full["n"] == 3


def test_aggregate_rejects_other_schema_major(tmp_path):
    write_metrics(tmp_path / "metrics.json", "full", [0.7], version="2.0")
    with pytest.raises(SchemaError):
        aggregate_reports([tmp_path / "metrics.json"])


def test_aggregate_rejects_unreadable_files(tmp_path):
    path = tmp_path / "metrics.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        aggregate_reports([path])


def test_json_ready():
    assert json_ready({"a": np.float64("nan"), "b": [np.int64(3), 0.5]}) == {"a": None, "b": [3, 0.5]}


# =============================================================================
# Reproductions (slow)
# =============================================================================

FIVE_SEEDS = [0, 1, 2, 3, 4]


def default_config(mode, **sections):
    values = {"harness": {"mode": mode, "seeds": FIVE_SEEDS, "progress": False}}
    for section, entries in sections.items():
        values.setdefault(section, {}).update(entries)
    return RunConfig(values)


def per_seed(report, metric):
    return np.array([run[metric] for run in report.runs])


@pytest.mark.slow
def test_full_mode_completes_on_default_synthetic_data(tmp_path):
    config = default_config("full")
    report = run_experiment(config, out_dir=tmp_path / "full")
    assert [run["seed"] for run in report.runs] == FIVE_SEEDS
    for run in report.runs:
        assert run["sieve"]["kept_bayes_fraud"] > 0
        assert run["sieve"]["kept_bayes_non_fraud"] > 0
        assert run["asymmetry_violations"] == 0
    for seed in FIVE_SEEDS:
        assert (tmp_path / "full" / f"seed_{seed}" / "gamma.csv").exists()


@pytest.mark.slow
def test_robust_training_beats_weighted_cross_entropy_on_clean_labels(tmp_path):
    data = load_experiment_data(default_config("full"))
    reports = {mode: run_experiment(default_config(mode), data=data, out_dir=tmp_path / mode)
               for mode in ("full", "wo_robust")}
    gaps = per_seed(reports["full"], "clean_test_auc") - per_seed(reports["wo_robust"], "clean_test_auc")
    assert gaps.mean() >= 0.02
    assert (gaps > 0).sum() >= 4


@pytest.mark.slow
def test_knowledge_embeddings_help_when_signal_sits_in_support_nodes(tmp_path):
    synth = {"signal_location": "support"}
    data = load_experiment_data(default_config("full", synth=synth))
    aucs = {mode: per_seed(run_experiment(default_config(mode, synth=synth), data=data,
                                          out_dir=tmp_path / mode), "clean_test_auc")
            for mode in ("full", "wo_ke")}
    assert aucs["full"].mean() - aucs["wo_ke"].mean() >= 0.05


@pytest.mark.slow
def test_transition_model_ranks_hidden_fraud_regimes(tmp_path):
    config = default_config("full", synth={"flip_high": 0.6, "flip_low": 0.1, "neighbor_threshold": 2,
                                           "flip_attr_coef": 0.0})
    report = run_experiment(config, out_dir=tmp_path / "run")
    assert report.summary["gamma_regime_gap"]["mean"] >= 0.2

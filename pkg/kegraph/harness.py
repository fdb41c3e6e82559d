"""
Experiment harness: attribute preprocessing, clean-test splitting, the
per-seed training pipeline for every mode, and result persistence.
"""

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from packaging.version import Version
from sklearn.impute import SimpleImputer
from sklearn.preprocessing import MinMaxScaler
from tqdm import tqdm

from kegraph.errors import (
    ConfigError,
    DimensionError,
    KegraphError,
    MetricError,
    ParseError,
    SchemaError,
)
from kegraph.graph_store import load_fkg_dir
from kegraph.kge import KgeConfig, extract_company_embeddings, load_table, mean_rank, save_table, train_kge
from kegraph.metapath import SUM_UP, build_subgraphs, resolve_metapaths, sum_up_graph
from kegraph.metrics import auc, class_weights, weighted_nll
from kegraph.model import KeModel, ModeFlags, ModelConfig, load_checkpoint, save_checkpoint
from kegraph.robust import (
    SieveConfig,
    TransitionConfig,
    TransitionState,
    collect_bayes_labels,
    forward_corrected_loss,
    train_transition_model,
    write_gamma_csv,
    write_sieve_csv,
)
from kegraph.synth import SynthConfig, generate_dataset, load_ground_truth
from kegraph.trainer import BaseModelTrainer, TrainingConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
SUMMARY_METRICS = (
    "valid_auc", "test_auc", "clean_test_auc", "best_epoch",
    "sieve_precision", "mean_gamma_hidden", "mean_gamma_observed", "gamma_regime_gap",
)


@contextmanager
def stage(name, seed=None):
    """Attach the stage name and seed to any kegraph error raised inside."""
    try:
        yield
    except KegraphError as e:
        raise e.with_context(name, seed)


# =============================================================================
# Preprocessing and splitting
# =============================================================================

@dataclass
class PreprocessedAttributes:
    values: np.ndarray
    kept_columns: list
    dropped_columns: list
    means: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray


def preprocess_attributes(attributes, mask, train_idx, names=None):
    """
    Mean-impute and min-max scale company attributes using training rows only.

    Args:
        attributes: (N, d) values; entries where ``mask`` is False are ignored.
        mask: (N, d) True where observed.
        train_idx: Rows whose statistics are used.
        names: Optional column names for log messages.

    Returns:
        PreprocessedAttributes; values lie in [0, 1], constant columns are 0.
    """
    attributes = np.asarray(attributes, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    names = list(names) if names is not None else [str(k) for k in range(attributes.shape[1])]

    observed = mask[train_idx].any(axis=0)
    dropped = [names[k] for k in np.flatnonzero(~observed)]
    if dropped:
        logger.warning(f"Dropping {len(dropped)} attribute columns with no observed training value: "
                       f"{', '.join(dropped[:10])}")
    kept = np.flatnonzero(observed)
    if kept.size == 0:
        raise SchemaError("No attribute column has an observed value in the training split")

    x = np.where(mask, attributes, np.nan)[:, kept]
    imputer = SimpleImputer(strategy="mean").fit(x[train_idx])
    x = imputer.transform(x)
    scaler = MinMaxScaler(clip=True).fit(x[train_idx])
    scaled = scaler.transform(x)
    scaled[:, scaler.data_range_ == 0] = 0.0
    return PreprocessedAttributes(
        values=scaled,
        kept_columns=[names[k] for k in kept],
        dropped_columns=dropped,
        means=imputer.statistics_,
        minimum=scaler.data_min_,
        maximum=scaler.data_max_,
    )


@dataclass
class Split:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    horizon: int
    test_shortfall: int = 0

    def sizes(self):
        return {"n_train": int(len(self.train)), "n_valid": int(len(self.valid)),
                "n_test": int(len(self.test)), "test_shortfall": int(self.test_shortfall)}


def _check_ratios(ratios):
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"harness.split_ratios must be three non-negative shares summing to 1, got {ratios}")
    return ratios


def split_dataset(fkg, seed, ratios=(0.6, 0.2, 0.2), clean_years=8):
    """
    Stratified train/valid/test split under the clean-test rule.

    Non-frauds enter the test split only if their record year is at least
    ``clean_years`` before the dataset horizon (latest record year). The rule
    takes priority over the ratio: a shortage of eligible non-frauds shrinks
    the test split and is logged as a warning.
    """
    _, r_valid, r_test = _check_ratios(ratios)
    labels = fkg.labels.noisy
    years = fkg.labels.record_year
    labeled = np.flatnonzero(labels >= 0)
    horizon = int(years.max()) if len(years) else 0
    rng = np.random.default_rng(seed)

    frauds = rng.permutation(labeled[labels[labeled] == 1])
    non_frauds = labeled[labels[labeled] == 0]
    eligible = rng.permutation(non_frauds[years[non_frauds] <= horizon - clean_years])
    ineligible = non_frauds[years[non_frauds] > horizon - clean_years]

    n = len(labeled)
    n_test = int(round(r_test * n))
    n_valid = int(round(r_valid * n))
    test_fraud = min(int(round(r_test * len(frauds))), len(frauds), n_test)
    wanted_non = n_test - test_fraud
    test_non = min(wanted_non, len(eligible))
    shortfall = wanted_non - test_non
    if shortfall:
        logger.warning(f"Only {len(eligible)} non-frauds satisfy the {clean_years}-year clean-test rule; "
                       f"test split is {shortfall} nodes short of its {r_test:.0%} share")

    test = np.concatenate([frauds[:test_fraud], eligible[:test_non]])
    rest_fraud = frauds[test_fraud:]
    rest_non = rng.permutation(np.concatenate([eligible[test_non:], ineligible]))
    valid_fraud = min(int(round(r_valid * len(frauds))), len(rest_fraud), n_valid)
    valid_non = min(n_valid - valid_fraud, len(rest_non))
    valid = np.concatenate([rest_fraud[:valid_fraud], rest_non[:valid_non]])
    train = np.concatenate([rest_fraud[valid_fraud:], rest_non[valid_non:]])
    return Split(np.sort(train), np.sort(valid), np.sort(test), horizon, shortfall)


# =============================================================================
# Data and shared inputs
# =============================================================================

@dataclass
class ExperimentData:
    """A labelled graph plus ground truth when it is known."""

    fkg: object
    source: str
    clean_labels: np.ndarray = None
    flip_prob: np.ndarray = None

    @property
    def is_synthetic(self):
        return self.clean_labels is not None


def _align_ground_truth(fkg, frame):
    index = {(str(c), int(y)): i for i, (c, y) in enumerate(fkg.company_records())}
    clean = np.full(fkg.n_companies, -1, dtype=np.int64)
    flip = np.full(fkg.n_companies, np.nan)
    for company, year, label, prob in zip(frame["company_key"], frame["year"], frame["clean_label"],
                                          frame["flip_prob"]):
        position = index.get((str(company), int(year)))
        if position is not None:
            clean[position] = int(label)
            flip[position] = float(prob)
    if np.any(clean < 0):
        raise SchemaError(f"ground_truth.csv misses {int((clean < 0).sum())} company-years")
    return clean, flip


def load_experiment_data(config):
    """Read ``paths.data_dir`` or, when it is empty, generate the synthetic dataset."""
    data_dir = config.get("paths.data_dir")
    if data_dir:
        fkg = load_fkg_dir(data_dir)
        truth_path = Path(data_dir) / "ground_truth.csv"
        if truth_path.exists():
            clean, flip = _align_ground_truth(fkg, load_ground_truth(truth_path))
            return ExperimentData(fkg, str(data_dir), clean, flip)
        return ExperimentData(fkg, str(data_dir))
    dataset = generate_dataset(SynthConfig.from_section(config.section("synth")))
    truth = dataset.ground_truth
    return ExperimentData(dataset.fkg, "synthetic", truth.clean, truth.flip_prob)


def company_embeddings(fkg, config, seed):
    """X^ke from ``paths.embedding_path`` if set, else a fresh TransE run."""
    path = config.get("paths.embedding_path")
    if path:
        table = load_table(path)
        if table.entity.shape[0] != fkg.n_entities:
            raise DimensionError(f"Embedding table has {table.entity.shape[0]} entities, "
                                 f"graph has {fkg.n_entities}")
    else:
        table = train_kge(fkg, KgeConfig.from_section(config.section("kge"), seed),
                          progress=config.get("harness.progress"))
    return extract_company_embeddings(table, fkg), table


@dataclass
class GraphInputs:
    subgraphs: list
    sum_graph: object

    def for_model(self, flags):
        """(names, subgraphs) the base model is built on."""
        if flags.sum_graph_only:
            return [SUM_UP], [self.sum_graph]
        return [s.provenance for s in self.subgraphs], self.subgraphs


def build_graph_inputs(fkg, config):
    graph = config.section("graph")
    specs = resolve_metapaths(graph["metapaths"], graph["custom_metapaths"])
    subgraphs = build_subgraphs(fkg, specs, progress=config.get("harness.progress"))
    return GraphInputs(subgraphs, sum_up_graph(subgraphs))


def training_config(config):
    harness = config.section("harness")
    model = config.section("model")
    return TrainingConfig(max_epochs=harness["max_epochs"], patience=harness["patience"],
                          learning_rate=model["learning_rate"], optimizer=model["optimizer"],
                          progress=harness["progress"])


# =============================================================================
# Per-seed pipeline
# =============================================================================

@dataclass
class SeedResult:
    metrics: dict
    curves: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    model: object = None
    sieve: object = None
    transition_state: object = None


def _optional_auc(scores, labels, what):
    try:
        return auc(scores, labels)
    except MetricError as e:
        logger.warning(f"{what} AUC undefined: {e}")
        return None


def _attention_rows(trace, seed, names):
    rows = []
    for branch, weights in trace.relation_weights.items():
        if weights is not None:
            rows.extend({"seed": seed, "level": "relation", "branch": branch, "name": name,
                         "weight": float(w)} for name, w in zip(names, weights))
    if trace.branch_weights is not None:
        branches = list(trace.relation_weights)
        rows.extend({"seed": seed, "level": "branch", "branch": branch, "name": branch,
                     "weight": float(w)} for branch, w in zip(branches, trace.branch_weights))
    return rows


def _gamma_diagnostics(gamma_all, data, train_idx):
    """Mean gamma-hat for hidden vs. observed frauds and across flip regimes."""
    labels = data.fkg.labels.noisy
    clean = data.clean_labels
    diagnostics = {}
    hidden = (clean == 1) & (labels == 0)
    observed = (clean == 1) & (labels == 1)
    diagnostics["mean_gamma_hidden"] = float(gamma_all[hidden].mean()) if hidden.any() else None
    diagnostics["mean_gamma_observed"] = float(gamma_all[observed].mean()) if observed.any() else None
    frauds = clean == 1
    if data.flip_prob is not None and frauds.any():
        flips = data.flip_prob[frauds]
        if flips.max() > flips.min():
            high = flips > 0.5 * (flips.max() + flips.min())
            diagnostics["gamma_regime_gap"] = float(gamma_all[frauds][high].mean()
                                                    - gamma_all[frauds][~high].mean())
    diagnostics["mean_gamma_train"] = float(gamma_all[train_idx].mean())
    return diagnostics


def run_seed(data, graphs, config, seed, x_ke=None):
    """
    Train and evaluate one mode under one seed.

    Args:
        data: ExperimentData.
        graphs: GraphInputs shared across seeds.
        config: RunConfig; ``harness.mode`` selects the pipeline.
        seed: Controls the split, initialization and embeddings.
        x_ke: Precomputed company embeddings (computed here when needed and None).

    Returns:
        SeedResult
    """
    fkg = data.fkg
    harness = config.section("harness")
    flags = ModeFlags.from_mode(harness["mode"])
    labels = fkg.labels.noisy

    with stage("split", seed):
        split = split_dataset(fkg, seed, harness["split_ratios"], harness["clean_years"])
        weights = class_weights(labels[split.train])
    with stage("preprocess", seed):
        x_att = preprocess_attributes(fkg.attributes, fkg.attribute_mask, split.train,
                                      fkg.attribute_names).values
    if flags.use_ke and x_ke is None:
        with stage("kge", seed):
            x_ke, _ = company_embeddings(fkg, config, seed)

    names, model_graphs = graphs.for_model(flags)
    model_config = ModelConfig.from_section(config.section("model"))
    input_dims = {"att": x_att.shape[1]}
    if flags.use_ke:
        input_dims["ke"] = x_ke.shape[1]
    x_att_in = x_att if flags.use_attr else None
    x_ke_in = x_ke if flags.use_ke else None
    train_config = training_config(config)
    train_labels = labels[split.train]
    metrics = {"seed": seed, **split.sizes()}

    sieve, state = None, None
    if flags.robust:
        robust = config.section("robust")
        reference_config = replace(model_config, classifier_activation="softmax")
        with stage("sieve", seed):
            sieve = collect_bayes_labels(
                lambda: KeModel(reference_config, flags, names, input_dims, seed),
                model_graphs, x_att_in, x_ke_in, split.train, train_labels,
                SieveConfig(robust["beta"], robust["warmup_fraction"], robust["reference_epochs"]),
                train_config,
                clean_labels=data.clean_labels[split.train] if data.is_synthetic else None,
                valid_idx=split.valid, valid_labels=labels[split.valid],
            )
        with stage("transition", seed):
            transition = train_transition_model(sieve.samples, graphs.sum_graph, x_att,
                                                TransitionConfig.from_section(robust), seed,
                                                progress=harness["progress"])
            gamma_all = transition.predict(graphs.sum_graph, x_att)
            state = TransitionState(split.train, gamma_all[split.train])
        metrics["sieve"] = sieve.diagnostics
        if data.is_synthetic:
            metrics["sieve_precision"] = sieve.diagnostics.get("kept_agreement_clean")
            metrics.update(_gamma_diagnostics(gamma_all, data, split.train))
        else:
            metrics["mean_gamma_train"] = float(state.gamma.mean())

        def loss_fn(probs, epoch):
            return forward_corrected_loss(probs, train_labels, state.gamma, weights)
    else:
        def loss_fn(probs, epoch):
            return weighted_nll(probs, train_labels, weights)

    with stage("train", seed):
        model = KeModel(model_config, flags, names, input_dims, seed)
        trainer = BaseModelTrainer(model, model_graphs, x_att_in, x_ke_in, train_config)
        result = trainer.fit(split.train, loss_fn, split.valid, labels[split.valid],
                             desc=f"{harness['mode']} seed {seed}")

    with stage("evaluate", seed):
        y_hat, trace = trainer.predict()
        scores = y_hat[:, 1]
        metrics.update({
            "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run,
            "criterion": result.criterion,
            "valid_auc": _optional_auc(scores[split.valid], labels[split.valid], "Validation"),
            "test_auc": _optional_auc(scores[split.test], labels[split.test], "Test"),
        })
        if data.is_synthetic:
            metrics["clean_test_auc"] = _optional_auc(scores[split.test], data.clean_labels[split.test],
                                                      "Clean test")
            metrics["asymmetry_violations"] = int(((data.clean_labels == 0) & (labels == 1)).sum())
    logger.info(f"Seed {seed}: valid AUC {metrics['valid_auc']}, test AUC {metrics['test_auc']}")

    curves = [{"seed": seed, **row} for row in result.curves]
    return SeedResult(metrics, curves, _attention_rows(trace, seed, names), model, sieve, state)


# =============================================================================
# Experiments and reports
# =============================================================================

def standard_error(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.size))


def summarize_runs(runs):
    summary = {}
    for metric in SUMMARY_METRICS:
        values = [run[metric] for run in runs if run.get(metric) is not None]
        if values:
            summary[metric] = {"mean": float(np.mean(values)), "stderr": standard_error(values),
                               "n": len(values)}
    return summary


@dataclass
class MetricsReport:
    mode: str
    run_name: str
    config_digest: str
    dataset: dict
    runs: list
    summary: dict

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "run_name": self.run_name,
            "config_digest": self.config_digest,
            "dataset": self.dataset,
            "seeds": [run["seed"] for run in self.runs],
            "runs": self.runs,
            "summary": self.summary,
        }


def json_ready(value):
    if isinstance(value, dict):
        return {k: json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_ready(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return None if math.isnan(value) else float(value)
    return value


def write_json(payload, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(json_ready(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def run_directory(config):
    name = config.get("paths.run_name") or f"{config.get('harness.mode')}-{config.digest()}"
    return Path(config.get("paths.results_dir")) / name


def run_experiment(config, data=None, out_dir=None):
    """
    Run the configured mode over every seed and persist the results.

    Args:
        config: RunConfig.
        data: ExperimentData (loaded from ``config`` when None).
        out_dir: Results directory; derived from ``paths`` when None.

    Returns:
        MetricsReport
    """
    harness = config.section("harness")
    seeds = harness["seeds"]
    if not seeds or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds):
        raise ConfigError(f"harness.seeds must be a non-empty list of integers, got {seeds}")
    ModeFlags.from_mode(harness["mode"])
    out_dir = Path(out_dir) if out_dir is not None else run_directory(config)

    with stage("load"):
        data = data if data is not None else load_experiment_data(config)
    with stage("subgraphs"):
        graphs = build_graph_inputs(data.fkg, config)
    config.save(out_dir / "config.json")
    logger.info(f"Running mode '{harness['mode']}' over seeds {seeds}; results in {out_dir}")

    runs, curves, attention = [], [], []
    for seed in tqdm(seeds, desc="Seeds", disable=not harness["progress"]):
        result = run_seed(data, graphs, config, seed)
        seed_dir = out_dir / f"seed_{seed}"
        save_checkpoint(result.model, seed_dir / "checkpoint", harness["mode"])
        if result.sieve is not None:
            write_sieve_csv(result.sieve.samples, seed_dir / "sieve.csv")
            write_gamma_csv(result.transition_state, seed_dir / "gamma.csv")
        runs.append(result.metrics)
        curves.extend(result.curves)
        attention.extend(result.attention)

    labels = data.fkg.labels.noisy
    report = MetricsReport(
        mode=harness["mode"],
        run_name=out_dir.name,
        config_digest=config.digest(),
        dataset={"source": data.source, "n_companies": data.fkg.n_companies,
                 "n_labeled": int((labels >= 0).sum()), "n_frauds": int((labels == 1).sum()),
                 "synthetic": data.is_synthetic},
        runs=runs,
        summary=summarize_runs(runs),
    )
    write_json(report.to_dict(), out_dir / "metrics.json")
    pd.DataFrame(curves, columns=["seed", "epoch", "train_loss", "valid_auc"]).to_csv(
        out_dir / "curves.csv", index=False)
    pd.DataFrame(attention, columns=["seed", "level", "branch", "name", "weight"]).to_csv(
        out_dir / "attention.csv", index=False)
    for metric, stats in report.summary.items():
        logger.info(f"{metric}: {stats['mean']:.4f} +/- {stats['stderr']:.4f} (n={stats['n']})")
    return report


def evaluate_checkpoint(checkpoint_path, config, data=None):
    """
    Score a saved model on a dataset with the split of its training seed.

    Returns:
        dict of AUCs on the valid and test splits and over all labelled nodes.
    """
    with stage("load"):
        model, mode = load_checkpoint(checkpoint_path)
        data = data if data is not None else load_experiment_data(config)
    seed = model.seed
    fkg = data.fkg
    with stage("subgraphs", seed):
        graphs = build_graph_inputs(fkg, config)
        names, model_graphs = graphs.for_model(model.flags)
        if names != model.metapath_names:
            raise DimensionError(f"Checkpoint was trained on meta-paths {model.metapath_names}, "
                                 f"config gives {names}")
    harness = config.section("harness")
    with stage("split", seed):
        split = split_dataset(fkg, seed, harness["split_ratios"], harness["clean_years"])
    with stage("preprocess", seed):
        x_att = preprocess_attributes(fkg.attributes, fkg.attribute_mask, split.train,
                                      fkg.attribute_names).values
    x_ke = None
    if model.flags.use_ke:
        with stage("kge", seed):
            x_ke, _ = company_embeddings(fkg, config, seed)
    with stage("evaluate", seed):
        scores = model.fraud_scores(model_graphs, x_att if model.flags.use_attr else None, x_ke)
        labels = fkg.labels.noisy
        labeled = np.flatnonzero(labels >= 0)
        result = {
            "mode": mode,
            "seed": seed,
            "valid_auc": _optional_auc(scores[split.valid], labels[split.valid], "Validation"),
            "test_auc": _optional_auc(scores[split.test], labels[split.test], "Test"),
            "all_auc": _optional_auc(scores[labeled], labels[labeled], "Overall"),
        }
        if data.is_synthetic:
            result["clean_test_auc"] = _optional_auc(scores[split.test], data.clean_labels[split.test],
                                                     "Clean test")
    return result


def train_and_save_embeddings(config, out_path, seed=0, data=None):
    """Train TransE on the configured dataset and write the table plus its key index."""
    with stage("load"):
        data = data if data is not None else load_experiment_data(config)
    with stage("kge", seed):
        _, table = company_embeddings(data.fkg, config, seed)
        save_table(table, out_path, data.fkg)
        rank = mean_rank(table, data.fkg, seed=seed)
    logger.info(f"Filtered mean tail rank over a triple sample: {rank:.1f}")
    return table, rank


def _metrics_files(paths):
    for path in paths:
        path = Path(path)
        if path.is_dir():
            found = sorted(path.rglob("metrics.json"))
            if not found:
                logger.warning(f"No metrics.json under {path}")
            yield from found
        else:
            yield path


def aggregate_reports(paths):
    """
    Collect metrics.json files into one long table.

    Returns:
        DataFrame with columns mode, run_name, metric, mean, stderr, n, recomputed
        from the per-seed values.
    """
    rows = []
    current = Version(SCHEMA_VERSION)
    for path in _metrics_files(paths):
        try:
            with open(path, "r", encoding="utf-8") as f:
                report = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(path, 0, f"cannot read metrics file: {e}") from e
        version = Version(str(report.get("schema_version", "0")))
        if version.major != current.major:
            raise SchemaError(f"{path} has schema version {version}, expected {current.major}.x")
        for metric, stats in summarize_runs(report["runs"]).items():
            rows.append({"mode": report["mode"], "run_name": report["run_name"], "metric": metric,
                         "mean": stats["mean"], "stderr": stats["stderr"], "n": stats["n"]})
    return pd.DataFrame(rows, columns=["mode", "run_name", "metric", "mean", "stderr", "n"])

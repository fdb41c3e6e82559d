"""
Command-line entry point: ``kegraph <subcommand>`` or ``python -m kegraph``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/training error.
"""

import json
import logging
import sys
from argparse import ArgumentParser
from pathlib import Path

from kegraph import harness
from kegraph.config import DEFAULT_CONFIG_FILE, PROFILES, RunConfig, setup_logging
from kegraph.errors import ConfigError, KegraphError
from kegraph.graph_store import load_fkg_dir, validate_schema, year_gap_summary
from kegraph.metapath import save_subgraph
from kegraph.model import MODES
from kegraph.synth import SynthConfig, generate_dataset, write_dataset

logger = logging.getLogger(__name__)


class KegraphArgumentParser(ArgumentParser):
    """Argument errors become ConfigError so they share the usage exit code."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _load_config(args, extra=()):
    path = args.config
    if path is None and DEFAULT_CONFIG_FILE.exists():
        path = DEFAULT_CONFIG_FILE
    overrides = list(args.set or []) + list(extra)
    if getattr(args, "data", None):
        overrides.append(f"paths.data_dir={args.data}")
    return RunConfig.load(path, overrides, profile=args.profile)


def cmd_synth(args):
    config = _load_config(args)
    dataset = generate_dataset(SynthConfig.from_section(config.section("synth")))
    write_dataset(dataset, args.out)
    truth = dataset.ground_truth
    logger.info("=== Synthetic dataset ===")
    logger.info(f"Company-years: {dataset.fkg.n_companies}")
    logger.info(f"Entities: {dataset.fkg.n_entities}, triples: {dataset.fkg.n_triples}")
    logger.info(f"Clean frauds: {int(truth.clean.sum())}, observed frauds: {int(truth.noisy.sum())}")
    return 0


def cmd_validate(args):
    config = _load_config(args)
    data_dir = config.get("paths.data_dir")
    if not data_dir:
        raise ConfigError("validate needs a dataset: pass --data or set paths.data_dir")
    fkg = load_fkg_dir(data_dir)
    report = validate_schema(fkg)
    for line in report.to_lines():
        print(line)
    gaps = year_gap_summary(fkg)
    logger.info(f"Observed frauds: {gaps['n_frauds']}, same-year declarations: {gaps['gap0_share']:.1%}, "
                f"declared after more than 8 years: {gaps['gap_gt8_share']:.1%}")
    if report.is_empty:
        logger.info("No schema violations")
        return 0
    logger.error(f"{len(report.violations)} schema invariants violated")
    return 2


def cmd_kge_train(args):
    config = _load_config(args)
    _, rank = harness.train_and_save_embeddings(config, args.out, seed=args.seed)
    print(json.dumps({"table": str(args.out), "mean_rank": rank}))
    return 0


def cmd_subgraphs(args):
    config = _load_config(args)
    with harness.stage("load"):
        data = harness.load_experiment_data(config)
    with harness.stage("subgraphs"):
        graphs = harness.build_graph_inputs(data.fkg, config)
    out_dir = Path(args.out)
    for subgraph in graphs.subgraphs + [graphs.sum_graph]:
        save_subgraph(subgraph, out_dir / f"{subgraph.provenance}.npz")
        logger.info(f"{subgraph.provenance}: {subgraph.n_edges} weighted edges")
    return 0


def cmd_train(args):
    extra = []
    if args.mode:
        extra.append(f"harness.mode={args.mode}")
    if args.seeds:
        extra.append(f"harness.seeds={json.dumps(args.seeds)}")
    config = _load_config(args, extra)
    report = harness.run_experiment(config, out_dir=args.out)
    print(json.dumps(report.summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args):
    config = _load_config(args)
    result = harness.evaluate_checkpoint(args.checkpoint, config)
    if args.out:
        harness.write_json(result, args.out)
    print(json.dumps(harness.json_ready(result), indent=2, sort_keys=True))
    return 0


def cmd_report(args):
    table = harness.aggregate_reports(args.paths)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False)
        logger.info(f"Wrote {len(table)} rows to {args.out}")
    else:
        print(table.to_csv(index=False), end="")
    return 0


def build_parser():
    parser = KegraphArgumentParser(prog="kegraph",
                                   description="Knowledge-enhanced graph fraud detection under hidden fraud")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_command(name, handler, help_text, needs_config=True):
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        if needs_config:
            sub.add_argument("--config", type=Path, default=None,
                             help=f"Sectioned JSON config file (default: {DEFAULT_CONFIG_FILE.name} if present)")
            sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                             help="Override one config value; repeatable")
            sub.add_argument("--profile", choices=sorted(PROFILES), default=None,
                             help="Named size profile applied over the config file (default: none)")
        sub.set_defaults(handler=handler)
        return sub

    sub = add_command("synth", cmd_synth, "Generate a synthetic dataset with ground truth")
    sub.add_argument("--out", type=Path, required=True, help="Output directory")

    sub = add_command("validate", cmd_validate, "Check a dataset against the graph schema")
    sub.add_argument("--data", type=Path, help="Dataset directory (default: paths.data_dir)")

    sub = add_command("kge-train", cmd_kge_train, "Train TransE embeddings and save the table")
    sub.add_argument("--data", type=Path, help="Dataset directory (default: synthetic)")
    sub.add_argument("--out", type=Path, required=True, help="Embedding table path")
    sub.add_argument("--seed", type=int, default=0, help="Training seed (default: 0)")

    sub = add_command("subgraphs", cmd_subgraphs, "Build and save the meta-path weight matrices")
    sub.add_argument("--data", type=Path, help="Dataset directory (default: synthetic)")
    sub.add_argument("--out", type=Path, required=True, help="Output directory")

    sub = add_command("train", cmd_train, "Run an experiment over the configured seeds")
    sub.add_argument("--data", type=Path, help="Dataset directory (default: synthetic)")
    sub.add_argument("--mode", choices=MODES, help="Pipeline mode (default: harness.mode)")
    sub.add_argument("--seeds", type=int, nargs="+", help="Seeds (default: harness.seeds)")
    sub.add_argument("--out", type=Path, default=None,
                     help="Results directory (default: paths.results_dir/<mode>-<digest>)")

    sub = add_command("eval", cmd_eval, "Score a saved checkpoint on a dataset")
    sub.add_argument("--data", type=Path, help="Dataset directory (default: synthetic)")
    sub.add_argument("--checkpoint", type=Path, required=True,
                     help="Checkpoint path without suffix, e.g. results/run/seed_0/checkpoint")
    sub.add_argument("--out", type=Path, default=None, help="Optional JSON output path")

    sub = add_command("report", cmd_report, "Aggregate metrics.json files into one CSV table",
                      needs_config=False)
    sub.add_argument("paths", nargs="+", type=Path, help="metrics.json files or directories to search")
    sub.add_argument("--out", type=Path, default=None, help="CSV path (default: stdout)")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except KegraphError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return e.exit_code
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except KegraphError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""
Run configuration for kegraph.

Configuration lives in a sectioned JSON file (``inputs.json`` at the project
root by default). Every section is flat: keys map to scalars or lists. Any
key can be overridden from the command line with ``--set section.key=value``.
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

from kegraph.errors import ConfigError

logger = logging.getLogger(__name__)

RESULTS_DIR_ENV = "KEGRAPH_RESULTS_DIR"
DEFAULT_CONFIG_FILE = Path(__file__).resolve().parent.parent / "inputs.json"

# Desk-scale defaults. Every tunable of every stage is listed here; a key that
# is not in this table is rejected when a config file is loaded.
DEFAULTS = {
    "paths": {
        "data_dir": "",             # empty = generate a synthetic dataset
        "results_dir": "results",
        "embedding_path": "",       # optional pretrained embedding table
        "run_name": "",             # empty = derived from mode and config digest
    },
    "synth": {
        "n_companies": 2000,        # company-year instances
        "year_start": 2003,
        "year_end": 2020,
        "support_ratio": 18.0,      # DSE + RPT nodes per company-year
        "dse_share": 0.8,
        "dse_persistence": 0.7,     # chance a director carries over to the next year
        "dse_share_prob": 0.1,      # chance a director also serves a second company
        "rpt_homophily": 0.6,       # chance an RPT counterparty is in the same risk class
        "d_att": 24,
        "fraud_base_rate": 0.127,   # about 1 : 6.87
        "signal_location": "attributes",
        "signal_dims": 6,
        "attr_shift": 1.0,
        "attr_coef": 1.5,
        "neighbor_coef": 2.0,
        "flip_low": 0.2,
        "flip_high": 0.6,
        "neighbor_threshold": 2,
        "flip_attr_coef": 0.0,
        "gap_zero_share": 0.30,
        "gap_tail_share": 0.022,
        "gap_tail_year": 8,
        "attr_missing_rate": 0.05,
        "support_missing_rate": 0.95,
        "seed": 0,
    },
    "graph": {
        "metapaths": ["RPT", "SC", "SDSE"],
        # extra user paths, "NAME:Kind,relation,Kind,...,CompanyYear"
        "custom_metapaths": [],
    },
    "kge": {
        "dim": 32,
        "learning_rate": 0.01,
        "margin": 1.0,
        "negatives_per_positive": 1,
        "max_steps": 2000,
        "batch_size": 1024,
        "norm": "L1",
        "optimizer": "adam",
    },
    "model": {
        "n_layers": 2,
        "hidden_dim": 16,
        "learning_rate": 0.01,
        "optimizer": "adam",
        "classifier_activation": "sigmoid",
    },
    "robust": {
        "beta": 2.0,
        "warmup_fraction": 0.1,
        "reference_epochs": 100,
        "transition_hidden": 32,
        "transition_epochs": 200,
        "transition_lr": 0.01,
        "epsilon": 1e-6,
    },
    "harness": {
        "mode": "full",
        "seeds": [0, 1, 2, 3, 4],
        "max_epochs": 300,
        "patience": 30,
        "split_ratios": [0.6, 0.2, 0.2],
        "clean_years": 8,
        "progress": True,
    },
}

# Sizes for full-scale market datasets, applied with ``--profile market``.
MARKET_PROFILE = {
    "kge": {"dim": 500, "learning_rate": 0.25, "max_steps": 80000},
    "model": {"hidden_dim": 1000, "learning_rate": 0.001},
    "robust": {"transition_hidden": 500},
}
PROFILES = {"market": MARKET_PROFILE}


def setup_logging(level="INFO"):
    """Configure root logging the same way for every entry point."""
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
    )


def _check_type(section, key, value, default):
    """Validate a value against the type of its default."""
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        if any(isinstance(item, (dict, list)) for item in value):
            raise ConfigError(f"{where} must be a flat list")
        return list(value)
    raise ConfigError(f"{where} has unsupported type {type(default).__name__}")


def _parse_override(text):
    """Split ``section.key=value``; the value is JSON when it parses as JSON."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"Override must look like section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    section, key = dotted.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


class RunConfig:
    """Effective configuration of one run: defaults, file values and overrides."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, entries in (values or {}).items():
            for key, value in entries.items():
                self.set(section, key, value)

    @classmethod
    def load(cls, path=None, overrides=(), use_env=True, profile=None):
        """
        Build a config from an optional JSON file plus command-line overrides.

        Args:
            path: Config file; sections and keys must exist in DEFAULTS.
            profile: Optional PROFILES name applied over the file values.
            overrides: Iterable of ``section.key=value`` strings.
            use_env: Honour ``.env`` files and KEGRAPH_RESULTS_DIR.

        Returns:
            RunConfig
        """
        config = cls()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"Configuration file not found: {path}")
            try:
                with open(path, "r", encoding="utf-8") as f:
                    data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Error parsing {path}: {e}") from e
            if not isinstance(data, dict):
                raise ConfigError(f"{path} must contain a JSON object of sections")
            for section, entries in data.items():
                if not isinstance(entries, dict):
                    raise ConfigError(f"Section '{section}' must be an object")
                for key, value in entries.items():
                    config.set(section, key, value)

        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError(f"Unknown profile '{profile}'. Choose from: {', '.join(PROFILES)}")
            for section, entries in PROFILES[profile].items():
                for key, value in entries.items():
                    config.set(section, key, value)

        for text in overrides:
            config.set(*_parse_override(text))

        if use_env:
            load_dotenv()
            results_dir = os.environ.get(RESULTS_DIR_ENV)
            if results_dir:
                logger.info(f"Results directory overridden by {RESULTS_DIR_ENV}: {results_dir}")
                config.set("paths", "results_dir", results_dir)
        return config

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"Unknown config section '{section}'")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"Unknown config key '{section}.{key}'")
        self.values[section][key] = _check_type(section, key, value, DEFAULTS[section][key])

    def section(self, name):
        if name not in self.values:
            raise ConfigError(f"Unknown config section '{name}'")
        return dict(self.values[name])

    def get(self, dotted):
        section, key = dotted.split(".", 1)
        return self.section(section)[key]

    def to_dict(self):
        return copy.deepcopy(self.values)

    def digest(self):
        """Short stable hash of the effective configuration."""
        canonical = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.values, f, indent=2, sort_keys=True)
            f.write("\n")

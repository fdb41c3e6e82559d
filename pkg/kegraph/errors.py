"""
Error types for kegraph.

Every error can carry the pipeline stage and seed it was raised under, so a
failure deep inside an experiment still reads well at the command line.
The class decides the exit code used by the CLI.
"""


class KegraphError(Exception):
    """Base class for all kegraph errors."""

    exit_code = 2

    def __init__(self, message, stage=None, seed=None):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.seed = seed

    def with_context(self, stage=None, seed=None):
        """Attach stage/seed information unless it is already present."""
        if self.stage is None:
            self.stage = stage
        if self.seed is None:
            self.seed = seed
        return self

    def __str__(self):
        context = []
        if self.stage:
            context.append(f"stage={self.stage}")
        if self.seed is not None:
            context.append(f"seed={self.seed}")
        if context:
            return f"[{', '.join(context)}] {self.message}"
        return self.message


# Usage errors (exit 1)

class ConfigError(KegraphError):
    """Invalid configuration key, value or flag combination."""

    exit_code = 1


# Data errors (exit 2)

class ParseError(KegraphError):
    """Malformed input file line."""

    def __init__(self, path, line_number, message):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = str(path)
        self.line_number = line_number


class SchemaError(KegraphError):
    """Input violates the knowledge graph schema."""


class DanglingReferenceError(KegraphError):
    """A record points at an entity, relation or company that does not exist."""


class SpecError(KegraphError):
    """Malformed or unresolvable meta-path specification."""


class DimensionError(KegraphError):
    """Operand shapes or node sets do not agree."""


class DomainError(KegraphError):
    """Value outside the domain an operation is defined on."""


class SamplingError(KegraphError):
    """Negative sampling cannot produce a corrupted triple."""


class WeightError(KegraphError):
    """Class weights cannot be computed (a class has zero frequency)."""


class MetricError(KegraphError):
    """Metric undefined for the given input."""


class SieveError(KegraphError):
    """Bayes label collection kept a degenerate sample set."""


# Numeric / training errors (exit 3)

class NumericError(KegraphError):
    """Non-finite value produced or consumed."""

    exit_code = 3


class ContractError(KegraphError):
    """Caller broke an operation's precondition."""

    exit_code = 3


class TrainingError(KegraphError):
    """Training cannot proceed."""

    exit_code = 3

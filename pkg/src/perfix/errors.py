"""Exception taxonomy shared across the package."""


class PerfixError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PerfixError):
    """Invalid configuration: bad dimensions, unknown keys, out-of-range values."""


class InputError(PerfixError):
    """Malformed runtime input: shape mismatch, label out of range, empty input."""


class SelectorError(PerfixError):
    """A parameter id or tag selector referenced something that does not exist."""


class UsageError(PerfixError):
    """API misuse, e.g. attaching the same plugin kind twice."""


class DataError(PerfixError):
    """Dataset-level problem: empty shard, shard too small to split."""


class PartitionError(DataError):
    """Partitioner could not satisfy its constraints within the retry budget."""


class IngestionError(DataError):
    """A dataset folder could not be loaded; the message names the offending file."""


class AggregationError(PerfixError):
    """Parameter sets passed to aggregation do not share a schema."""

"""Exception hierarchy shared across the package."""


class FedFusionError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedFusionError):
    """Invalid configuration value or inconsistent option combination."""


class ShapeError(FedFusionError):
    """Array/layer dimension mismatch."""


class DataError(FedFusionError):
    """Bad input data: ingestion, encoding, splitting, generation, schema conflicts."""


class ProtocolError(FedFusionError):
    """Federated protocol violation: registration mismatch, mixed rounds, disconnects."""


class CodecError(FedFusionError):
    """Malformed byte payload for model parameters or wire messages."""


class MetricError(FedFusionError):
    """Metric undefined for the given inputs (e.g. single-class labels)."""


class ReportError(FedFusionError):
    """Incomplete or inconsistent metric sample collection."""

"""Exception hierarchy shared by every DeepCAT module."""


class DeepCatError(Exception):
    """Base class; the CLI turns these into a one-line error and exit code 1."""


class ConfigError(DeepCatError):
    pass


class ShapeError(DeepCatError, ValueError):
    pass


class NonFiniteError(DeepCatError, ValueError):
    pass


class NonDeterministicError(DeepCatError):
    pass


class CorpusError(DeepCatError, ValueError):
    pass


class InsufficientBucketError(CorpusError):
    def __init__(self, bucket: str, available: int, requested: int):
        self.bucket = bucket
        self.available = available
        self.requested = requested
        super().__init__(
            f"bucket '{bucket}' has {available} distinct queries, {requested} requested"
        )


class EmptyQueryError(CorpusError):
    pass


class CheckpointError(DeepCatError):
    pass


class DivergenceError(DeepCatError):
    pass


class MetricError(DeepCatError, ValueError):
    pass


class GradientCheckError(DeepCatError):
    pass

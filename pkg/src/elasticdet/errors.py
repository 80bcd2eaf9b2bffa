"""Exception types shared across the package."""


class InvalidConfigError(ValueError):
    """A model configuration violates a structural constraint."""


class InvalidSpaceError(ValueError):
    """A search space is empty or malformed."""


class UnsupportedOperationError(RuntimeError):
    """The requested operation is not available for this model."""


class ArtifactDigestError(RuntimeError):
    """The artifact file changed between the accuracy and latency phases."""


class AnnotationError(ValueError):
    """A dataset annotation record is malformed."""


class BenchRunnerError(RuntimeError):
    """The benchmarked callable failed; carries the invocation index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class TrainingDivergedError(RuntimeError):
    """A training step produced a non-finite loss and was rejected."""

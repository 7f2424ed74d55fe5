"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (bad shape, empty input, ...)."""


class PointNotVisible(ValueError):
    """The landmark is behind (or too close to) the camera."""


class OutOfImage(PointNotVisible):
    """The projected pixel falls outside the image rectangle."""


class InvalidDepth(ValueError):
    """Inverse depth is not strictly positive."""


class ResidualUndefined(ValueError):
    """A residual could not be evaluated (e.g. warped pixel outside the image)."""


class AlignmentFailed(ValueError):
    """Trajectory alignment is degenerate."""


class InitializationDeferred(RuntimeError):
    """Not enough frames or parallax yet; retry later."""


class EstimatorDiverged(RuntimeError):
    """An estimator produced non-finite or exploding estimates."""


class ConfigError(ValueError):
    """A configuration document is malformed; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class DataFormatError(ValueError):
    """A data file does not follow its documented format."""

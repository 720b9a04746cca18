"""Exception types shared across the package."""


class ScaleTagError(ValueError):
    """A heatmap stack carried the wrong scale tag for the operation."""


class ConfigError(ValueError):
    """Invalid configuration; carries every problem found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class AugmentRejectionError(RuntimeError):
    """Augmentation redraws exhausted without keeping all landmarks in frame."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite validation loss."""

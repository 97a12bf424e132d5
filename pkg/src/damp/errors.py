"""Exception hierarchy shared by every stage of the toolkit."""


class DampError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""

    exit_code = 1


class InvalidInputError(DampError, ValueError):
    exit_code = 2


class ConfigError(DampError, ValueError):
    exit_code = 2


class UnsupportedOperationError(DampError, TypeError):
    exit_code = 2


class MissingUpstreamError(DampError, FileNotFoundError):
    exit_code = 3

    def __init__(self, stage, missing):
        self.stage = stage
        self.missing = missing
        super().__init__(f"missing artifact {missing!s}; run stage '{stage}' first")


class NumericalError(DampError, ArithmeticError):
    exit_code = 4


class DegenerateDistributionError(NumericalError):
    """p(he|t) + p(she|t) == 0, nothing to renormalize."""


class DegenerateStatisticsError(NumericalError):
    """Zero variance or rank-deficient input to a statistic."""


class TrainingFailure(NumericalError):
    def __init__(self, iteration, message="training loss became non-finite"):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")


class OptimizationFailure(NumericalError):
    def __init__(self, iteration, message="debiasing loss became non-finite"):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")


class GenerationFailure(DampError, RuntimeError):
    exit_code = 4

    def __init__(self, occupation, restarts):
        self.occupation = occupation
        self.restarts = restarts
        super().__init__(
            f"could not generate an intermediary template for {occupation!r} "
            f"after {restarts} restarts"
        )

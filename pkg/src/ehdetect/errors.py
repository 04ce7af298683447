"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a model invariant.

    ``path`` names the offending entry (e.g. ``sensors[1].target_pd``).
    """

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ChainError(RuntimeError):
    """The battery Markov chain could not be built or solved."""


class NumericalError(ArithmeticError):
    """A numerical routine produced a non-finite or inconsistent value."""


class InfeasibleError(RuntimeError):
    """No candidate satisfies the average-power constraint.

    ``min_power`` is the smallest average power (Watts) seen while searching.
    """

    def __init__(self, message, min_power=float("nan")):
        self.min_power = min_power
        super().__init__(f"{message} (minimum achieved power {min_power:.6g} W)")

"""Exception types raised across the engine."""


class ParameterError(ValueError):
    """A scalar or configuration value is outside its valid range."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(ValueError):
    pass


class OrderingError(ValueError):
    """Timestep arguments are in the wrong order (e.g. s >= t for a jump)."""


class DegeneratePairError(ArithmeticError):
    def __init__(self, t, s, denom):
        self.t, self.s = t, s
        super().__init__(
            f"clean-image extraction is singular for (t={t}, s={s}); |denominator|={abs(denom):.3e}"
        )


class SingularStepError(ArithmeticError):
    pass


class StateError(RuntimeError):
    pass


class TrainingFailure(RuntimeError):
    def __init__(self, iteration, message="loss became non-finite"):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


class NumericError(FloatingPointError):
    def __init__(self, term, value):
        self.term = term
        super().__init__(f"loss term {term!r} is not finite ({value})")


class ImageParseError(ValueError):
    def __init__(self, offset, message):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")

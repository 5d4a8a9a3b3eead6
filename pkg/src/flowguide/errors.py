"""Exception hierarchy shared by every module."""


class FlowGuideError(Exception):
    pass


class ConfigError(FlowGuideError, ValueError):
    pass


class InputError(FlowGuideError, ValueError):
    pass


class RangeError(FlowGuideError, ValueError):
    pass


class ModelError(FlowGuideError):
    pass


class UnsupportedOperation(FlowGuideError, NotImplementedError):
    pass


class TrainingError(FlowGuideError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AccuracyError(FlowGuideError):
    pass


class DivergenceError(FlowGuideError, ArithmeticError):
    """Non-finite value produced during integration.

    ``step`` is the step index and ``stage`` names the stage (e.g. ``"k2"``)
    where the first non-finite value appeared.
    """

    def __init__(self, message, step=None, stage=None, last_finite_loss=None):
        super().__init__(message)
        self.step = step
        self.stage = stage
        self.last_finite_loss = last_finite_loss


class AdjointInstabilityError(DivergenceError):
    pass

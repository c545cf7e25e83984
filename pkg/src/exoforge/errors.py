"""Exception types shared across exoforge modules."""


class ExoforgeError(Exception):
    """Base class for all library errors."""


class ValidationError(ExoforgeError, ValueError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else str(field))


class ParseError(ExoforgeError, ValueError):
    def __init__(self, line, message=""):
        self.line = line
        super().__init__(f"line {line}: {message}")


class JointLimitViolation(ExoforgeError, ValueError):
    def __init__(self, index, value=None, limits=None):
        self.index = index
        self.value = value
        self.limits = limits
        super().__init__(f"joint {index} value {value} outside limits {limits}")


class LoopClosureFailure(ExoforgeError, ValueError):
    def __init__(self, theta):
        self.theta = theta
        super().__init__(f"four-bar loop does not close at input angle {theta!r} rad")


class BranchDiscontinuity(ExoforgeError, ValueError):
    pass


class EmptyWorkspace(ExoforgeError, ValueError):
    pass


class OptimizationDiverged(ExoforgeError, RuntimeError):
    def __init__(self, best_s, floor):
        self.best_s = best_s
        self.floor = floor
        super().__init__(f"best similarity {best_s} below floor {floor}")


class TemplateInstantiationError(ExoforgeError, ValueError):
    pass


class LimitCollapse(ExoforgeError, ValueError):
    def __init__(self, joint):
        self.joint = joint
        super().__init__(f"tightening empties the limit interval of {joint}")


class InsufficientData(ExoforgeError, ValueError):
    pass


class DegenerateAbscissa(ExoforgeError, ValueError):
    pass


class ZeroSupply(ExoforgeError, ZeroDivisionError):
    pass


class InvalidReading(ExoforgeError, ValueError):
    pass


class LengthMismatch(ExoforgeError, ValueError):
    pass


class MissingLatency(ExoforgeError, KeyError):
    def __init__(self, channel):
        self.channel = channel
        super().__init__(f"no latency configured for channel {channel!r}")


class NegativeLatency(ExoforgeError, ValueError):
    pass


class UninitializedVirtualState(ExoforgeError, RuntimeError):
    pass


class DimensionMismatch(ExoforgeError, ValueError):
    pass

"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """A caller violated a documented precondition (shapes, ranges, state)."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or unsupported."""


class FormatError(ValueError):
    """A file is not in the expected on-disk format."""


class UnsupportedFormatError(FormatError):
    """The file parses but uses an encoding we refuse to handle silently."""


class TrainingError(RuntimeError):
    """Training diverged. Carries the last finite checkpoint, if any."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class AttackDivergedError(RuntimeError):
    """An attack loss went non-finite. Carries the trace up to the abort."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace

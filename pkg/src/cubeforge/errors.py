class CubeError(Exception):
    """Base class for errors raised by cubeforge."""


class ConfigError(CubeError):
    pass


class PlanError(CubeError):
    pass


class ProfilingError(CubeError):
    pass


class AllocationError(CubeError):
    pass


class SchedulingError(CubeError):
    pass


class JobAbort(CubeError):
    """Unretryable job failure (contract violation, disk full, ...)."""


class TaskFailed(CubeError):
    """A task exhausted its retry budget."""


class InjectedFault(CubeError):
    """Raised by fault-injection hooks in tests."""


class DataError(CubeError):
    pass


class RecoveryError(CubeError):
    pass


class UnrecoverableError(RecoveryError):
    """No snapshot and no retained inputs; a full rebuild is required."""


class ChecksumMismatch(RecoveryError):
    pass


class UpdateRejected(CubeError):
    pass

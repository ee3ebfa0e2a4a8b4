"""Exception hierarchy shared by all specwin modules."""


class SpecwinError(Exception):
    """Base class for toolkit errors."""


class TopologyUnavailable(SpecwinError):
    pass


class InvalidCpu(SpecwinError):
    pass


class PinFailed(SpecwinError):
    pass


class AllocFailed(SpecwinError):
    pass


class UnsupportedGadget(SpecwinError):
    pass


class UnsupportedWorkload(SpecwinError):
    pass


class NoFlushSupport(SpecwinError):
    """The CPU (or the fixture environment) offers no cache-line flush."""


class DistributionsOverlap(SpecwinError):
    """Hit and miss reload latencies cannot be separated by a threshold."""


class CalibrationFailed(SpecwinError):
    pass


class SmtDisabled(SpecwinError):
    pass


class NotSibling(SpecwinError):
    pass


class EmptyResultSet(SpecwinError):
    pass

"""Exception hierarchy shared by every stage of the loop."""


class TrafficLoopError(Exception):
    """Base class for all package errors."""


class BadMagic(TrafficLoopError, ValueError):
    """A pcap file or model envelope does not start with the expected magic."""


class TruncatedRecord(TrafficLoopError, ValueError):
    pass


class UnsupportedLinkType(TrafficLoopError, ValueError):
    pass


class UnsortedInput(TrafficLoopError, ValueError):
    pass


class InvalidProfile(TrafficLoopError, ValueError):
    pass


class EmptyDataset(TrafficLoopError, ValueError):
    pass


class DimensionMismatch(TrafficLoopError, ValueError):
    pass


class UnsupportedFormatVersion(TrafficLoopError, ValueError):
    pass


class CorruptNodeTable(TrafficLoopError, ValueError):
    """Envelope node table is truncated, out of range, or not a tree."""


class StaleVersion(TrafficLoopError):
    """A model swap carried a version not newer than the serving one."""


class NotStarted(TrafficLoopError, RuntimeError):
    pass


class ConfigError(TrafficLoopError, ValueError):
    pass

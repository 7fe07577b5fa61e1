"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI. Errors raised inside
the save/load pipeline get a ``phase`` attribute naming the step that failed.
"""


class FoundryError(Exception):
    exit_code = 1
    phase = None

    def __str__(self):
        msg = super().__str__()
        if self.phase:
            return f"[{self.phase}] {msg}"
        return msg


class DriverError(FoundryError):
    """Invalid use of the simulated driver (bad handle, contract violation)."""


class BinaryFormatError(DriverError):
    pass


class UnresolvedKernelError(DriverError):
    exit_code = 4

    def __init__(self, message, node_id=None, ref=None):
        super().__init__(message)
        self.node_id = node_id
        self.ref = ref


class UnmappedAddressError(DriverError):
    def __init__(self, message, node_id=None, offset=None, address=None):
        super().__init__(message)
        self.node_id = node_id
        self.offset = offset
        self.address = address


class DeviceStateUninitializedError(DriverError):
    pass


class TopologyMismatchError(DriverError):
    exit_code = 5


class CaptureError(DriverError):
    pass


class AllocationError(FoundryError):
    pass


class OutOfRegionError(AllocationError):
    pass


class LayoutDivergenceError(AllocationError):
    exit_code = 3


class ArchiveError(FoundryError):
    exit_code = 2


class ArchiveCorruptionError(ArchiveError):
    pass


class ChecksumError(ArchiveCorruptionError):
    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


class FormatVersionError(ArchiveError):
    pass


class SchemaError(FoundryError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnpatchableCommError(FoundryError):
    pass


class WorkloadSpecError(FoundryError):
    pass

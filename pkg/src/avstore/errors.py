"""Exception hierarchy. CLI exit codes hang off the base classes."""


class AvsError(Exception):
    exit_code = 2


class ValidationError(AvsError, ValueError):
    exit_code = 1


class ConfigError(AvsError):
    exit_code = 1


class CodecError(AvsError):
    """Malformed or undecodable payload."""


class ImageCodecError(CodecError):
    def __init__(self, message, ts=None):
        self.ts = ts
        super().__init__(f"{message} (frame ts={ts})" if ts is not None else message)


class TarFormatError(CodecError):
    pass


class StorageError(AvsError):
    pass


class DuplicateItemError(StorageError):
    def __init__(self, modality, ts):
        self.modality = modality
        self.ts = ts
        super().__init__(f"duplicate item ({modality}, {ts})")


class StorageFullError(StorageError):
    def __init__(self, tier, bytes_needed, bytes_free):
        self.tier = tier
        self.bytes_needed = bytes_needed
        self.bytes_free = bytes_free
        super().__init__(
            f"{tier} tier full: need {bytes_needed} bytes, {bytes_free} available"
        )


class IntegrityError(StorageError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{message}: {path}" if path is not None else message)


class ArchiveError(StorageError):
    pass


class BenchPreconditionError(AvsError):
    exit_code = 3


class SimulatedCrash(BaseException):
    """Raised by fault hooks in tests. BaseException so no handler swallows it."""

    def __init__(self, point):
        self.point = point
        super().__init__(point)

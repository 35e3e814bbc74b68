"""Exception hierarchy for the swapping runtime."""


class UswapError(Exception):
    pass


# lwt runtime
class CapExceeded(UswapError):
    pass


class StackBudgetExceeded(UswapError):
    pass


class NotBlocked(UswapError):
    pass


# fault engine
class UnmappedRegion(UswapError):
    pass


class AlreadyMapped(UswapError):
    pass


class NotMapped(UswapError):
    pass


class NoPendingFault(UswapError):
    pass


# coldscan
class NotSwappable(UswapError):
    pass


class InsufficientScans(UswapError):
    pass


# swap core
class NoEvictable(UswapError):
    pass


class SwapInError(UswapError):
    """A swap-in attempt could not bring the page back."""

    def __init__(self, key, cause: BaseException | None = None, error_code: int = 0):
        super().__init__(f"swap-in failed for {key}: {cause!r}")
        self.key = key
        self.cause = cause
        self.error_code = error_code


# backend store
class KeyNotFound(UswapError, KeyError):
    pass


class ChecksumMismatch(UswapError):
    pass


class InjectedDeviceError(UswapError):
    pass


class OutOfSpace(UswapError):
    pass


class DaemonOutOfMemory(OutOfSpace):
    pass


class BatchWriteError(UswapError):
    """Some pages of a batched put failed; ``locations`` holds the rest."""

    def __init__(self, locations: dict, failures: dict):
        super().__init__(f"{len(failures)} of {len(locations) + len(failures)} pages failed")
        self.locations = locations
        self.failures = failures


# bench
class InvalidMix(UswapError, ValueError):
    pass

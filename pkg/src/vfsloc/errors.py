"""Exception hierarchy shared by all pipeline stages."""


class VfslocError(Exception):
    """Base class for every error raised by this package."""


# grid
class GridError(VfslocError, ValueError):
    pass


class CycleDetected(GridError):
    pass


class DisconnectedNode(GridError):
    pass


class NegativeImpedance(GridError):
    pass


class UnknownNode(GridError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyProfile(GridError):
    pass


# synth
class SampleRateTooLow(VfslocError, ValueError):
    pass


class UnknownCase(VfslocError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# demod
class NoCarrierFound(VfslocError):
    pass


class SignalTooShort(VfslocError, ValueError):
    pass


class InvalidRate(VfslocError, ValueError):
    pass


# eewt / features
class EmptySignal(VfslocError, ValueError):
    pass


class NotEnoughPeaks(VfslocError):
    def __init__(self, n_available, n_requested=None):
        self.n_available = n_available
        self.n_requested = n_requested
        msg = f"only {n_available} spectral maxima available"
        if n_requested is not None:
            msg += f", {n_requested} requested"
        super().__init__(msg)


class InvalidSegmentation(VfslocError, ValueError):
    pass


class NoDominantPeak(VfslocError):
    pass


class EmptyChanges(VfslocError, ValueError):
    pass


# locator
class InsufficientMeters(VfslocError, ValueError):
    pass


class NoComponentsFound(VfslocError):
    pass


# cli / io
class ConfigInvalid(VfslocError, ValueError):
    pass


class IngestFailed(VfslocError):
    pass

class FreqADError(Exception):
    pass


class DataError(FreqADError):
    """Bad sample shape, value range, label or manifest content."""


class InsufficientNormalsError(DataError):
    pass


class SpectrumError(DataError):
    """Inverse transform left a non-negligible imaginary part."""


class CheckpointError(DataError):
    pass


class DivergenceError(FreqADError):
    """A loss or head output became non-finite during training."""

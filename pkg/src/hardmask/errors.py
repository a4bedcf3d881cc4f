"""Exception types shared across the package."""


class HardmaskError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HardmaskError):
    """A config value is missing, unknown, or out of its legal range."""


class ContractError(HardmaskError):
    """A call violated an API precondition (shape, role, index bounds)."""


class NumericalError(HardmaskError):
    """A computation produced a non-finite value."""


class DegenerateLengthError(HardmaskError):
    """A sequence is too short to host the requested number of mask blocks."""


class InputTooShortError(HardmaskError):
    """Waveform shorter than the frontend receptive field."""


class UnsupportedWavError(HardmaskError):
    """WAV file uses an encoding the reader does not handle."""


class CorruptWavError(HardmaskError):
    """WAV file header or payload is malformed."""


class CheckpointError(HardmaskError):
    """Checkpoint file is malformed or incompatible with the model."""

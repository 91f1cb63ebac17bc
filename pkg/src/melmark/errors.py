"""Exception types shared across the package.

Domain failures raise subclasses of :class:`MelmarkError` so callers (and the
CLI exit-code mapping) can distinguish them from I/O problems.
"""


class MelmarkError(Exception):
    """Base class for all domain errors raised by this package."""


class ShortInputError(MelmarkError):
    """Waveform too short for even a single analysis frame."""


class FilterbankError(MelmarkError):
    """Mel filterbank construction produced a degenerate (all-zero) filter."""


class SilentSignalError(MelmarkError):
    """An operation that needs signal energy received silence."""


class AlignmentError(MelmarkError):
    """Suspect spectrogram could not be aligned to the reference."""


class ConfigMismatchError(MelmarkError):
    """Spectrograms built with incompatible configurations were combined."""


class CodecError(MelmarkError):
    """External codec invocation failed or produced unreadable output."""


class CodecUnavailableError(CodecError):
    """The configured external codec binary is not on this host."""


class StoreError(MelmarkError):
    """Base class for reference-store failures."""


class RecordNotFoundError(StoreError):
    """No reference record exists for the requested utterance id."""


class CorruptRecordError(StoreError):
    """Reference container failed magic/version/checksum validation."""


class DuplicateUserError(MelmarkError):
    """Attempted to register a user id that already exists."""


class UnknownUserError(MelmarkError):
    """Lookup of a user id that is not in the registry."""


class PlanError(MelmarkError):
    """Experiment plan file is missing fields or malformed."""

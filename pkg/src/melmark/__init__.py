"""Keyed spread-spectrum watermarking for log-Mel spectrograms."""

from .dsp import (
    LogMelSpectrogram,
    MelConfig,
    MelFilterbank,
    StftConfig,
    Waveform,
    build_mel_filterbank,
    mel_spectrogram,
    mel_to_waveform,
    read_wav,
    stft,
    write_wav,
)
from .patterns import SecretKey, SpreadingPattern, derive_seed, gen_pattern
from .watermark import (
    DEFAULT_BAND,
    DEFAULT_TAU,
    AdaptiveMask,
    BandSelection,
    Payload,
    ReferenceRecord,
    VerificationResult,
    WatermarkMeta,
    align,
    bit_accuracy,
    embed,
    extract,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveMask",
    "BandSelection",
    "DEFAULT_BAND",
    "DEFAULT_TAU",
    "LogMelSpectrogram",
    "MelConfig",
    "MelFilterbank",
    "Payload",
    "ReferenceRecord",
    "SecretKey",
    "SpreadingPattern",
    "StftConfig",
    "VerificationResult",
    "Waveform",
    "WatermarkMeta",
    "align",
    "bit_accuracy",
    "build_mel_filterbank",
    "derive_seed",
    "embed",
    "extract",
    "gen_pattern",
    "mel_spectrogram",
    "mel_to_waveform",
    "read_wav",
    "stft",
    "write_wav",
]

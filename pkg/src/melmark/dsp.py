"""Waveform <-> time-frequency conversions.

Provides the STFT front end, HTK-style Mel filterbank, normalized log-Mel
spectrograms, and a deterministic Mel->waveform channel (filterbank
pseudo-inverse followed by fixed-iteration alternating phase projection).
Everything here is a pure function of its inputs: same input, bit-identical
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import FilterbankError, ShortInputError

WINDOW_KINDS = ("hann", "hamming")

#: Default Griffin-Lim style iteration count for the synthesis channel.
DEFAULT_CHANNEL_ITERATIONS = 32

#: Reconstructions whose raw peak falls below this are returned un-normalized
#: (near-silence guard; peak-normalizing numerical dust would amplify noise).
_SILENCE_PEAK = 1e-3


@dataclass(frozen=True)
class StftConfig:
    """Analysis framing: FFT size, hop, window kind, and spectrum exponent."""

    fft_size: int = 1024
    hop: int = 256
    window: str = "hann"
    power: int = 2

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1) != 0:
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")
        if self.window not in WINDOW_KINDS:
            raise ValueError(f"window must be one of {WINDOW_KINDS}, got {self.window!r}")
        if self.power not in (1, 2):
            raise ValueError(f"power exponent must be 1 or 2, got {self.power}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class MelConfig:
    """Mel analysis parameters plus the fixed dB window used to normalize
    log-Mel values into [0, 1]."""

    num_bands: int = 80
    f_min: float = 20.0
    f_max: float = 11025.0
    sample_rate: int = 22050
    stft: StftConfig = field(default_factory=StftConfig)
    epsilon: float = 1e-10
    norm_floor_db: float = -80.0
    norm_ceil_db: float = 0.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= f_min < f_max <= sr/2, got f_min={self.f_min}, "
                f"f_max={self.f_max}, sr={self.sample_rate}"
            )
        if self.num_bands < 1:
            raise ValueError("num_bands must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.norm_floor_db >= self.norm_ceil_db:
            raise ValueError("norm_floor_db must be below norm_ceil_db")


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelFilterbank:
    """Triangular Mel filters.

    ``weights`` is (num_bands, num_linear_bins); ``edges_hz`` holds the
    num_bands + 2 triangle edge frequencies, equally spaced on the Mel scale.
    Filter c rises over [edges_hz[c], edges_hz[c+1]] and falls over
    [edges_hz[c+1], edges_hz[c+2]], peaking at 1.
    """

    weights: np.ndarray
    edges_hz: np.ndarray

    @property
    def num_bands(self) -> int:
        return self.weights.shape[0]


@dataclass
class LogMelSpectrogram:
    """Normalized log-Mel matrix, shape (num_bands, num_frames), values in [0, 1]."""

    values: np.ndarray
    config: MelConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected 2-D matrix, got shape {self.values.shape}")
        if self.values.shape[0] != self.config.num_bands:
            raise ValueError(
                f"row count {self.values.shape[0]} != num_bands {self.config.num_bands}"
            )
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("log-Mel values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    """HTK Mel scale: m = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    """Inverse of :func:`hz_to_mel`."""
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def window_samples(kind: str, n: int) -> np.ndarray:
    """Periodic cosine window of length n."""
    t = np.arange(n, dtype=np.float64)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * t / n)
    if kind == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * t / n)
    raise ValueError(f"unknown window kind {kind!r}")


def frame_count(num_samples: int, cfg: StftConfig) -> int:
    if num_samples < cfg.fft_size:
        return 0
    return (num_samples - cfg.fft_size) // cfg.hop + 1


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n = frame_count(len(x), cfg)
    if n == 0:
        raise ShortInputError(
            f"waveform of {len(x)} samples is shorter than one frame ({cfg.fft_size})"
        )
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)
    return view[:: cfg.hop][:n]


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """STFT of raw samples: complex matrix of shape (frames, fft_size//2 + 1)."""
    frames = _frames(np.asarray(x, dtype=np.float64), cfg)
    win = window_samples(cfg.window, cfg.fft_size)
    return np.fft.rfft(frames * win, axis=1)


def stft(w: Waveform, cfg: StftConfig) -> np.ndarray:
    return stft_array(w.samples, cfg)


def istft_array(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_array`.

    Output length is (frames - 1) * hop + fft_size, so a round trip through
    stft_array reproduces the original frame count.
    """
    num_frames = spec.shape[0]
    win = window_samples(cfg.window, cfg.fft_size)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * win
    out_len = (num_frames - 1) * cfg.hop + cfg.fft_size
    acc = np.zeros(out_len)
    norm = np.zeros(out_len)
    wsq = win * win
    for t in range(num_frames):
        start = t * cfg.hop
        acc[start : start + cfg.fft_size] += frames[t]
        norm[start : start + cfg.fft_size] += wsq
    out = np.zeros(out_len)
    nz = norm > 1e-11
    out[nz] = acc[nz] / norm[nz]
    return out


def build_mel_filterbank(cfg: MelConfig) -> MelFilterbank:
    """Triangular filters with edges equally spaced on the Mel scale.

    Raises :class:`FilterbankError` when num_bands is too large for the FFT
    resolution (some triangle would cover no linear bin at all).
    """
    n_bins = cfg.stft.num_bins
    bin_hz = np.arange(n_bins, dtype=np.float64) * cfg.sample_rate / cfg.stft.fft_size
    mel_edges = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.num_bands + 2)
    edges_hz = mel_to_hz(mel_edges)

    lo = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    hi = edges_hz[2:, None]
    rising = (bin_hz[None, :] - lo) / (center - lo)
    falling = (hi - bin_hz[None, :]) / (hi - center)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)

    dead = ~weights.any(axis=1)
    if dead.any():
        raise FilterbankError(
            f"{int(dead.sum())} of {cfg.num_bands} filters cover no linear bin "
            f"(first: band {int(np.argmax(dead))}); reduce num_bands or raise fft_size"
        )
    return MelFilterbank(weights=weights, edges_hz=edges_hz)


def mel_power(w: Waveform, cfg: MelConfig, fb: MelFilterbank | None = None) -> np.ndarray:
    """Linear Mel aggregate sum_k b_c(k) * |Y(t,k)|^p, shape (num_bands, frames)."""
    if fb is None:
        fb = build_mel_filterbank(cfg)
    spec = np.abs(stft_array(w.samples, cfg.stft))
    if cfg.stft.power == 2:
        spec = spec * spec
    return fb.weights @ spec.T


def _db_scale(power_exponent: int) -> float:
    # 10*log10 for power spectra, 20*log10 for magnitude spectra.
    return 10.0 if power_exponent == 2 else 20.0


def normalize_mel_db(db: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Map dB values into [0, 1] through the config's fixed dB window.

    The window ceiling is anchored at the per-utterance maximum so the result
    is invariant to uniform gain. The anchor never drops below
    eps_db + window height, which pins all-silence input to the floor instead
    of promoting it to full scale.
    """
    scale = _db_scale(cfg.stft.power)
    eps_db = scale * math.log10(cfg.epsilon)
    window = cfg.norm_ceil_db - cfg.norm_floor_db
    ref = max(float(db.max()), eps_db + window)
    rel = db - ref
    return np.clip((rel - cfg.norm_floor_db) / window, 0.0, 1.0)


def mel_spectrogram(
    w: Waveform, cfg: MelConfig, fb: MelFilterbank | None = None
) -> LogMelSpectrogram:
    """Normalized log-Mel spectrogram of a waveform."""
    power = mel_power(w, cfg, fb)
    db = _db_scale(cfg.stft.power) * np.log10(power + cfg.epsilon)
    return LogMelSpectrogram(values=normalize_mel_db(db, cfg), config=cfg)


def log_mel(w: Waveform, cfg: MelConfig) -> np.ndarray:
    """Pre-normalization log-Mel: ln(mel_power + epsilon)."""
    return np.log(mel_power(w, cfg) + cfg.epsilon)


def mel_to_waveform(
    X: LogMelSpectrogram,
    iterations: int = DEFAULT_CHANNEL_ITERATIONS,
    fb: MelFilterbank | None = None,
) -> Waveform:
    """Deterministic Mel->waveform channel.

    Inverts the normalization and log, distributes Mel energy back onto
    linear bins through the filterbank transpose (each bin divided by its
    total filter weight), and recovers phase with ``iterations`` rounds of
    alternating projection starting from zero phase. The result is
    peak-normalized unless the raw reconstruction is already near-silent.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    cfg = X.config
    if fb is None:
        fb = build_mel_filterbank(cfg)

    scale = _db_scale(cfg.stft.power)
    window = cfg.norm_ceil_db - cfg.norm_floor_db
    db = X.values * window + cfg.norm_floor_db
    mel_lin = np.clip(10.0 ** (db / scale) - cfg.epsilon, 0.0, None)

    bin_weight = fb.weights.sum(axis=0)
    lin = fb.weights.T @ mel_lin
    nz = bin_weight > 1e-12
    lin[nz] /= bin_weight[nz, None]
    lin[~nz] = 0.0

    magnitude = lin.T if cfg.stft.power == 1 else np.sqrt(lin.T)
    spec = magnitude.astype(np.complex128)
    for _ in range(iterations):
        y = istft_array(spec, cfg.stft)
        est = stft_array(y, cfg.stft)
        phase = np.angle(est)
        spec = magnitude * np.exp(1j * phase)
    y = istft_array(spec, cfg.stft)

    peak = np.max(np.abs(y)) if len(y) else 0.0
    if peak > _SILENCE_PEAK:
        y = y / peak
    return Waveform(samples=np.clip(y, -1.0, 1.0), sample_rate=cfg.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a mono WAV file (16-bit PCM or 32-bit float) as a Waveform.

    Sample rates are taken as-is; no resampling. Samples are clipped into
    [-1, 1] on read.
    """
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples=np.clip(samples, -1.0, 1.0), sample_rate=int(rate))


def write_wav(path: str | Path, w: Waveform, fmt: str = "pcm16") -> None:
    """Write a Waveform as mono WAV, either 16-bit PCM or 32-bit float."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    if fmt == "pcm16":
        data = np.round(clipped * 32767.0).astype(np.int16)
    elif fmt == "float32":
        data = clipped.astype(np.float32)
    else:
        raise ValueError(f"unsupported wav format {fmt!r}")
    wavfile.write(str(path), w.sample_rate, data)

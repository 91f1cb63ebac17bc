"""Seeded signal-distortion channel for robustness benchmarking.

Every attack is deterministic given (input, parameters, seed), preserves the
[-1, 1] sample range, and returns a waveform whose length matches the input
after group-delay compensation.
"""

from __future__ import annotations

import math
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import Waveform, read_wav, write_wav
from .errors import CodecError, CodecUnavailableError, SilentSignalError

ATTACK_KINDS = (
    "none",
    "additive_noise",
    "low_pass",
    "band_pass",
    "resample",
    "amplitude_scale",
    "echo",
    "external_codec",
)

#: Linear-phase FIR length for the filtering attacks (odd -> integer delay).
FIR_TAPS = 255

DEFAULT_ECHO_DELAY_MS = 100.0
DEFAULT_ECHO_DECAY = 0.3


@dataclass
class AttackSpec:
    """One attack: kind plus its numeric/string parameters."""

    kind: str
    params: dict = field(default_factory=dict)
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")


def parse_attack_spec(text: str) -> AttackSpec:
    """Parse ``"kind key=value ..."``, e.g. ``"additive_noise snr_db=20"``."""
    parts = shlex.split(text)
    if not parts:
        raise ValueError("empty attack spec")
    kind, params = parts[0], {}
    for item in parts[1:]:
        if "=" not in item:
            raise ValueError(f"attack parameter {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            params[k] = float(v)
        except ValueError:
            params[k] = v
    return AttackSpec(kind=kind, params=params)


def _clamp(samples: np.ndarray) -> np.ndarray:
    return np.clip(samples, -1.0, 1.0)


def additive_noise(w: Waveform, snr_db: float, seed: int) -> Waveform:
    """Add seeded white Gaussian noise at an exact pre-clamp SNR."""
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rms = float(np.sqrt(np.mean(w.samples**2)))
    if rms == 0.0:
        raise SilentSignalError("cannot set an SNR against a silent signal")
    noise = np.random.default_rng(seed).standard_normal(len(w.samples))
    noise *= rms * 10.0 ** (-snr_db / 20.0) / np.sqrt(np.mean(noise**2))
    return Waveform(_clamp(w.samples + noise), w.sample_rate)


def _fir_filter(w: Waveform, taps: np.ndarray) -> Waveform:
    delay = (len(taps) - 1) // 2
    padded = np.concatenate([w.samples, np.zeros(delay)])
    out = sps.lfilter(taps, [1.0], padded)[delay:]
    return Waveform(_clamp(out), w.sample_rate)


def low_pass(w: Waveform, cutoff_hz: float) -> Waveform:
    """Windowed-sinc low-pass FIR with delay compensation.

    A cutoff at or above Nyquist is the all-pass limit and returns a copy.
    """
    nyq = w.sample_rate / 2.0
    if not 0.0 < cutoff_hz <= nyq:
        raise ValueError(f"cutoff must be in (0, {nyq}], got {cutoff_hz}")
    if cutoff_hz >= nyq:
        return Waveform(w.samples.copy(), w.sample_rate)
    taps = sps.firwin(FIR_TAPS, cutoff_hz, window="hann", fs=w.sample_rate)
    return _fir_filter(w, taps)


def band_pass(w: Waveform, lo_hz: float, hi_hz: float) -> Waveform:
    """Windowed-sinc band-pass FIR with delay compensation."""
    nyq = w.sample_rate / 2.0
    if not 0.0 < lo_hz < hi_hz < nyq:
        raise ValueError(f"need 0 < lo < hi < {nyq}, got {lo_hz}..{hi_hz}")
    taps = sps.firwin(FIR_TAPS, [lo_hz, hi_hz], window="hann", pass_zero=False, fs=w.sample_rate)
    return _fir_filter(w, taps)


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Polyphase resample to target_hz and back to the original rate.

    Output is trimmed/padded to the input length.
    """
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if target_hz == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(w.sample_rate, int(target_hz))
    up, down = int(target_hz) // g, w.sample_rate // g
    low = sps.resample_poly(w.samples, up, down)
    back = sps.resample_poly(low, down, up)
    out = np.zeros(len(w.samples))
    n = min(len(out), len(back))
    out[:n] = back[:n]
    return Waveform(_clamp(out), w.sample_rate)


def amplitude_scale(w: Waveform, gain: float) -> Waveform:
    """Scale samples by a positive gain, clamped to [-1, 1]."""
    if gain <= 0:
        raise ValueError("gain must be positive")
    return Waveform(_clamp(w.samples * gain), w.sample_rate)


def echo(
    w: Waveform,
    delay_ms: float = DEFAULT_ECHO_DELAY_MS,
    decay: float = DEFAULT_ECHO_DECAY,
) -> Waveform:
    """Single delayed reflection: y[n] = x[n] + decay * x[n - delay]."""
    if delay_ms < 0:
        raise ValueError("delay_ms must be >= 0")
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must be in [0, 1)")
    d = int(round(delay_ms * w.sample_rate / 1000.0))
    out = w.samples.copy()
    if d < len(out) and decay > 0.0:
        out[d:] += decay * w.samples[: len(out) - d]
    return Waveform(_clamp(out), w.sample_rate)


def codec_available(command_template: str) -> bool:
    """True when the template's executable is on PATH."""
    try:
        first = shlex.split(command_template)[0]
    except (ValueError, IndexError):
        return False
    return shutil.which(first) is not None


def external_codec(w: Waveform, command_template: str, fmt: str = "mp3") -> Waveform:
    """Round-trip through an external encoder/decoder command.

    The template is run through the shell with ``{in}`` and ``{out}``
    replaced by temporary WAV paths and ``{tmp}`` by a scratch path carrying
    the ``fmt`` extension. The command must leave decoded audio at ``{out}``.
    Output is resampled back to the source rate if needed and trimmed/padded
    to the source length.
    """
    if not codec_available(command_template):
        raise CodecUnavailableError(
            f"codec command not found: {shlex.split(command_template)[0]!r}"
        )
    with tempfile.TemporaryDirectory(prefix="melmark-codec-") as tmp:
        in_path = Path(tmp) / "in.wav"
        out_path = Path(tmp) / "out.wav"
        scratch = Path(tmp) / f"scratch.{fmt}"
        write_wav(in_path, w, fmt="pcm16")
        cmd = command_template.format(**{"in": str(in_path), "out": str(out_path), "tmp": str(scratch)})
        proc = subprocess.run(
            cmd, shell=True, capture_output=True, text=True, timeout=300
        )
        if proc.returncode != 0:
            raise CodecError(f"codec command failed ({proc.returncode}): {proc.stderr.strip()[:500]}")
        if not out_path.exists():
            raise CodecError("codec command produced no output file")
        try:
            decoded = read_wav(out_path)
        except Exception as exc:
            raise CodecError(f"codec output unreadable: {exc}") from exc
    if decoded.sample_rate != w.sample_rate:
        g = math.gcd(decoded.sample_rate, w.sample_rate)
        decoded = Waveform(
            sps.resample_poly(decoded.samples, w.sample_rate // g, decoded.sample_rate // g),
            w.sample_rate,
        )
    out = np.zeros(len(w.samples))
    n = min(len(out), len(decoded.samples))
    out[:n] = decoded.samples[:n]
    return Waveform(_clamp(out), w.sample_rate)


def apply_attack(w: Waveform, spec: AttackSpec) -> Waveform:
    """Dispatch an AttackSpec onto the matching attack function."""
    p = spec.params
    if spec.kind == "none":
        return Waveform(w.samples.copy(), w.sample_rate)
    if spec.kind == "additive_noise":
        return additive_noise(w, snr_db=float(p["snr_db"]), seed=spec.rng_seed)
    if spec.kind == "low_pass":
        return low_pass(w, cutoff_hz=float(p["cutoff_hz"]))
    if spec.kind == "band_pass":
        return band_pass(w, lo_hz=float(p["lo_hz"]), hi_hz=float(p["hi_hz"]))
    if spec.kind == "resample":
        return resample(w, target_hz=int(p["target_hz"]))
    if spec.kind == "amplitude_scale":
        return amplitude_scale(w, gain=float(p["gain"]))
    if spec.kind == "echo":
        return echo(
            w,
            delay_ms=float(p.get("delay_ms", DEFAULT_ECHO_DELAY_MS)),
            decay=float(p.get("decay", DEFAULT_ECHO_DECAY)),
        )
    if spec.kind == "external_codec":
        return external_codec(w, command_template=str(p["template"]), fmt=str(p.get("format", "mp3")))
    raise ValueError(f"unhandled attack kind {spec.kind!r}")

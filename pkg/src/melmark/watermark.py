"""Embedding and extraction of spread-spectrum payloads in log-Mel matrices.

Embedding superposes keyed +-1 patterns, one per payload bit, scaled by
1/sqrt(L) and an embedding strength alpha, weighted per frame by an adaptive
mask, and injects the result into a mid-frequency Mel band after compressing
that band into [headroom, 1 - headroom]. Extraction correlates the
mean-subtracted residual against regenerated patterns and decodes each bit
from the sign of its score.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field

import numpy as np

from .dsp import LogMelSpectrogram, MelConfig
from .errors import AlignmentError, ConfigMismatchError
from .patterns import SecretKey, pattern_stack

MAX_PAYLOAD_BITS = 4096

#: Decision threshold on bit accuracy; configurable everywhere it is used.
DEFAULT_TAU = 0.61

#: Default frame search radius for time alignment.
DEFAULT_MAX_SHIFT = 16


def default_headroom(alpha: float) -> float:
    """Headroom keeping |perturbation| <= alpha clear of the [0,1] boundary."""
    return min(alpha, 0.05)


@dataclass
class Payload:
    """Binary message of L bits."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1 or not 1 <= len(self.bits) <= MAX_PAYLOAD_BITS:
            raise ValueError(f"payload must be 1..{MAX_PAYLOAD_BITS} bits")
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ValueError("payload bits must be 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def random(cls, length: int, rng: np.random.Generator) -> "Payload":
        return cls(bits=rng.integers(0, 2, size=length, dtype=np.uint8))

    @classmethod
    def from_bitstring(cls, text: str) -> "Payload":
        if not text or set(text) - {"0", "1"}:
            raise ValueError(f"not a bit string: {text!r}")
        return cls(bits=np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0"))

    def to_bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


@dataclass(frozen=True)
class BandSelection:
    """Half-open Mel band range [c_min, c_max); the embedding region."""

    c_min: int
    c_max: int

    def __post_init__(self):
        if not 0 <= self.c_min < self.c_max:
            raise ValueError(f"need 0 <= c_min < c_max, got {self.c_min}:{self.c_max}")

    @property
    def width(self) -> int:
        return self.c_max - self.c_min

    def validate_for(self, num_bands: int) -> None:
        if self.c_max > num_bands:
            raise ValueError(f"band {self.c_min}:{self.c_max} exceeds {num_bands} Mel bands")


#: Paper-default embedding band: Mel bins 20 through 55 inclusive (36 bands).
DEFAULT_BAND = BandSelection(20, 56)


@dataclass
class WatermarkMeta:
    """Everything needed to regenerate an embedding besides the key itself."""

    payload_length: int
    alpha: float
    band: BandSelection
    mel_config: MelConfig
    key_id: str
    utterance_id: str
    headroom: float = field(default=-1.0)

    def __post_init__(self):
        if self.headroom < 0:
            self.headroom = default_headroom(self.alpha)
        if not 1 <= self.payload_length <= MAX_PAYLOAD_BITS:
            raise ValueError("payload_length out of range")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 <= self.headroom < 0.5:
            raise ValueError("headroom must be in [0, 0.5)")
        self.band.validate_for(self.mel_config.num_bands)


@dataclass
class AdaptiveMask:
    """Per-frame weights in [0, 1], broadcast along the frequency axis."""

    values: np.ndarray


@dataclass
class ReferenceRecord:
    """Clean (pre-watermark) spectrogram plus embedding metadata, kept by the
    owner for later verification. Never contains key material."""

    utterance_id: str
    X_ref: LogMelSpectrogram
    meta: WatermarkMeta
    created_at: str = ""

    def __post_init__(self):
        if not self.created_at:
            self.created_at = _dt.datetime.now(_dt.timezone.utc).isoformat()


@dataclass
class VerificationResult:
    """Per-bit correlation scores and the threshold decision."""

    scores: np.ndarray
    decoded_bits: np.ndarray
    threshold: float
    bit_acc: float | None = None
    accepted: bool | None = None

    @property
    def decoded(self) -> Payload:
        return Payload(bits=self.decoded_bits)


def compute_adaptive_mask(band_values: np.ndarray) -> AdaptiveMask:
    """Min-max normalized frame energy, broadcast over the band rows.

    Equal-energy input (no frame contrast) gets a unit mask. The weights are
    invariant under affine rescaling of the band, so embedder (which sees the
    headroom-compressed band) and verifier (which sees the raw reference
    band) compute the same mask.
    """
    energy = band_values.mean(axis=0)
    lo, hi = energy.min(), energy.max()
    if hi == lo:
        weights = np.ones_like(energy)
    else:
        weights = (energy - lo) / (hi - lo + 1e-12)
    return AdaptiveMask(values=np.broadcast_to(weights, band_values.shape).copy())


_CHUNK_BITS = 64  # keeps the float64 working set small at large payload lengths


def build_watermark_layer(
    payload: Payload, key: SecretKey, utterance_id: str, shape: tuple[int, int]
) -> np.ndarray:
    """Superposition (1/sqrt(L)) * sum_j (2 m_j - 1) * S_j over the band shape."""
    rows, cols = shape
    stack = pattern_stack(key, utterance_id, len(payload), rows, cols)
    polarity = payload.bits.astype(np.float64) * 2.0 - 1.0
    out = np.zeros((rows, cols))
    for lo in range(0, len(payload), _CHUNK_BITS):
        hi = lo + _CHUNK_BITS
        out += np.tensordot(polarity[lo:hi], stack[lo:hi].astype(np.float64), axes=(0, 0))
    return out / np.sqrt(len(payload))


def embed(
    X: LogMelSpectrogram, payload: Payload, key: SecretKey, meta: WatermarkMeta
) -> tuple[LogMelSpectrogram, ReferenceRecord]:
    """Inject the payload into X's embedding band.

    Returns the watermarked spectrogram and the reference record holding the
    original X. Bins outside the band are returned bit-identical.
    """
    if len(payload) != meta.payload_length:
        raise ValueError(f"payload has {len(payload)} bits, meta says {meta.payload_length}")
    if X.config != meta.mel_config:
        raise ConfigMismatchError("spectrogram and meta disagree on Mel configuration")
    meta.band.validate_for(X.config.num_bands)

    band = meta.band
    x_band = X.values[band.c_min : band.c_max]
    delta = meta.headroom
    compressed = delta + (1.0 - 2.0 * delta) * x_band
    mask = compute_adaptive_mask(compressed)
    layer = build_watermark_layer(payload, key, meta.utterance_id, x_band.shape)
    marked_band = np.clip(compressed + meta.alpha * (mask.values * layer), 0.0, 1.0)

    out = X.values.copy()
    out[band.c_min : band.c_max] = marked_band
    marked = LogMelSpectrogram(values=out, config=X.config)
    ref = ReferenceRecord(utterance_id=meta.utterance_id, X_ref=X, meta=meta)
    return marked, ref


def residual_scores(
    det_values: np.ndarray,
    ref_values: np.ndarray,
    band: BandSelection,
    mask_values: np.ndarray,
    patterns: np.ndarray,
) -> np.ndarray:
    """Masked correlation scores of the mean-subtracted residual.

    Operates on raw arrays so callers can probe offsets outside [0, 1]; the
    global mean is removed from the full-matrix residual before the band is
    correlated against each pattern.
    """
    delta = det_values - ref_values
    delta = delta - delta.mean()
    weighted = delta[band.c_min : band.c_max] * mask_values
    scores = np.empty(len(patterns))
    for lo in range(0, len(patterns), _CHUNK_BITS):
        hi = lo + _CHUNK_BITS
        scores[lo:hi] = np.tensordot(
            patterns[lo:hi].astype(np.float64), weighted, axes=([1, 2], [0, 1])
        )
    return scores


def extract(
    X_det: LogMelSpectrogram,
    ref: ReferenceRecord,
    key: SecretKey,
    expected: Payload | None = None,
    tau: float = DEFAULT_TAU,
) -> VerificationResult:
    """Decode the payload from an aligned suspect spectrogram.

    The adaptive mask is recomputed from the clean reference band and the
    spreading patterns are regenerated from (key, utterance id). When the
    expected payload is given, bit accuracy and the accept decision at tau
    are filled in.
    """
    if X_det.config != ref.X_ref.config:
        raise ConfigMismatchError("suspect and reference use different Mel configurations")
    if X_det.num_frames != ref.X_ref.num_frames:
        raise ConfigMismatchError(
            f"frame count mismatch after alignment: {X_det.num_frames} != {ref.X_ref.num_frames}"
        )
    meta = ref.meta
    band = meta.band
    mask = compute_adaptive_mask(ref.X_ref.values[band.c_min : band.c_max])
    patterns = pattern_stack(
        key, meta.utterance_id, meta.payload_length, band.width, X_det.num_frames
    )
    scores = residual_scores(X_det.values, ref.X_ref.values, band, mask.values, patterns)
    decoded = (scores >= 0.0).astype(np.uint8)

    bit_acc = None
    accepted = None
    if expected is not None:
        bit_acc = bit_accuracy(expected, Payload(bits=decoded))
        accepted = bool(bit_acc >= tau)
    return VerificationResult(
        scores=scores,
        decoded_bits=decoded,
        threshold=tau,
        bit_acc=bit_acc,
        accepted=accepted,
    )


def align(
    X_det: LogMelSpectrogram,
    X_ref: LogMelSpectrogram,
    max_shift: int = DEFAULT_MAX_SHIFT,
) -> LogMelSpectrogram:
    """Integer-frame alignment of a suspect spectrogram onto the reference grid.

    Searches shifts s in [-max_shift, max_shift] maximizing the correlation of
    per-frame energy sequences; ties prefer small |s|, then negative s. The
    result is trimmed or zero-padded to the reference frame count.
    """
    if X_det.config != X_ref.config:
        raise ConfigMismatchError("cannot align spectrograms with different configurations")
    det = X_det.values
    m_det = det.shape[1]
    m_ref = X_ref.num_frames

    e_det = det.mean(axis=0)
    e_ref = X_ref.values.mean(axis=0)

    def centered_corr(shift: int) -> float:
        det_lo = max(0, shift)
        det_hi = min(m_det, m_ref + shift)
        if det_hi - det_lo < 2:
            return -np.inf
        a = e_det[det_lo:det_hi]
        b = e_ref[det_lo - shift : det_hi - shift]
        a = a - a.mean()
        b = b - b.mean()
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        if denom == 0.0:
            return 0.0
        return float(np.dot(a, b) / denom)

    candidates = sorted(range(-max_shift, max_shift + 1), key=lambda s: (abs(s), s))
    best_shift = candidates[0]
    best_corr = -np.inf
    for s in candidates:
        c = centered_corr(s)
        if c > best_corr:
            best_corr = c
            best_shift = s

    if best_corr <= 0.0 and abs(m_det - m_ref) > max_shift:
        raise AlignmentError(
            f"no positive-correlation shift within +-{max_shift} frames and "
            f"frame counts differ by {abs(m_det - m_ref)}"
        )

    aligned = np.zeros((det.shape[0], m_ref))
    src_lo = max(0, best_shift)
    src_hi = min(m_det, m_ref + best_shift)
    if src_hi > src_lo:
        aligned[:, src_lo - best_shift : src_hi - best_shift] = det[:, src_lo:src_hi]
    return LogMelSpectrogram(values=aligned, config=X_det.config)


def bit_accuracy(expected: Payload, decoded: Payload) -> float:
    """Fraction of matching bits."""
    if len(expected) != len(decoded):
        raise ValueError(f"payload lengths differ: {len(expected)} != {len(decoded)}")
    return float(np.mean(expected.bits == decoded.bits))

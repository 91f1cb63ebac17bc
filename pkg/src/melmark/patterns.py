"""Keyed generation of +-1 spreading patterns.

The generator is pinned bit-exactly so an embedder and a verifier built from
this description always agree:

* Seed derivation: 64-bit FNV-1a over ``key_bytes || 0x00 || utf8(utterance_id)
  || 0x00 || bit_index`` with the bit index encoded as 4 little-endian bytes.
* Expansion: SplitMix64 starting from that seed. Successive 64-bit outputs are
  consumed bit-by-bit, least-significant bit first; bit b becomes the entry
  2b - 1. Entries fill the matrix row-major.

This is a keyed PRF in the practical sense only; no cryptographic strength is
claimed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)

KEY_BYTES_LEN = 16
MAX_KEY_ID_LEN = 64


@dataclass(frozen=True)
class SecretKey:
    """128-bit key material plus a short printable identifier."""

    key_bytes: bytes
    key_id: str

    def __post_init__(self):
        if len(self.key_bytes) != KEY_BYTES_LEN:
            raise ValueError(f"key_bytes must be {KEY_BYTES_LEN} bytes, got {len(self.key_bytes)}")
        if not self.key_id or len(self.key_id) > MAX_KEY_ID_LEN:
            raise ValueError("key_id must be nonempty and at most 64 characters")


@dataclass
class SpreadingPattern:
    """A +-1 matrix carrying one payload bit."""

    entries: np.ndarray
    bit_index: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def fnv1a64(data: bytes, state: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a hash, optionally chained from a previous state."""
    h = state
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def derive_seed(key: SecretKey, utterance_id: str, bit_index: int) -> int:
    """Deterministic 64-bit seed for (key, utterance, bit index)."""
    if bit_index < 0 or bit_index >= 2**32:
        raise ValueError(f"bit_index must be in [0, 2^32), got {bit_index}")
    data = (
        key.key_bytes
        + b"\x00"
        + utterance_id.encode("utf-8")
        + b"\x00"
        + struct.pack("<I", bit_index)
    )
    return fnv1a64(data)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of SplitMix64 from ``seed`` as uint64."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + idx * _SM_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
        z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
        z = z ^ (z >> np.uint64(31))
    return z


def gen_pattern(
    key: SecretKey, utterance_id: str, bit_index: int, rows: int, cols: int
) -> SpreadingPattern:
    """Regenerable +-1 pattern of the given shape for one payload bit."""
    if rows < 1 or cols < 1:
        raise ValueError("pattern shape must be positive")
    n = rows * cols
    words = splitmix64(derive_seed(key, utterance_id, bit_index), (n + 63) // 64)
    lsb_first = words.astype("<u8", copy=False).view(np.uint8)
    bits = np.unpackbits(lsb_first, bitorder="little")[:n]
    entries = (bits.astype(np.int8) * 2 - 1).reshape(rows, cols)
    return SpreadingPattern(entries=entries, bit_index=bit_index)


def pattern_stack(
    key: SecretKey, utterance_id: str, num_bits: int, rows: int, cols: int
) -> np.ndarray:
    """All payload-bit patterns stacked into an int8 array (num_bits, rows, cols)."""
    out = np.empty((num_bits, rows, cols), dtype=np.int8)
    for j in range(num_bits):
        out[j] = gen_pattern(key, utterance_id, j, rows, cols).entries
    return out


def pattern_bytes(pattern: SpreadingPattern) -> bytes:
    """Row-major signed-byte serialization, the golden-file interchange format."""
    return np.ascontiguousarray(pattern.entries, dtype=np.int8).tobytes()

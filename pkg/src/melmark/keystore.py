"""Multi-user attribution state: key registry and persistent reference records.

Reference container layout (little-endian throughout)::

    magic   4 bytes  b"MSRF"
    version u16      currently 1
    mlen    u32      byte length of the meta block
    meta    mlen     UTF-8 JSON: utterance id, creation time, Mel config,
                     and (for reference records) the watermark metadata
    C, M    u32, u32 matrix dimensions
    values  C*M*4    row-major float32
    crc     u32      CRC32 of every preceding byte

Records never contain key bytes, only the key id. Writes go through a
temporary file plus rename, so a crash mid-write cannot leave a loadable but
corrupt record.

The registry is a line-oriented text file (``user_id<TAB>key_hex<TAB>bits``),
hex-encoded keys and 0/1 payload strings, deliberately human-auditable.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import LogMelSpectrogram, MelConfig, StftConfig, Waveform, mel_spectrogram
from .errors import (
    CorruptRecordError,
    DuplicateUserError,
    RecordNotFoundError,
    UnknownUserError,
)
from .patterns import KEY_BYTES_LEN, SecretKey
from .watermark import (
    DEFAULT_MAX_SHIFT,
    DEFAULT_TAU,
    BandSelection,
    Payload,
    ReferenceRecord,
    VerificationResult,
    WatermarkMeta,
    align,
    extract,
)

log = logging.getLogger(__name__)

MAGIC = b"MSRF"
VERSION = 1

_SAFE_ID_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-")


def _check_file_id(name: str, what: str) -> str:
    if not name or set(name) - _SAFE_ID_CHARS:
        raise ValueError(f"{what} {name!r} must use only [A-Za-z0-9._-]")
    return name


@dataclass
class UserEntry:
    """One registered user: id, secret key, and assigned payload."""

    user_id: str
    key: SecretKey
    payload: Payload


class Registry:
    """In-memory user registry with optional line-delimited file persistence."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.users: dict[str, UserEntry] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        for line in self.path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                user_id, key_hex, bits = line.split("\t")
                entry = UserEntry(
                    user_id=user_id,
                    key=SecretKey(bytes.fromhex(key_hex), key_id=user_id),
                    payload=Payload.from_bitstring(bits),
                )
            except ValueError as exc:
                raise CorruptRecordError(f"bad registry line {line!r}: {exc}") from exc
            self.users[user_id] = entry

    def save(self) -> None:
        if self.path is None:
            raise ValueError("registry has no backing file")
        lines = ["# melmark registry: user_id\tkey_hex\tpayload_bits"]
        for user_id in sorted(self.users):
            e = self.users[user_id]
            lines.append(f"{user_id}\t{e.key.key_bytes.hex()}\t{e.payload.to_bitstring()}")
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, self.path)

    def register_user(
        self,
        user_id: str,
        payload_length: int,
        rng: np.random.Generator | None = None,
    ) -> UserEntry:
        """Create a user with fresh random key bytes and payload."""
        _check_file_id(user_id, "user id")
        if len(user_id) > 64:
            raise ValueError("user id too long (max 64 chars)")
        if user_id in self.users:
            raise DuplicateUserError(f"user {user_id!r} already registered")
        if rng is None:
            rng = np.random.default_rng()
        entry = UserEntry(
            user_id=user_id,
            key=SecretKey(rng.bytes(KEY_BYTES_LEN), key_id=user_id),
            payload=Payload.random(payload_length, rng),
        )
        existing = {e.payload.to_bitstring() for e in self.users.values()}
        if entry.payload.to_bitstring() in existing:
            log.warning("payload collision for user %s (permitted, logged)", user_id)
        self.users[user_id] = entry
        if self.path is not None:
            self.save()
        return entry

    def lookup(self, user_id: str) -> UserEntry:
        if user_id not in self.users:
            raise UnknownUserError(f"no such user {user_id!r}")
        return self.users[user_id]

    def __len__(self) -> int:
        return len(self.users)


def _stft_config_dict(cfg: StftConfig) -> dict:
    return {
        "fft_size": cfg.fft_size,
        "hop": cfg.hop,
        "window": cfg.window,
        "power": cfg.power,
    }


def _mel_config_dict(cfg: MelConfig) -> dict:
    return {
        "num_bands": cfg.num_bands,
        "f_min": cfg.f_min,
        "f_max": cfg.f_max,
        "sample_rate": cfg.sample_rate,
        "stft": _stft_config_dict(cfg.stft),
        "epsilon": cfg.epsilon,
        "norm_floor_db": cfg.norm_floor_db,
        "norm_ceil_db": cfg.norm_ceil_db,
    }


def _mel_config_from_dict(d: dict) -> MelConfig:
    return MelConfig(
        num_bands=int(d["num_bands"]),
        f_min=float(d["f_min"]),
        f_max=float(d["f_max"]),
        sample_rate=int(d["sample_rate"]),
        stft=StftConfig(
            fft_size=int(d["stft"]["fft_size"]),
            hop=int(d["stft"]["hop"]),
            window=str(d["stft"]["window"]),
            power=int(d["stft"]["power"]),
        ),
        epsilon=float(d["epsilon"]),
        norm_floor_db=float(d["norm_floor_db"]),
        norm_ceil_db=float(d["norm_ceil_db"]),
    )


def _encode_container(meta: dict, values: np.ndarray) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    c, m = values.shape
    body = (
        MAGIC
        + struct.pack("<H", VERSION)
        + struct.pack("<I", len(meta_bytes))
        + meta_bytes
        + struct.pack("<II", c, m)
        + np.ascontiguousarray(values, dtype="<f4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def _decode_container(blob: bytes, source: str) -> tuple[dict, np.ndarray]:
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CorruptRecordError(f"{source}: bad magic or truncated header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CorruptRecordError(f"{source}: unsupported version {version}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise CorruptRecordError(f"{source}: checksum mismatch")
    (mlen,) = struct.unpack_from("<I", blob, 6)
    off = 10
    meta = json.loads(blob[off : off + mlen].decode("utf-8"))
    off += mlen
    c, m = struct.unpack_from("<II", blob, off)
    off += 8
    expect = off + c * m * 4 + 4
    if len(blob) != expect:
        raise CorruptRecordError(f"{source}: payload size mismatch ({len(blob)} != {expect})")
    values = np.frombuffer(blob, dtype="<f4", count=c * m, offset=off).reshape(c, m)
    return meta, values.astype(np.float64)


def encode_record(rec: ReferenceRecord) -> bytes:
    """Serialize a reference record into the container format."""
    meta = {
        "utterance_id": rec.utterance_id,
        "created_at": rec.created_at,
        "mel": _mel_config_dict(rec.X_ref.config),
        "watermark": {
            "payload_length": rec.meta.payload_length,
            "alpha": rec.meta.alpha,
            "band": [rec.meta.band.c_min, rec.meta.band.c_max],
            "key_id": rec.meta.key_id,
            "headroom": rec.meta.headroom,
        },
    }
    return _encode_container(meta, rec.X_ref.values)


def decode_record(blob: bytes, source: str = "record") -> ReferenceRecord:
    meta, values = _decode_container(blob, source)
    wm = meta.get("watermark")
    if wm is None:
        raise CorruptRecordError(f"{source}: container has no watermark metadata")
    cfg = _mel_config_from_dict(meta["mel"])
    return ReferenceRecord(
        utterance_id=meta["utterance_id"],
        X_ref=LogMelSpectrogram(values=values, config=cfg),
        meta=WatermarkMeta(
            payload_length=int(wm["payload_length"]),
            alpha=float(wm["alpha"]),
            band=BandSelection(int(wm["band"][0]), int(wm["band"][1])),
            mel_config=cfg,
            key_id=str(wm["key_id"]),
            utterance_id=meta["utterance_id"],
            headroom=float(wm["headroom"]),
        ),
        created_at=meta["created_at"],
    )


def save_mel(path: str | Path, X: LogMelSpectrogram, utterance_id: str = "") -> None:
    """Write a bare Mel container (no watermark metadata)."""
    meta = {
        "utterance_id": utterance_id,
        "created_at": "",
        "mel": _mel_config_dict(X.config),
        "watermark": None,
    }
    _atomic_write(Path(path), _encode_container(meta, X.values))


def load_mel(path: str | Path) -> LogMelSpectrogram:
    """Read the Mel matrix from any container file (bare or reference)."""
    p = Path(path)
    if not p.exists():
        raise RecordNotFoundError(f"no such file {p}")
    meta, values = _decode_container(p.read_bytes(), str(p))
    return LogMelSpectrogram(values=values, config=_mel_config_from_dict(meta["mel"]))


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class ReferenceStore:
    """One reference container per utterance id under a store directory."""

    SUFFIX = ".msrf"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, utterance_id: str) -> Path:
        return self.root / (_check_file_id(utterance_id, "utterance id") + self.SUFFIX)

    def store(self, rec: ReferenceRecord) -> Path:
        path = self.path_for(rec.utterance_id)
        _atomic_write(path, encode_record(rec))
        return path

    def load(self, utterance_id: str) -> ReferenceRecord:
        path = self.path_for(utterance_id)
        if not path.exists():
            raise RecordNotFoundError(f"no reference record for {utterance_id!r}")
        return decode_record(path.read_bytes(), str(path))

    def list_ids(self) -> list[str]:
        return sorted(p.name[: -len(self.SUFFIX)] for p in self.root.glob("*" + self.SUFFIX))


def verify_suspect(
    store: ReferenceStore,
    registry: Registry,
    utterance_id: str,
    claimed_user: str,
    suspect: Waveform,
    tau: float = DEFAULT_TAU,
    max_shift: int = DEFAULT_MAX_SHIFT,
) -> VerificationResult:
    """Owner-side verification of a suspect waveform against a stored record.

    Recomputes the suspect's log-Mel spectrogram with the record's analysis
    configuration, aligns it to the reference, and extracts with the claimed
    user's key against the claimed user's payload.
    """
    rec = store.load(utterance_id)
    entry = registry.lookup(claimed_user)
    X_det = mel_spectrogram(suspect, rec.X_ref.config)
    aligned = align(X_det, rec.X_ref, max_shift=max_shift)
    return extract(aligned, rec, entry.key, expected=entry.payload, tau=tau)

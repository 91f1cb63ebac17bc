"""Quality and reliability measurement: SNR, log-spectral distance, aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dsp import StftConfig, Waveform, stft_array
from .errors import SilentSignalError

#: Reported ceiling for SNR; identical signals hit this sentinel.
SNR_CAP_DB = 200.0

_LSD_EPS = 1e-10


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def snr(ref, deg) -> float:
    """Signal-to-noise ratio 10*log10(sum ref^2 / sum (ref-deg)^2), capped at 200 dB.

    Accepts Waveforms or plain sample arrays of equal length.
    """
    r = _samples(ref)
    d = _samples(deg)
    if r.shape != d.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {d.shape}")
    sig = float(np.sum(r * r))
    if sig == 0.0:
        raise SilentSignalError("SNR undefined for a zero reference")
    err = float(np.sum((r - d) ** 2))
    if err == 0.0:
        return SNR_CAP_DB
    return min(10.0 * np.log10(sig / err), SNR_CAP_DB)


def log_spectral_distance(ref, deg, cfg: StftConfig | None = None) -> float:
    """Mean per-frame RMS distance between log-magnitude spectra, in dB."""
    if cfg is None:
        cfg = StftConfig()
    r = np.abs(stft_array(_samples(ref), cfg))
    d = np.abs(stft_array(_samples(deg), cfg))
    if r.shape != d.shape:
        raise ValueError(f"frame mismatch: {r.shape} vs {d.shape}")
    diff = 20.0 * np.log10(r + _LSD_EPS) - 20.0 * np.log10(d + _LSD_EPS)
    return float(np.mean(np.sqrt(np.mean(diff * diff, axis=1))))


@dataclass
class QualityReport:
    """Per-trial measurement row."""

    snr_db: float
    lsd_db: float
    bit_acc: float | None = None
    attack_label: str = ""


@dataclass
class ConditionSummary:
    """Mean/std statistics for one condition label."""

    label: str
    count: int
    bit_acc_mean: float | None
    bit_acc_std: float | None
    snr_db_mean: float
    snr_db_std: float
    lsd_db_mean: float
    lsd_db_std: float


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(reports: Iterable[QualityReport]) -> list[ConditionSummary]:
    """Group reports by attack label and summarize, in sorted label order."""
    groups: dict[str, list[QualityReport]] = {}
    for rep in reports:
        groups.setdefault(rep.attack_label, []).append(rep)
    if not groups:
        raise ValueError("nothing to aggregate")
    out = []
    for label in sorted(groups):
        rows = groups[label]
        accs = [r.bit_acc for r in rows if r.bit_acc is not None]
        acc_mean, acc_std = _mean_std(accs) if accs else (None, None)
        snr_mean, snr_std = _mean_std([r.snr_db for r in rows])
        lsd_mean, lsd_std = _mean_std([r.lsd_db for r in rows])
        out.append(
            ConditionSummary(
                label=label,
                count=len(rows),
                bit_acc_mean=acc_mean,
                bit_acc_std=acc_std,
                snr_db_mean=snr_mean,
                snr_db_std=snr_std,
                lsd_db_mean=lsd_mean,
                lsd_db_std=lsd_std,
            )
        )
    return out

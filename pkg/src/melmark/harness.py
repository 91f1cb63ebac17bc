"""Experiment runner: strength/capacity sweeps, threshold calibration, and the
attack robustness matrix, all reproducible from a single master seed.

Plan files are INI-style ``key = value`` sections::

    [plan]
    master_seed = 20240601
    trials_per_cell = 50
    payload_lengths = 16, 32
    alphas = 0.1, 0.25
    tau = 0.61
    channel_iterations = 32
    band = 20:55            ; inclusive Mel band, like the CLI flag
    h1_trials = 1000        ; calibration only
    h0_trials = 1000        ; calibration only
    fpr_target = 0.001      ; calibration only

    [hosts]
    synthetic_count = 4
    duration_s = 2.5
    wav_dir =               ; optional directory of mono WAVs at the analysis rate

    [attacks]
    clean = none
    n20 = additive_noise snr_db=20
    mp3 = external_codec template="lame -b 128 {in} {tmp} && lame --decode {tmp} {out}"

Attack labels become CSV row keys. ``external_codec`` cells whose command is
missing from the host are reported as skipped, never as numbers.

Within one (payload length, alpha) cell the same embedded clips are subjected
to every attack, mirroring the usual benchmarking protocol; per-trial seeds
derive from (master seed, cell, trial) so any execution order or parallel
split yields identical results.
"""

from __future__ import annotations

import configparser
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import metrics
from .dsp import (
    DEFAULT_CHANNEL_ITERATIONS,
    LogMelSpectrogram,
    MelConfig,
    Waveform,
    mel_spectrogram,
    mel_to_waveform,
    read_wav,
)
from .errors import CodecUnavailableError, MelmarkError, PlanError
from .patterns import KEY_BYTES_LEN, SecretKey, fnv1a64
from .watermark import (
    DEFAULT_BAND,
    DEFAULT_MAX_SHIFT,
    DEFAULT_TAU,
    BandSelection,
    Payload,
    ReferenceRecord,
    WatermarkMeta,
    align,
    embed,
    extract,
)

log = logging.getLogger(__name__)

CODEC_TEMPLATE_ENV = "MELMARK_CODEC_TEMPLATE"

SWEEP_COLUMNS = (
    "payload_length",
    "alpha",
    "attack",
    "trials",
    "status",
    "bit_acc_mean",
    "bit_acc_std",
    "snr_db_mean",
    "snr_db_std",
    "lsd_db_mean",
    "lsd_db_std",
)

HISTOGRAM_COLUMNS = (
    "bit_acc",
    "h1_count",
    "h0_count",
    "h0_unwatermarked_count",
    "h0_wrong_key_count",
)


def parse_band(text: str) -> BandSelection:
    """Parse ``"lo:hi"`` with hi inclusive (``20:55`` covers 36 Mel bands)."""
    try:
        lo, hi = text.split(":")
        return BandSelection(int(lo), int(hi) + 1)
    except ValueError as exc:
        raise ValueError(f"band must look like 20:55, got {text!r}") from exc


@dataclass
class ExperimentPlan:
    """Everything a run needs; every field has a desk-scale default."""

    master_seed: int = 20240601
    trials_per_cell: int = 50
    payload_lengths: list[int] = field(default_factory=lambda: [32])
    alphas: list[float] = field(default_factory=lambda: [0.25])
    attacks: list[tuple[str, atk.AttackSpec]] = field(
        default_factory=lambda: [("clean", atk.AttackSpec("none"))]
    )
    tau: float = DEFAULT_TAU
    band: BandSelection = DEFAULT_BAND
    channel_iterations: int = DEFAULT_CHANNEL_ITERATIONS
    max_shift: int = DEFAULT_MAX_SHIFT
    mel_config: MelConfig = field(default_factory=MelConfig)
    synthetic_count: int = 4
    duration_s: float = 2.5
    wav_dir: str = ""
    h1_trials: int = 1000
    h0_trials: int = 1000
    fpr_target: float = 1e-3

    def __post_init__(self):
        if self.trials_per_cell < 1:
            raise PlanError("trials_per_cell must be >= 1")
        if any(a < 0 for a in self.alphas):
            raise PlanError("alphas must be >= 0")
        if not self.alphas or not self.payload_lengths:
            raise PlanError("need at least one alpha and one payload length")


def load_plan(path: str | Path) -> ExperimentPlan:
    """Read an ExperimentPlan from an INI plan file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(str(path))
    if not read:
        raise PlanError(f"cannot read plan file {path}")
    if "plan" not in parser:
        raise PlanError("plan file is missing its [plan] section")
    p = parser["plan"]
    hosts = parser["hosts"] if "hosts" in parser else {}

    def _list(raw: str, conv):
        return [conv(item.strip()) for item in raw.split(",") if item.strip()]

    try:
        plan = ExperimentPlan(
            master_seed=p.getint("master_seed", 20240601),
            trials_per_cell=p.getint("trials_per_cell", 50),
            payload_lengths=_list(p.get("payload_lengths", "32"), int),
            alphas=_list(p.get("alphas", "0.25"), float),
            tau=p.getfloat("tau", DEFAULT_TAU),
            band=parse_band(p.get("band", "20:55")),
            channel_iterations=p.getint("channel_iterations", DEFAULT_CHANNEL_ITERATIONS),
            max_shift=p.getint("max_shift", DEFAULT_MAX_SHIFT),
            synthetic_count=int(hosts.get("synthetic_count", 4)),
            duration_s=float(hosts.get("duration_s", 2.5)),
            wav_dir=str(hosts.get("wav_dir", "") or ""),
            h1_trials=p.getint("h1_trials", 1000),
            h0_trials=p.getint("h0_trials", 1000),
            fpr_target=p.getfloat("fpr_target", 1e-3),
        )
    except ValueError as exc:
        raise PlanError(f"bad plan value: {exc}") from exc

    if "attacks" in parser:
        plan.attacks = [
            (label, atk.parse_attack_spec(spec_text))
            for label, spec_text in parser["attacks"].items()
        ]
    return plan


def derive_u64(*parts) -> int:
    """Deterministic 64-bit value from a tuple of printable parts."""
    return fnv1a64("|".join(repr(p) for p in parts).encode("utf-8"))


def synth_host(duration_s: float, sample_rate: int, seed: int) -> Waveform:
    """Speech-like synthetic host: vibrato harmonic stack with formant-shaped
    amplitudes, a syllabic energy envelope, and a bed of shaped noise."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = rng.uniform(110.0, 210.0)
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(4.0, 6.5) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate

    formants = np.array([500.0, 1500.0, 2600.0, 4200.0]) * rng.uniform(0.85, 1.15, size=4)
    bandwidths = np.array([220.0, 320.0, 420.0, 600.0])

    def formant_gain(freq_hz: float) -> float:
        g = np.exp(-0.5 * ((freq_hz - formants) / bandwidths) ** 2)
        return float(g.sum() + 0.03)

    voiced = np.zeros(n)
    max_harmonic = int(min(7500.0, sample_rate / 2 - 500.0) / (f0 * 1.05))
    for h in range(1, max_harmonic + 1):
        amp = formant_gain(h * f0) / h**0.4
        voiced += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    # syllabic gating: smooth positive envelope with clear loud/quiet contrast
    syll = np.abs(np.sin(2 * np.pi * rng.uniform(2.0, 3.5) * t + rng.uniform(0, 2 * np.pi)))
    envelope = 0.1 + 0.9 * syll**0.8

    noise = rng.normal(0.0, 1.0, n)
    kernel = np.hanning(33)
    noise = np.convolve(noise, kernel / kernel.sum(), mode="same")
    noise *= 0.08 / max(np.sqrt(np.mean(noise**2)), 1e-12)

    out = voiced * envelope + noise * (0.2 + 0.8 * envelope)
    out *= 0.9 / np.max(np.abs(out))
    return Waveform(out, sample_rate)


def make_hosts(plan: ExperimentPlan) -> list[LogMelSpectrogram]:
    """Host spectrograms: user-supplied WAVs if a directory is given, else
    seeded synthetic clips."""
    cfg = plan.mel_config
    if plan.wav_dir:
        paths = sorted(Path(plan.wav_dir).glob("*.wav"))
        if not paths:
            raise PlanError(f"wav_dir {plan.wav_dir!r} contains no .wav files")
        hosts = []
        for path in paths:
            w = read_wav(path)
            if w.sample_rate != cfg.sample_rate:
                raise PlanError(
                    f"{path}: sample rate {w.sample_rate} != analysis rate {cfg.sample_rate}"
                )
            hosts.append(mel_spectrogram(w, cfg))
        return hosts
    if plan.synthetic_count < 1:
        raise PlanError("synthetic_count must be >= 1 when no wav_dir is given")
    return [
        mel_spectrogram(
            synth_host(plan.duration_s, cfg.sample_rate, derive_u64(plan.master_seed, "host", i)),
            cfg,
        )
        for i in range(plan.synthetic_count)
    ]


@dataclass
class _EmbeddedTrial:
    key: SecretKey
    payload: Payload
    ref: object
    host: LogMelSpectrogram
    marked: LogMelSpectrogram
    channel_out: Waveform


def _embed_and_synthesize(
    plan: ExperimentPlan,
    hosts: list[LogMelSpectrogram],
    payload_length: int,
    alpha: float,
    trial: int,
) -> _EmbeddedTrial:
    seed = derive_u64(plan.master_seed, "embed", payload_length, alpha, trial)
    rng = np.random.default_rng(seed)
    host = hosts[trial % len(hosts)]
    key = SecretKey(rng.bytes(KEY_BYTES_LEN), key_id=f"trial-{trial}")
    payload = Payload.random(payload_length, rng)
    meta = WatermarkMeta(
        payload_length=payload_length,
        alpha=alpha,
        band=plan.band,
        mel_config=plan.mel_config,
        key_id=key.key_id,
        utterance_id=f"L{payload_length}-a{alpha!r}-t{trial}",
    )
    marked, ref = embed(host, payload, key, meta)
    channel_out = mel_to_waveform(marked, plan.channel_iterations)
    return _EmbeddedTrial(
        key=key, payload=payload, ref=ref, host=host, marked=marked, channel_out=channel_out
    )


def _verify_after_attack(
    plan: ExperimentPlan, emb: _EmbeddedTrial, attacked: Waveform
) -> float:
    X_det = mel_spectrogram(attacked, plan.mel_config)
    aligned = align(X_det, emb.ref.X_ref, max_shift=plan.max_shift)
    res = extract(aligned, emb.ref, emb.key, expected=emb.payload, tau=plan.tau)
    return res.bit_acc


def _resolve_codec_template(spec: atk.AttackSpec) -> str | None:
    template = spec.params.get("template") or os.environ.get(CODEC_TEMPLATE_ENV, "")
    return str(template) if template else None


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def rows_to_csv(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    """Fixed-column CSV text with deterministic formatting."""
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_format_cell(row.get(col)) for col in columns) + "\n")
    return buf.getvalue()


def run_sweep(plan: ExperimentPlan) -> list[dict]:
    """One CSV row per (payload length, alpha, attack) cell.

    Row metrics: mean/std bit accuracy, mean/std Mel-domain embedding SNR
    (clean vs watermarked spectrogram), and mean/std waveform log-spectral
    distance between the synthesized clip and its attacked version. Cells
    whose external codec is unavailable get status ``skipped``; cells that
    raise get status ``error``; neither reports numbers.
    """
    hosts = make_hosts(plan)
    rows = []
    for payload_length in plan.payload_lengths:
        for alpha in plan.alphas:
            embedded = [
                _embed_and_synthesize(plan, hosts, payload_length, alpha, t)
                for t in range(plan.trials_per_cell)
            ]
            for label, spec in plan.attacks:
                row = {
                    "payload_length": payload_length,
                    "alpha": f"{alpha:.6g}",
                    "attack": label,
                    "trials": plan.trials_per_cell,
                    "status": "ok",
                }
                if spec.kind == "external_codec":
                    template = _resolve_codec_template(spec)
                    if template is None or not atk.codec_available(template):
                        row["status"] = "skipped"
                        rows.append(row)
                        log.info("cell %s skipped: codec unavailable", label)
                        continue
                    spec = replace(spec, params={**spec.params, "template": template})
                try:
                    reports = []
                    for t, emb in enumerate(embedded):
                        trial_spec = replace(
                            spec,
                            rng_seed=derive_u64(
                                plan.master_seed, "attack", payload_length, alpha, label, t
                            ),
                        )
                        attacked = atk.apply_attack(emb.channel_out, trial_spec)
                        acc = _verify_after_attack(plan, emb, attacked)
                        reports.append(
                            metrics.QualityReport(
                                snr_db=metrics.snr(emb.host.values.ravel(), emb.marked.values.ravel()),
                                lsd_db=metrics.log_spectral_distance(
                                    emb.channel_out, attacked, plan.mel_config.stft
                                ),
                                bit_acc=acc,
                                attack_label=label,
                            )
                        )
                    summary = metrics.aggregate(reports)[0]
                    row.update(
                        bit_acc_mean=summary.bit_acc_mean,
                        bit_acc_std=summary.bit_acc_std,
                        snr_db_mean=summary.snr_db_mean,
                        snr_db_std=summary.snr_db_std,
                        lsd_db_mean=summary.lsd_db_mean,
                        lsd_db_std=summary.lsd_db_std,
                    )
                except CodecUnavailableError:
                    row["status"] = "skipped"
                except MelmarkError as exc:
                    row["status"] = "error"
                    log.error("cell (%s, %s, %s) failed: %s", payload_length, alpha, label, exc)
                rows.append(row)
    return rows


def run_robustness_matrix(plan: ExperimentPlan) -> list[dict]:
    """Attack-per-row matrix at the plan's first payload length and alpha."""
    restricted = replace(
        plan, payload_lengths=plan.payload_lengths[:1], alphas=plan.alphas[:1]
    )
    return run_sweep(restricted)


@dataclass
class CalibrationResult:
    """Empirical decision-threshold calibration output."""

    payload_length: int
    tau_star: float
    fpr_target: float
    fpr_at_tau_star: float
    fnr_at_tau_star: float
    h1_accs: np.ndarray
    h0_unwatermarked_accs: np.ndarray
    h0_wrong_key_accs: np.ndarray

    @property
    def h0_accs(self) -> np.ndarray:
        return np.concatenate([self.h0_unwatermarked_accs, self.h0_wrong_key_accs])

    def acceptance_rate_h0(self, tau: float) -> float:
        return float(np.mean(self.h0_accs >= tau))

    def histogram_rows(self) -> list[dict]:
        L = self.payload_length
        rows = []
        for k in range(L + 1):
            v = k / L
            rows.append(
                {
                    "bit_acc": v,
                    "h1_count": int(np.sum(np.rint(self.h1_accs * L) == k)),
                    "h0_count": int(np.sum(np.rint(self.h0_accs * L) == k)),
                    "h0_unwatermarked_count": int(
                        np.sum(np.rint(self.h0_unwatermarked_accs * L) == k)
                    ),
                    "h0_wrong_key_count": int(np.sum(np.rint(self.h0_wrong_key_accs * L) == k)),
                }
            )
        return rows

    def histogram_csv(self) -> str:
        return rows_to_csv(self.histogram_rows(), HISTOGRAM_COLUMNS)


def calibrate_threshold(plan: ExperimentPlan) -> CalibrationResult:
    """Empirical H0/H1 bit-accuracy distributions and threshold selection.

    H1 trials embed a fresh key/payload and verify with the correct key
    through the clean synthesis channel. H0 splits between unwatermarked
    audio checked with random keys and watermarked audio checked with wrong
    keys. The returned tau_star is the smallest value on the 1/L grid whose
    empirical false-positive rate is at or below the target.
    """
    if plan.h1_trials < 100 or plan.h0_trials < 100:
        raise PlanError("calibration needs at least 100 trials per hypothesis")
    payload_length = plan.payload_lengths[0]
    alpha = plan.alphas[0]
    hosts = make_hosts(plan)

    n_wrong = plan.h0_trials // 2
    n_unmarked = plan.h0_trials - n_wrong

    h1 = np.empty(plan.h1_trials)
    wrong = np.empty(n_wrong)
    for i in range(plan.h1_trials):
        emb = _embed_and_synthesize(plan, hosts, payload_length, alpha, i)
        X_det = mel_spectrogram(emb.channel_out, plan.mel_config)
        aligned = align(X_det, emb.ref.X_ref, max_shift=plan.max_shift)
        h1[i] = extract(aligned, emb.ref, emb.key, expected=emb.payload, tau=plan.tau).bit_acc
        if i < n_wrong:
            rng = np.random.default_rng(derive_u64(plan.master_seed, "wrongkey", i))
            bad_key = SecretKey(rng.bytes(KEY_BYTES_LEN), key_id=f"wrong-{i}")
            wrong[i] = extract(
                aligned, emb.ref, bad_key, expected=emb.payload, tau=plan.tau
            ).bit_acc
    for i in range(plan.h1_trials, n_wrong):
        # more wrong-key trials requested than H1 trials to reuse; cycle hosts
        emb = _embed_and_synthesize(plan, hosts, payload_length, alpha, i)
        X_det = mel_spectrogram(emb.channel_out, plan.mel_config)
        aligned = align(X_det, emb.ref.X_ref, max_shift=plan.max_shift)
        rng = np.random.default_rng(derive_u64(plan.master_seed, "wrongkey", i))
        bad_key = SecretKey(rng.bytes(KEY_BYTES_LEN), key_id=f"wrong-{i}")
        wrong[i] = extract(aligned, emb.ref, bad_key, expected=emb.payload, tau=plan.tau).bit_acc

    # unwatermarked sub-condition: per-host channel pass reused across trials
    clean_dets: list[LogMelSpectrogram] = []
    for host in hosts:
        out = mel_to_waveform(host, plan.channel_iterations)
        clean_dets.append(mel_spectrogram(out, plan.mel_config))
    unmarked = np.empty(n_unmarked)
    for i in range(n_unmarked):
        host_idx = i % len(hosts)
        host = hosts[host_idx]
        rng = np.random.default_rng(derive_u64(plan.master_seed, "h0clean", i))
        key = SecretKey(rng.bytes(KEY_BYTES_LEN), key_id=f"h0-{i}")
        payload = Payload.random(payload_length, rng)
        meta = WatermarkMeta(
            payload_length=payload_length,
            alpha=alpha,
            band=plan.band,
            mel_config=plan.mel_config,
            key_id=key.key_id,
            utterance_id=f"h0-{host_idx}",
        )
        ref = ReferenceRecord(utterance_id=meta.utterance_id, X_ref=host, meta=meta)
        aligned = align(clean_dets[host_idx], host, max_shift=plan.max_shift)
        unmarked[i] = extract(aligned, ref, key, expected=payload, tau=plan.tau).bit_acc

    h0 = np.concatenate([unmarked, wrong])
    grid = np.arange(payload_length + 1) / payload_length
    tau_star = 1.0
    for tau in grid:
        if float(np.mean(h0 >= tau)) <= plan.fpr_target:
            tau_star = float(tau)
            break
    return CalibrationResult(
        payload_length=payload_length,
        tau_star=tau_star,
        fpr_target=plan.fpr_target,
        fpr_at_tau_star=float(np.mean(h0 >= tau_star)),
        fnr_at_tau_star=float(np.mean(h1 < tau_star)),
        h1_accs=h1,
        h0_unwatermarked_accs=unmarked,
        h0_wrong_key_accs=wrong,
    )

"""Synthetic PSG cohort generator, split assignment, and few-shot sampling.

Every record is a deterministic function of (config, subject index, record
index). Stage structure comes from a Markov hypnogram; each modality carries
stage-, age-, and apnea-dependent structure so that staging, apnea diagnosis,
age estimation, and survival ranking are all statistically learnable:

* BAS channels are band-shaped noise (alpha-dominant Wake, delta-dominant N3,
  mixed theta REM) whose spectral slope drifts with age.
* RESP channels carry a breathing oscillation with airflow dropouts at a rate
  proportional to the subject's ahi, plus SpO2 dips after events.
* EKG is a pulse train at a stage-modulated heart rate.
* EMG is burst noise with atonia (suppression) during REM.
* Survival times are exponential with log-rates linear in
  (age, ahi, fraction of N3 sleep).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from .records import (
    CANONICAL_CHANNELS,
    LabelSet,
    ManifestEntry,
    N_OUTCOMES,
    OUTCOME_IDS,
    PATCH_SAMPLES,
    PATCH_SECONDS,
    PsgRecord,
    RecordManifest,
    SAMPLE_RATE_HZ,
    SEGMENT_SECONDS,
    SPLITS,
    STAGES,
    SurvivalOutcome,
    canonical_layout,
    write_manifest,
    write_record,
)

# Exact fractions of the reference split counts (12952/1500/3015 of 17467),
# so largest-remainder rounding reproduces those counts at n=17467 and stays
# proportional at other cohort sizes.
DEFAULT_SPLIT_RATIOS = (12952 / 17467, 1500 / 17467, 3015 / 17467)

DEFAULT_FEWSHOT_SIZES = (1, 8, 64, 256, 512, 1024)
DEFAULT_FEWSHOT_REPLICATES = 3

# Disjoint RNG stream tags so record content never depends on iteration order.
_STREAM_RECORD = 1
_STREAM_SUBJECT = 2
_STREAM_SPLIT = 3
_STREAM_FEWSHOT = 4

BAND_EDGES_HZ = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "sigma": (12.0, 16.0),
    "beta": (16.0, 30.0),
}

# Amplitude multipliers applied to the 1/f base spectrum per stage.
DEFAULT_STAGE_BAND_GAINS = {
    "Wake": {"alpha": 6.0, "beta": 2.0},
    "N1": {"theta": 3.0},
    "N2": {"theta": 2.5, "sigma": 4.0},
    "N3": {"delta": 8.0},
    "REM": {"theta": 3.5, "beta": 1.5},
}

# Heart-rate multiplier per stage (REM fast and variable, N3 slow and steady).
STAGE_HR_MULT = {"Wake": 1.05, "N1": 1.00, "N2": 0.97, "N3": 0.92, "REM": 1.08}
STAGE_BREATH_MULT = {"Wake": 1.04, "N1": 1.00, "N2": 0.98, "N3": 0.95, "REM": 1.10}

# Markov transition matrix over 5-second patches, rows = from-stage.
BASE_STAGE_TRANSITIONS = np.array(
    [
        [0.970, 0.022, 0.006, 0.001, 0.001],
        [0.020, 0.940, 0.030, 0.004, 0.006],
        [0.004, 0.010, 0.950, 0.022, 0.014],
        [0.001, 0.002, 0.030, 0.960, 0.007],
        [0.006, 0.012, 0.018, 0.001, 0.963],
    ]
)

# Initial-stage prior (typical overnight stage mix) so even short records
# exhibit all stages rather than crawling out of Wake.
INITIAL_STAGE_PROBS = np.array([0.25, 0.15, 0.33, 0.14, 0.13])


@dataclass(frozen=True)
class HazardCoef:
    """Log-linear hazard for one outcome: log rate per day at covariate means
    is -log(mean_days); weights act on standardized (age, ahi, fraction N3)."""

    mean_days: float
    w_age: float
    w_ahi: float
    w_n3: float


DEFAULT_HAZARD_COEFS = {
    "mi": HazardCoef(5200.0, 0.7, 0.7, 0.3),
    "hf": HazardCoef(6400.0, 0.8, 0.6, 0.4),
    "af": HazardCoef(6000.0, 0.8, 0.5, 0.2),
    "ga": HazardCoef(8200.0, 0.9, 0.4, 0.3),
    "an": HazardCoef(7600.0, 0.6, 0.6, 0.2),
    "ht": HazardCoef(4200.0, 0.5, 0.8, 0.3),
    "hpt": HazardCoef(7800.0, 0.5, 0.3, 0.4),
    "phd": HazardCoef(8400.0, 0.4, 0.9, 0.3),
    "ihd": HazardCoef(5600.0, 0.7, 0.7, 0.3),
    "ckd": HazardCoef(6800.0, 0.7, 0.5, 0.4),
    "t2d": HazardCoef(5400.0, 0.5, 0.7, 0.4),
    "dem": HazardCoef(8800.0, 1.1, 0.2, 0.6),
    "death": HazardCoef(6200.0, 1.0, 0.5, 0.5),
}


@dataclass
class SyntheticConfig:
    """Knobs for the generator; defaults give a desk-scale learnable cohort."""

    n_subjects: int
    duration_s: int = 3600
    seed: int = 0
    records_per_subject: int = 1
    stage_band_gains: dict = field(
        default_factory=lambda: {s: dict(g) for s, g in DEFAULT_STAGE_BAND_GAINS.items()}
    )
    age_slope_coupling: float = 0.3
    age_range: tuple[float, float] = (20.0, 90.0)
    ahi_log_mean: float = math.log(12.0)
    ahi_log_std: float = 0.9
    apnea_rate_scale: float = 1.0
    apnea_event_duration_s: tuple[float, float] = (15.0, 30.0)
    heart_rate_bpm: tuple[float, float] = (55.0, 80.0)
    emg_burst_rate_per_hour: float = 20.0
    hazard_coefs: dict = field(default_factory=lambda: dict(DEFAULT_HAZARD_COEFS))
    censor_horizon_days: float = 3650.0

    def validate(self) -> None:
        if self.n_subjects <= 0:
            raise ValueError("n_subjects: must be a positive integer")
        if self.duration_s <= 0 or self.duration_s % SEGMENT_SECONDS != 0:
            raise ValueError(
                f"duration_s: must be a positive multiple of {SEGMENT_SECONDS}"
            )
        if self.records_per_subject <= 0:
            raise ValueError("records_per_subject: must be a positive integer")
        for stage, gains in self.stage_band_gains.items():
            if stage not in STAGES:
                raise ValueError(f"stage_band_gains: unknown stage {stage!r}")
            for band, gain in gains.items():
                if band not in BAND_EDGES_HZ:
                    raise ValueError(f"stage_band_gains: unknown band {band!r}")
                if gain < 0:
                    raise ValueError(f"stage_band_gains[{stage}][{band}]: negative gain")
        if self.apnea_rate_scale < 0:
            raise ValueError("apnea_rate_scale: must be nonnegative")
        if self.emg_burst_rate_per_hour < 0:
            raise ValueError("emg_burst_rate_per_hour: must be nonnegative")
        lo, hi = self.apnea_event_duration_s
        if not 0 < lo <= hi:
            raise ValueError("apnea_event_duration_s: need 0 < low <= high")
        lo, hi = self.heart_rate_bpm
        if not 0 < lo <= hi:
            raise ValueError("heart_rate_bpm: need 0 < low <= high")
        lo, hi = self.age_range
        if not 0 <= lo <= hi <= 100:
            raise ValueError("age_range: need 0 <= low <= high <= 100")
        if set(self.hazard_coefs) != set(OUTCOME_IDS):
            raise ValueError("hazard_coefs: must cover exactly the 13 outcome ids")
        for oid, c in self.hazard_coefs.items():
            if c.mean_days <= 0:
                raise ValueError(f"hazard_coefs[{oid}]: mean_days must be positive")
        if self.censor_horizon_days <= 0:
            raise ValueError("censor_horizon_days: must be positive")

    @property
    def n_patches(self) -> int:
        return self.duration_s // PATCH_SECONDS


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    age_years: float
    ahi: float
    heart_rate_bpm: float
    breath_hz: float
    n3_bias: float


def _record_rng(cfg: SyntheticConfig, subject_idx: int, record_idx: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(_STREAM_RECORD, subject_idx, record_idx))
    )


def _subject_profile(cfg: SyntheticConfig, subject_idx: int) -> SubjectProfile:
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(_STREAM_SUBJECT, subject_idx))
    )
    age = rng.uniform(*cfg.age_range)
    ahi = cfg.apnea_rate_scale * float(
        np.clip(rng.lognormal(cfg.ahi_log_mean, cfg.ahi_log_std), 0.0, 120.0)
    )
    hr = rng.uniform(*cfg.heart_rate_bpm)
    breath = rng.uniform(0.20, 0.30)
    # Older subjects accumulate less deep sleep.
    n3_bias = float(np.exp(0.4 * rng.standard_normal() - 0.8 * (age - 50.0) / 40.0))
    return SubjectProfile(
        subject_id=f"S{subject_idx:05d}",
        age_years=float(age),
        ahi=ahi,
        heart_rate_bpm=float(hr),
        breath_hz=float(breath),
        n3_bias=n3_bias,
    )


def _subject_transitions(profile: SubjectProfile) -> np.ndarray:
    mat = BASE_STAGE_TRANSITIONS.copy()
    mat[:, 3] *= profile.n3_bias
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def _sample_hypnogram(n_patches: int, transitions: np.ndarray, rng) -> np.ndarray:
    stages = np.empty(n_patches, dtype=np.uint8)
    cumulative = np.cumsum(transitions, axis=1)
    state = int(rng.choice(len(STAGES), p=INITIAL_STAGE_PROBS))
    draws = rng.random(n_patches)
    for t in range(n_patches):
        stages[t] = state
        state = int(np.searchsorted(cumulative[state], draws[t], side="right"))
        state = min(state, 4)
    return stages


def _band_mask(freqs: np.ndarray, band: str) -> np.ndarray:
    lo, hi = BAND_EDGES_HZ[band]
    return (freqs >= lo) & (freqs < hi)


# Per-channel amplitude tweaks on top of the stage profile: occipital channels
# lean alpha, eye channels pick up slow movements in REM, frontal leans delta.
_BAS_CHANNEL_TWEAKS = {
    2: ("alpha", 1.5, None),
    3: ("alpha", 1.5, None),
    4: ("delta", 2.0, "REM"),
    5: ("delta", 2.0, "REM"),
    6: ("delta", 1.2, None),
    7: ("delta", 1.2, None),
}


def _gen_bas(cfg, profile, hypnogram, rng) -> np.ndarray:
    """Band-shaped noise per patch, synthesized in the frequency domain."""
    n_patches = len(hypnogram)
    n_bins = PATCH_SAMPLES // 2 + 1
    freqs = np.fft.rfftfreq(PATCH_SAMPLES, d=1.0 / SAMPLE_RATE_HZ)

    slope = 0.8 + cfg.age_slope_coupling * (profile.age_years - 50.0) / 50.0
    base = (freqs + 1.0) ** (-slope)
    base[0] = 0.0  # no DC offset

    # Stage-specific amplitude profiles, shared across channels.
    stage_amp = np.tile(base, (len(STAGES), 1))
    for s_idx, stage in enumerate(STAGES):
        for band, gain in cfg.stage_band_gains.get(stage, {}).items():
            stage_amp[s_idx, _band_mask(freqs, band)] *= gain

    # Normalize so a gain-free patch has unit RMS; stage gains then set the
    # relative band contrast on an O(1) signal.
    ref_power = (2.0 * np.sum(base[1:-1] ** 2) + base[0] ** 2 + base[-1] ** 2) / PATCH_SAMPLES**2
    scale = 1.0 / math.sqrt(ref_power)

    out = np.empty((8, n_patches * PATCH_SAMPLES), dtype=np.float64)
    for ch in range(8):
        amp = stage_amp[hypnogram]  # [n_patches, n_bins]
        tweak = _BAS_CHANNEL_TWEAKS.get(ch)
        if tweak is not None:
            band, gain, only_stage = tweak
            mask = _band_mask(freqs, band)
            if only_stage is None:
                amp = amp.copy()
                amp[:, mask] *= gain
            else:
                amp = amp.copy()
                in_stage = hypnogram == STAGES.index(only_stage)
                amp[np.ix_(in_stage, mask)] *= gain
        z = rng.standard_normal((n_patches, n_bins)) + 1j * rng.standard_normal(
            (n_patches, n_bins)
        )
        spectrum = amp * z * (scale / math.sqrt(2.0))
        out[ch] = np.fft.irfft(spectrum, n=PATCH_SAMPLES, axis=1).ravel()
    return out


def _apnea_events(cfg, profile, rng) -> list[tuple[float, float]]:
    hours = cfg.duration_s / 3600.0
    n_events = rng.poisson(profile.ahi * hours)
    lo, hi = cfg.apnea_event_duration_s
    events = []
    for _ in range(n_events):
        dur = rng.uniform(lo, hi)
        start = rng.uniform(0.0, max(cfg.duration_s - hi, 1.0))
        events.append((start, dur))
    return sorted(events)


def _gen_resp(cfg, profile, hypnogram, events, rng) -> np.ndarray:
    n = cfg.duration_s * SAMPLE_RATE_HZ
    stage_mult = np.array([STAGE_BREATH_MULT[s] for s in STAGES])
    breath_hz = profile.breath_hz * np.repeat(stage_mult[hypnogram], PATCH_SAMPLES)
    # Slow wander keeps breathing quasi-periodic rather than metronomic.
    t = np.arange(n) / SAMPLE_RATE_HZ
    wander = 1.0 + 0.05 * np.sin(2 * np.pi * t / 97.0 + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(breath_hz * wander) / SAMPLE_RATE_HZ

    airflow_env = np.ones(n)
    effort_env = np.ones(n)
    spo2 = np.full(n, 0.96)
    for start, dur in events:
        i0 = int(start * SAMPLE_RATE_HZ)
        i1 = min(int((start + dur) * SAMPLE_RATE_HZ), n)
        airflow_env[i0:i1] = 0.05
        effort_env[i0:i1] = 0.6
        # Desaturation lags the obstruction and recovers over ~20 s.
        d0 = min(int((start + 10.0) * SAMPLE_RATE_HZ), n)
        d1 = min(int((start + dur + 25.0) * SAMPLE_RATE_HZ), n)
        if d1 > d0:
            depth = rng.uniform(0.05, 0.15)
            dip = depth * np.sin(np.linspace(0.0, np.pi, d1 - d0))
            spo2[d0:d1] -= dip

    noise = 0.03 * rng.standard_normal((5, n))
    chest = effort_env * np.sin(phase) + noise[0]
    spo2_sig = spo2 + 0.005 * rng.standard_normal(n)
    abd = 0.9 * effort_env * np.sin(phase - 0.3) + noise[2]
    nasal = airflow_env * np.sin(phase + 0.1) + noise[3]
    oral = 0.8 * airflow_env * np.sin(phase + 0.15) + noise[4]
    return np.stack([chest, spo2_sig, abd, nasal, oral])


def _gen_ekg(cfg, profile, hypnogram, rng) -> np.ndarray:
    n = cfg.duration_s * SAMPLE_RATE_HZ
    stage_mult = np.array([STAGE_HR_MULT[s] for s in STAGES])
    hr_per_patch = profile.heart_rate_bpm * stage_mult[hypnogram]

    sig = 0.05 * rng.standard_normal(n)
    pulse_half = int(0.1 * SAMPLE_RATE_HZ)
    kernel = 3.0 * np.exp(-0.5 * (np.arange(-pulse_half, pulse_half + 1) / (0.025 * SAMPLE_RATE_HZ)) ** 2)
    t_beat = rng.uniform(0.0, 1.0)
    while t_beat < cfg.duration_s:
        patch = min(int(t_beat / PATCH_SECONDS), len(hypnogram) - 1)
        center = int(t_beat * SAMPLE_RATE_HZ)
        i0, i1 = center - pulse_half, center + pulse_half + 1
        k0, k1 = max(0, -i0), len(kernel) - max(0, i1 - n)
        if k1 > k0:
            sig[max(i0, 0):min(i1, n)] += kernel[k0:k1]
        rr = 60.0 / hr_per_patch[patch]
        t_beat += rr * (1.0 + 0.02 * rng.standard_normal())
    return sig[None, :]


def _gen_emg(cfg, profile, hypnogram, rng) -> np.ndarray:
    n = cfg.duration_s * SAMPLE_RATE_HZ
    rem_mask = np.repeat(hypnogram == STAGES.index("REM"), PATCH_SAMPLES)
    out = np.empty((2, n))
    for ch, base_std in enumerate((0.25, 0.20)):
        tone = np.where(rem_mask, 0.25 * base_std, base_std)  # REM atonia
        sig = tone * rng.standard_normal(n)
        hours = cfg.duration_s / 3600.0
        n_bursts = rng.poisson(cfg.emg_burst_rate_per_hour * hours)
        for _ in range(n_bursts):
            start = rng.uniform(0.0, cfg.duration_s - 3.0)
            i0 = int(start * SAMPLE_RATE_HZ)
            patch = min(i0 // PATCH_SAMPLES, len(hypnogram) - 1)
            if hypnogram[patch] == STAGES.index("REM") and rng.random() < 0.9:
                continue  # movements largely suppressed in REM
            dur = rng.uniform(0.5, 3.0)
            i1 = min(i0 + int(dur * SAMPLE_RATE_HZ), n)
            sig[i0:i1] += rng.uniform(5.0, 10.0) * base_std * rng.standard_normal(i1 - i0)
        out[ch] = sig
    return out


def _gen_survival(cfg, profile, frac_n3, rng) -> list[SurvivalOutcome]:
    outcomes = []
    z_age = (profile.age_years - 50.0) / 20.0
    z_ahi = (profile.ahi - 15.0) / 15.0
    z_n3 = (0.15 - frac_n3) / 0.10  # less deep sleep raises risk
    for oid in OUTCOME_IDS:
        c = cfg.hazard_coefs[oid]
        log_rate = -math.log(c.mean_days) + c.w_age * z_age + c.w_ahi * z_ahi + c.w_n3 * z_n3
        event_time = rng.exponential(math.exp(-log_rate))
        censor_time = rng.uniform(0.3, 1.0) * cfg.censor_horizon_days
        event = int(event_time <= censor_time)
        time_days = max(min(event_time, censor_time), 1e-3)
        outcomes.append(SurvivalOutcome(outcome_id=oid, event=event, time_days=time_days))
    return outcomes


def generate_record(cfg: SyntheticConfig, subject_idx: int, record_idx: int) -> PsgRecord:
    """Deterministically synthesize one record for (subject, record) indices."""
    profile = _subject_profile(cfg, subject_idx)
    rng = _record_rng(cfg, subject_idx, record_idx)

    hypnogram = _sample_hypnogram(cfg.n_patches, _subject_transitions(profile), rng)
    events = _apnea_events(cfg, profile, rng)

    bas = _gen_bas(cfg, profile, hypnogram, rng)
    resp = _gen_resp(cfg, profile, hypnogram, events, rng)
    ekg = _gen_ekg(cfg, profile, hypnogram, rng)
    emg = _gen_emg(cfg, profile, hypnogram, rng)
    signal = np.concatenate([bas, resp, ekg, emg], axis=0).astype(np.float32)

    labels = LabelSet(
        hypnogram=hypnogram,
        ahi=profile.ahi,
        age_years=profile.age_years,
        survival=_gen_survival(cfg, profile, float(np.mean(hypnogram == 3)), rng),
    )
    return PsgRecord(
        record_id=f"{profile.subject_id}-R{record_idx:02d}",
        subject_id=profile.subject_id,
        signal=signal,
        layout=canonical_layout(),
        labels=labels,
    )


def generate_synthetic_cohort(
    cfg: SyntheticConfig,
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
) -> tuple[RecordManifest, Iterator[PsgRecord]]:
    """Build the manifest (with splits assigned) and a lazy record iterator.

    Records are yielded one at a time; a full desk cohort does not fit in
    memory at once.
    """
    cfg.validate()
    from .records import signal_filename

    entries = []
    index_pairs = []
    for si in range(cfg.n_subjects):
        subject_id = f"S{si:05d}"
        for ri in range(cfg.records_per_subject):
            rid = f"{subject_id}-R{ri:02d}"
            entries.append(ManifestEntry(rid, subject_id, signal_filename(rid), "unassigned"))
            index_pairs.append((si, ri))
    manifest = RecordManifest(entries=entries, seed=cfg.seed)
    manifest = assign_splits(manifest, ratios=ratios, seed=cfg.seed)

    def _iter():
        for si, ri in index_pairs:
            yield generate_record(cfg, si, ri)

    return manifest, _iter()


def assign_splits(
    manifest: RecordManifest,
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
    seed: int = 0,
) -> RecordManifest:
    """Random subject-level partition into train/validation/test.

    Ratios are normalized, converted to record quotas by largest-remainder
    rounding, and shuffled subjects are assigned greedily to the split with
    the largest remaining deficit. All records of a subject share one split.
    """
    if len(ratios) != len(SPLITS):
        raise ValueError(f"need {len(SPLITS)} ratios")
    total = float(sum(ratios))
    if any(r <= 0 for r in ratios) or abs(total - 1.0) > 0.01:
        raise ValueError("ratios must be positive and sum to 1")
    norm = [r / total for r in ratios]

    subjects = sorted({e.subject_id for e in manifest.entries})
    if len(subjects) < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} subjects, got {len(subjects)}")
    records_per_subject = {s: 0 for s in subjects}
    for e in manifest.entries:
        records_per_subject[e.subject_id] += 1
    n_records = len(manifest.entries)

    # Largest-remainder record quotas.
    quota_f = [n_records * r for r in norm]
    quotas = [int(math.floor(q)) for q in quota_f]
    short = n_records - sum(quotas)
    order = sorted(range(len(SPLITS)), key=lambda i: (quota_f[i] - quotas[i], -i), reverse=True)
    for i in order[:short]:
        quotas[i] += 1

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAM_SPLIT,)))
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]

    assigned = {s: 0 for s in range(len(SPLITS))}
    subject_split: dict[str, str] = {}
    for subj in shuffled:
        deficits = [quotas[i] - assigned[i] for i in range(len(SPLITS))]
        target = max(range(len(SPLITS)), key=lambda i: (deficits[i], -i))
        subject_split[subj] = SPLITS[target]
        assigned[target] += records_per_subject[subj]

    new_entries = [
        ManifestEntry(e.record_id, e.subject_id, e.path, subject_split[e.subject_id])
        for e in manifest.entries
    ]
    return RecordManifest(entries=new_entries, seed=manifest.seed)


@dataclass(frozen=True)
class FewshotSubset:
    size: int
    replicate: int
    subject_ids: tuple[str, ...]


def sample_fewshot_subsets(
    manifest: RecordManifest,
    sizes: tuple[int, ...] = DEFAULT_FEWSHOT_SIZES,
    replicates: int = DEFAULT_FEWSHOT_REPLICATES,
    seed: int = 0,
    split: str = "train",
) -> list[FewshotSubset]:
    """Uniform subject samples without replacement, one RNG stream per
    (size, replicate) so subsets are reproducible set-for-set."""
    subjects = manifest.subjects(split)
    out = []
    for size_idx, size in enumerate(sizes):
        if size > len(subjects):
            raise ValueError(
                f"requested {size} subjects but the {split} split has {len(subjects)}"
            )
        for rep in range(replicates):
            rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(_STREAM_FEWSHOT, size_idx, rep))
            )
            chosen = rng.choice(len(subjects), size=size, replace=False)
            out.append(
                FewshotSubset(
                    size=size,
                    replicate=rep,
                    subject_ids=tuple(sorted(subjects[i] for i in chosen)),
                )
            )
    return out


def write_cohort(
    cfg: SyntheticConfig,
    out_dir: Path,
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
) -> RecordManifest:
    """Generate a cohort and write records, manifest, and cohort metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, record_iter = generate_synthetic_cohort(cfg, ratios=ratios)
    for record in record_iter:
        write_record(record, out_dir)
    write_manifest(manifest, out_dir)
    meta = {
        "seed": cfg.seed,
        "n_subjects": cfg.n_subjects,
        "duration_s": cfg.duration_s,
        "records_per_subject": cfg.records_per_subject,
        "split_sizes": manifest.split_sizes(),
        "config": _config_echo(cfg),
    }
    with open(out_dir / "cohort.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def _config_echo(cfg: SyntheticConfig) -> dict:
    d = asdict(cfg)
    d["hazard_coefs"] = {k: asdict(v) for k, v in cfg.hazard_coefs.items()}
    return d

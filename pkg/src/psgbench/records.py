"""Record containers, channel layout, labels, manifests, and on-disk formats.

A cohort on disk is a directory of per-record raw signal files
(channel-major little-endian float32), one JSON sidecar per record with
channel metadata and labels, a ``manifest.jsonl`` with one entry per
record, and a ``cohort.json`` with the generation seed and config echo.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE_HZ = 128
PATCH_SECONDS = 5
PATCH_SAMPLES = PATCH_SECONDS * SAMPLE_RATE_HZ  # 640
SEGMENT_PATCHES = 60
SEGMENT_SECONDS = PATCH_SECONDS * SEGMENT_PATCHES  # 300

MODALITIES = ("BAS", "RESP", "EKG", "EMG")

STAGES = ("Wake", "N1", "N2", "N3", "REM")
STAGE_CODES = {name: code for code, name in enumerate(STAGES)}

APNEA_AHI_THRESHOLD = 15.0

# 12 disease outcomes plus all-cause death, fixed ordering (death last).
OUTCOME_IDS = (
    "mi", "hf", "af", "ga", "an", "ht", "hpt", "phd",
    "ihd", "ckd", "t2d", "dem", "death",
)
N_OUTCOMES = len(OUTCOME_IDS)

# (name, modality) pairs in canonical order: 8 BAS, 5 RESP, 1 EKG, 2 EMG.
CANONICAL_CHANNELS = (
    ("C3-M2", "BAS"),
    ("C4-M1", "BAS"),
    ("O1-M2", "BAS"),
    ("O2-M1", "BAS"),
    ("E1-M2", "BAS"),
    ("E2-M1", "BAS"),
    ("FP1-M2", "BAS"),
    ("FP2-M1", "BAS"),
    ("CHEST", "RESP"),
    ("SPO2", "RESP"),
    ("ABD", "RESP"),
    ("NASAL", "RESP"),
    ("ORAL", "RESP"),
    ("EKG_L-EKG_R", "EKG"),
    ("CHIN", "EMG"),
    ("LEG", "EMG"),
)

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class ChannelLayout:
    """Ordered channel list shared by every record in a cohort."""

    channels: tuple[tuple[str, str], ...]
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self):
        names = [name for name, _ in self.channels]
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        for name, modality in self.channels:
            if modality not in MODALITIES:
                raise ValueError(f"unknown modality {modality!r} for channel {name!r}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.channels]

    @property
    def modalities(self) -> list[str]:
        return [modality for _, modality in self.channels]

    def channel_index(self, name: str) -> int:
        return self.names.index(name)

    def modality_indices(self, modality: str) -> list[int]:
        return [i for i, (_, m) in enumerate(self.channels) if m == modality]

    def modality_counts(self) -> tuple[int, ...]:
        return tuple(len(self.modality_indices(m)) for m in MODALITIES)


def canonical_layout() -> ChannelLayout:
    """The fixed 16-channel layout (8 BAS, 5 RESP, 1 EKG, 2 EMG) at 128 Hz."""
    return ChannelLayout(channels=CANONICAL_CHANNELS)


@dataclass(frozen=True)
class SurvivalOutcome:
    """Event indicator and follow-up time (days) for one clinical outcome.

    ``event`` is 1 when the outcome occurred at ``time_days``; 0 means the
    subject was censored at ``time_days`` without the event.
    """

    outcome_id: str
    event: int
    time_days: float

    def __post_init__(self):
        if self.outcome_id not in OUTCOME_IDS:
            raise ValueError(f"unknown outcome_id {self.outcome_id!r}")
        if self.event not in (0, 1):
            raise ValueError("event must be 0 or 1")
        if not (self.time_days > 0 and math.isfinite(self.time_days)):
            raise ValueError("time_days must be a positive finite number")


@dataclass
class LabelSet:
    """Per-record labels: hypnogram, apnea index, age, and 13 survival outcomes."""

    hypnogram: np.ndarray  # uint8 stage codes, one per 5-second patch
    ahi: float
    age_years: float
    survival: list[SurvivalOutcome]

    def __post_init__(self):
        self.hypnogram = np.asarray(self.hypnogram, dtype=np.uint8)
        if self.ahi < 0:
            raise ValueError("ahi must be nonnegative")
        if not 0.0 <= self.age_years <= 100.0:
            raise ValueError("age_years must lie in [0, 100]")
        if len(self.survival) != N_OUTCOMES:
            raise ValueError(f"survival must list exactly {N_OUTCOMES} outcomes")
        ids = tuple(o.outcome_id for o in self.survival)
        if ids != OUTCOME_IDS:
            raise ValueError("survival outcomes must follow the canonical ordering")

    @property
    def apnea(self) -> int:
        return int(self.ahi >= APNEA_AHI_THRESHOLD)


@dataclass
class PsgRecord:
    """One multichannel recording with its layout and labels.

    ``signal`` is channel-major float32 ``[n_channels, n_samples]`` in
    arbitrary units at the layout's sample rate.
    """

    record_id: str
    subject_id: str
    signal: np.ndarray
    layout: ChannelLayout
    labels: LabelSet

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.layout.sample_rate_hz

    @property
    def n_patches(self) -> int:
        return self.n_samples // PATCH_SAMPLES


@dataclass(frozen=True)
class ManifestEntry:
    record_id: str
    subject_id: str
    path: str  # signal file path relative to the cohort root
    split: str

    def __post_init__(self):
        if self.split not in SPLITS and self.split != "unassigned":
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class RecordManifest:
    """Cohort index: one entry per record plus the generation seed."""

    entries: list[ManifestEntry]
    seed: int = 0

    def __post_init__(self):
        ids = [e.record_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("record_id values must be unique in a manifest")

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def subjects(self, split: str | None = None) -> list[str]:
        """Unique subject ids (sorted), optionally restricted to one split."""
        entries = self.entries if split is None else self.by_split(split)
        return sorted({e.subject_id for e in entries})

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.by_split(s)) for s in SPLITS}


@dataclass
class ValidationReport:
    record_id: str
    findings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings


def validate_record(record: PsgRecord, layout: ChannelLayout) -> ValidationReport:
    """Check a record against a layout; findings are reported, never raised."""
    report = ValidationReport(record_id=record.record_id)
    f = report.findings

    if record.layout.n_channels != layout.n_channels:
        f.append(
            f"channel count {record.layout.n_channels} != expected {layout.n_channels}"
        )
    else:
        for i, (got, want) in enumerate(zip(record.layout.channels, layout.channels)):
            if got != want:
                f.append(f"channel {i}: {got} != expected {want}")
    if record.layout.sample_rate_hz != layout.sample_rate_hz:
        f.append(
            f"sample rate {record.layout.sample_rate_hz} != expected {layout.sample_rate_hz}"
        )
    if record.signal.ndim != 2:
        f.append(f"signal must be 2-D, got ndim={record.signal.ndim}")
    elif record.signal.shape[0] != record.layout.n_channels:
        f.append(
            f"signal rows {record.signal.shape[0]} != layout channels {record.layout.n_channels}"
        )
    if not np.isfinite(record.signal).all():
        f.append("signal contains non-finite samples")

    expected_patches = record.n_samples // PATCH_SAMPLES if record.signal.ndim == 2 else 0
    if record.signal.ndim == 2 and len(record.labels.hypnogram) != expected_patches:
        f.append(
            f"hypnogram length {len(record.labels.hypnogram)} != "
            f"expected {expected_patches} patches"
        )
    if record.signal.ndim == 2 and record.n_samples % PATCH_SAMPLES != 0:
        f.append(f"n_samples {record.n_samples} not a multiple of {PATCH_SAMPLES}")
    return report


# --- on-disk formats ---------------------------------------------------------

def signal_filename(record_id: str) -> str:
    return f"{record_id}.dat"


def sidecar_filename(record_id: str) -> str:
    return f"{record_id}.json"


def write_record(record: PsgRecord, root: Path) -> Path:
    """Write the raw signal file and JSON sidecar; returns the signal path."""
    root = Path(root)
    sig_path = root / signal_filename(record.record_id)
    data = np.ascontiguousarray(record.signal, dtype="<f4")
    data.tofile(sig_path)

    sidecar = {
        "record_id": record.record_id,
        "subject_id": record.subject_id,
        "channels": [list(c) for c in record.layout.channels],
        "sample_rate_hz": record.layout.sample_rate_hz,
        "n_samples": int(record.n_samples),
        "labels": {
            "hypnogram": [int(s) for s in record.labels.hypnogram],
            "ahi": float(record.labels.ahi),
            "age_years": float(record.labels.age_years),
            "survival": [
                {
                    "outcome_id": o.outcome_id,
                    "event": int(o.event),
                    "time_days": float(o.time_days),
                }
                for o in record.labels.survival
            ],
        },
    }
    with open(root / sidecar_filename(record.record_id), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return sig_path


def read_sidecar(root: Path, record_id: str) -> dict:
    with open(Path(root) / sidecar_filename(record_id)) as fh:
        return json.load(fh)


def labels_from_sidecar(sidecar: dict) -> LabelSet:
    lab = sidecar["labels"]
    return LabelSet(
        hypnogram=np.asarray(lab["hypnogram"], dtype=np.uint8),
        ahi=float(lab["ahi"]),
        age_years=float(lab["age_years"]),
        survival=[
            SurvivalOutcome(o["outcome_id"], int(o["event"]), float(o["time_days"]))
            for o in lab["survival"]
        ],
    )


def read_record(root: Path, entry: ManifestEntry) -> PsgRecord:
    root = Path(root)
    sidecar = read_sidecar(root, entry.record_id)
    layout = ChannelLayout(
        channels=tuple(tuple(c) for c in sidecar["channels"]),
        sample_rate_hz=sidecar["sample_rate_hz"],
    )
    n = int(sidecar["n_samples"])
    raw = np.fromfile(root / entry.path, dtype="<f4")
    if raw.size != layout.n_channels * n:
        raise ValueError(
            f"{entry.path}: expected {layout.n_channels * n} samples, got {raw.size}"
        )
    return PsgRecord(
        record_id=entry.record_id,
        subject_id=entry.subject_id,
        signal=raw.reshape(layout.n_channels, n),
        layout=layout,
        labels=labels_from_sidecar(sidecar),
    )


def open_signal_memmap(root: Path, entry: ManifestEntry, n_channels: int = 16) -> np.memmap:
    """Memory-map a signal file as [n_channels, n_samples] without copying."""
    mm = np.memmap(Path(root) / entry.path, dtype="<f4", mode="r")
    if mm.size % n_channels != 0:
        raise ValueError(f"{entry.path}: size {mm.size} not divisible by {n_channels}")
    return mm.reshape(n_channels, mm.size // n_channels)


def write_manifest(manifest: RecordManifest, root: Path) -> Path:
    path = Path(root) / "manifest.jsonl"
    with open(path, "w") as fh:
        for e in manifest.entries:
            fh.write(
                json.dumps(
                    {
                        "record_id": e.record_id,
                        "subject_id": e.subject_id,
                        "path": e.path,
                        "split": e.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def read_manifest(root: Path) -> RecordManifest:
    root = Path(root)
    entries = []
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            entries.append(
                ManifestEntry(d["record_id"], d["subject_id"], d["path"], d["split"])
            )
    seed = 0
    cohort_meta = root / "cohort.json"
    if cohort_meta.exists():
        with open(cohort_meta) as fh:
            seed = json.load(fh).get("seed", 0)
    return RecordManifest(entries=entries, seed=seed)

"""Zero-phase filtering, rational resampling, and segmentation into
300-second windows of 5-second patches."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .records import (
    PATCH_SAMPLES,
    PsgRecord,
    SAMPLE_RATE_HZ,
    SEGMENT_PATCHES,
    SEGMENT_SECONDS,
)

DEFAULT_FILTER_ORDER = 8
# Anti-alias cutoff sits at 0.9x the target Nyquist to leave a transition band.
ANTIALIAS_NYQUIST_FRACTION = 0.9

FINETUNE_MAX_PATCHES = 5760  # 8 hours of 5-second patches


@dataclass(frozen=True)
class FilterSpec:
    """Digital low-pass Butterworth filter (transfer-function coefficients)."""

    order: int
    cutoff_hz: float
    sample_rate_hz: float
    b: np.ndarray
    a: np.ndarray

    def validate(self) -> None:
        roots = np.roots(self.a)
        if roots.size and np.max(np.abs(roots)) >= 1.0:
            raise ValueError("unstable filter: pole on or outside the unit circle")
        dc_gain = np.sum(self.b) / np.sum(self.a)
        if abs(dc_gain - 1.0) > 1e-9:
            raise ValueError(f"DC gain {dc_gain} deviates from 1 by more than 1e-9")

    def gain_at(self, freq_hz: float) -> float:
        """Single-pass magnitude response at one frequency."""
        w = 2 * np.pi * freq_hz / self.sample_rate_hz
        _, h = sps.freqz(self.b, self.a, worN=[w])
        return float(np.abs(h[0]))


def design_lowpass(
    cutoff_hz: float,
    order: int = DEFAULT_FILTER_ORDER,
    sample_rate_hz: float = SAMPLE_RATE_HZ,
) -> FilterSpec:
    """Butterworth low-pass with -3 dB point at ``cutoff_hz``."""
    if order <= 0:
        raise ValueError("order must be positive")
    nyquist = sample_rate_hz / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise ValueError(
            f"cutoff {cutoff_hz} Hz must lie strictly between 0 and the "
            f"Nyquist frequency {nyquist} Hz"
        )
    b, a = sps.butter(order, cutoff_hz, btype="low", fs=sample_rate_hz)
    b = np.asarray(b) * (np.sum(a) / np.sum(b))  # pin DC gain exactly
    spec = FilterSpec(
        order=order, cutoff_hz=cutoff_hz, sample_rate_hz=sample_rate_hz,
        b=b, a=np.asarray(a),
    )
    spec.validate()
    return spec


def filtfilt(x: np.ndarray, spec: FilterSpec, axis: int = -1) -> np.ndarray:
    """Forward-backward filtering: zero phase, squared magnitude response.

    Edges are handled by odd reflection padding of length 3x the filter order,
    so the input must be longer than that along ``axis``.
    """
    x = np.asarray(x)
    padlen = 3 * spec.order
    if x.shape[axis] <= padlen:
        raise ValueError(
            f"signal length {x.shape[axis]} must exceed 3x filter order ({padlen})"
        )
    return sps.filtfilt(spec.b, spec.a, x, axis=axis, padtype="odd", padlen=padlen)


def _as_fraction(rate: float) -> Fraction:
    return Fraction(rate).limit_denominator(1_000_000)


def resample(x: np.ndarray, from_hz: float, to_hz: float, axis: int = -1) -> np.ndarray:
    """Rational-factor polyphase resampling with zero-phase anti-aliasing.

    When downsampling, a zero-phase Butterworth low-pass at 0.9x the output
    Nyquist is applied before the rate change. Output length along ``axis``
    is round(n * to_hz / from_hz); equal rates return the input unchanged.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sample rates must be positive")
    x = np.asarray(x)
    f_from, f_to = _as_fraction(from_hz), _as_fraction(to_hz)
    if f_from == f_to:
        return x.copy()

    if to_hz < from_hz:
        cutoff = ANTIALIAS_NYQUIST_FRACTION * to_hz / 2.0
        x = filtfilt(x, design_lowpass(cutoff, sample_rate_hz=from_hz), axis=axis)

    ratio = f_to / f_from
    up, down = ratio.numerator, ratio.denominator
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]

    # Long kaiser kernel: flat passband (droop ~1e-5) and ~90 dB stopband.
    max_rate = max(up, down)
    half_len = 32 * max_rate
    kernel = sps.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", 8.6))

    # Odd-reflection padding keeps the FIR transients out of the output; the
    # pad covers the kernel half-length and divides `down` so the padded
    # output offset is exact.
    pad = half_len // up + 8
    pad = min(pad, n - 1)
    pad -= pad % down
    if pad > 0:
        left = 2.0 * x[..., :1] - x[..., pad:0:-1]
        right = 2.0 * x[..., -1:] - x[..., -2 : -pad - 2 : -1]
        padded = np.concatenate([left, x, right], axis=-1)
    else:
        padded = x
    y = sps.resample_poly(padded, up, down, axis=-1, window=kernel)

    n_out = int(math.floor(n * float(ratio) + 0.5))
    offset = pad * up // down
    y = y[..., offset : offset + n_out]
    return np.moveaxis(y, -1, axis)


@dataclass
class SegmentBatch:
    """Tensorized non-overlapping segments: [batch, channels, 60, 640]."""

    data: np.ndarray
    record_ids: list[str]
    start_offsets_s: list[float]

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[2:] != (SEGMENT_PATCHES, PATCH_SAMPLES):
            raise ValueError(
                f"data must be [batch, channels, {SEGMENT_PATCHES}, {PATCH_SAMPLES}]"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("segment data contains non-finite values")

    @property
    def n_segments(self) -> int:
        return self.data.shape[0]


def segment_signal(signal: np.ndarray, record_id: str, sample_rate_hz: float = SAMPLE_RATE_HZ) -> SegmentBatch:
    """Cut [channels, n] into whole 300-second segments from the start.

    A trailing remainder shorter than one segment is dropped; a signal
    shorter than one segment yields an empty batch with a warning.
    """
    seg_samples = int(SEGMENT_SECONDS * sample_rate_hz)
    n_channels, n = signal.shape
    n_seg = n // seg_samples
    if n_seg == 0:
        warnings.warn(
            f"record {record_id}: {n / sample_rate_hz:.0f} s is shorter than one "
            f"{SEGMENT_SECONDS} s segment; emitting an empty batch",
            stacklevel=2,
        )
        data = np.empty((0, n_channels, SEGMENT_PATCHES, PATCH_SAMPLES), dtype=signal.dtype)
        return SegmentBatch(data=data, record_ids=[], start_offsets_s=[])
    used = signal[:, : n_seg * seg_samples]
    data = (
        used.reshape(n_channels, n_seg, SEGMENT_PATCHES, PATCH_SAMPLES)
        .transpose(1, 0, 2, 3)
        .copy()
    )
    return SegmentBatch(
        data=data,
        record_ids=[record_id] * n_seg,
        start_offsets_s=[float(i * SEGMENT_SECONDS) for i in range(n_seg)],
    )


def segment_record(record: PsgRecord) -> SegmentBatch:
    if record.layout.sample_rate_hz != SAMPLE_RATE_HZ:
        raise ValueError(f"record must be at {SAMPLE_RATE_HZ} Hz")
    return segment_signal(record.signal, record.record_id, record.layout.sample_rate_hz)


def segment_for_finetune(
    signal: np.ndarray, max_patches: int = FINETUNE_MAX_PATCHES
) -> tuple[np.ndarray, int]:
    """Pad (zeros) or truncate to whole segments for full-record encoding.

    Returns (segments [n_seg, channels, 60, 640], n_valid_patches). Valid
    patches are the leading ones that carry real signal, capped at
    ``max_patches`` (8 h by default).
    """
    n_channels, n = signal.shape
    n_patches = min(n // PATCH_SAMPLES, max_patches)
    if n_patches == 0:
        raise ValueError("record shorter than one patch")
    n_seg = (n_patches + SEGMENT_PATCHES - 1) // SEGMENT_PATCHES
    padded = np.zeros((n_channels, n_seg * SEGMENT_PATCHES * PATCH_SAMPLES), dtype=signal.dtype)
    take = n_patches * PATCH_SAMPLES
    padded[:, :take] = signal[:, :take]
    data = (
        padded.reshape(n_channels, n_seg, SEGMENT_PATCHES, PATCH_SAMPLES)
        .transpose(1, 0, 2, 3)
        .copy()
    )
    return data, n_patches

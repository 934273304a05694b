"""DFT utilities, the log-amplitude transform used by frequency-domain
losses, and the two fixed baseline embeddings (time and frequency)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import ChannelLayout, MODALITIES, PATCH_SAMPLES
from .preprocess import design_lowpass, filtfilt

N_BINS = PATCH_SAMPLES // 2  # 320: DC through bin 319, Nyquist excluded

AMP_EPSILON = 1e-6
# Computed (not the literal 6.0) so the transform maps 0 to exactly 0.
AMP_SHIFT = -np.log10(AMP_EPSILON)

BASELINE_DIM = 512
_BASELINE_BINS = 64
# Evenly spaced bin indices over the 320 retained bins, DC included.
BASELINE_BIN_INDICES = np.round(np.arange(_BASELINE_BINS) * (N_BINS - 1) / (_BASELINE_BINS - 1)).astype(int)

# One representative channel per modality for the time-domain baseline.
BASELINE_TIME_CHANNELS = ("C3-M2", "NASAL", "EKG_L-EKG_R", "LEG")
_DECIMATION = 5  # 128 Hz -> 25.6 Hz
_BASELINE_SAMPLES = PATCH_SAMPLES // _DECIMATION  # 128 per channel


@dataclass
class PatchSpectrum:
    """Amplitude and principal-value phase over the 320 non-Nyquist bins."""

    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape or self.amplitude.shape[-1] != N_BINS:
            raise ValueError(f"expected trailing dimension {N_BINS}")
        if np.any(self.amplitude < 0):
            raise ValueError("amplitude must be nonnegative")


def rdft(patch: np.ndarray) -> PatchSpectrum:
    """Real-input DFT of 640-sample patches (any leading batch dimensions).

    The Nyquist bin is excluded from the returned spectrum. Zero-amplitude
    bins get phase 0 by convention.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[-1] != PATCH_SAMPLES:
        raise ValueError(f"patch must have {PATCH_SAMPLES} samples, got {patch.shape[-1]}")
    if not np.isfinite(patch).all():
        raise ValueError("patch contains non-finite samples")
    spec = np.fft.rfft(patch, axis=-1)[..., :N_BINS]
    amplitude = np.abs(spec)
    phase = np.where(amplitude > 0, np.angle(spec), 0.0)
    return PatchSpectrum(amplitude=amplitude, phase=phase)


def inverse_rdft(spectrum: PatchSpectrum) -> np.ndarray:
    """Reconstruct the patch assuming zero Nyquist-bin content."""
    full = np.zeros(spectrum.amplitude.shape[:-1] + (N_BINS + 1,), dtype=np.complex128)
    full[..., :N_BINS] = spectrum.amplitude * np.exp(1j * spectrum.phase)
    return np.fft.irfft(full, n=PATCH_SAMPLES, axis=-1)


def amp_transform(amplitude: np.ndarray) -> np.ndarray:
    """log10(|X| + eps) shifted so 0 maps to 0; monotone and nonnegative."""
    amplitude = np.asarray(amplitude, dtype=np.float64)
    if np.any(amplitude < 0):
        raise ValueError("amplitude must be nonnegative")
    return np.log10(amplitude + AMP_EPSILON) + AMP_SHIFT


@dataclass
class BaselineEmbedding:
    vector: np.ndarray
    kind: str  # "time" or "freq"

    def __post_init__(self):
        if self.vector.shape[-1] != BASELINE_DIM:
            raise ValueError(f"baseline embedding must have width {BASELINE_DIM}")


def baseline_time_embed(patch: np.ndarray, layout: ChannelLayout) -> BaselineEmbedding:
    """Anti-alias filter + decimate the four representative channels to
    25.6 Hz and concatenate: 4 x 128 = 512 values per patch."""
    patch = np.asarray(patch, dtype=np.float64)
    try:
        idx = [layout.channel_index(name) for name in BASELINE_TIME_CHANNELS]
    except ValueError as err:
        raise ValueError(f"layout is missing a representative channel: {err}") from err
    vec = _decimate_channels(patch[..., idx, :], layout.sample_rate_hz)
    return BaselineEmbedding(vector=vec, kind="time")


def _decimate_channels(x: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """[..., 4, 640] -> [..., 512]: low-pass at 0.9x the decimated Nyquist,
    then take every 5th sample."""
    target_rate = sample_rate_hz / _DECIMATION
    spec = design_lowpass(0.9 * target_rate / 2.0, sample_rate_hz=sample_rate_hz)
    filtered = filtfilt(x, spec, axis=-1)
    decimated = filtered[..., ::_DECIMATION]
    return decimated.reshape(x.shape[:-2] + (-1,))


def baseline_freq_embed(patch: np.ndarray, layout: ChannelLayout) -> BaselineEmbedding:
    """Per modality: average the channel spectra, sample 64 bins uniformly,
    and emit 64 transformed amplitudes then 64 phases; concatenating the four
    modalities gives 512 values per patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[-2] != layout.n_channels:
        raise ValueError(f"expected {layout.n_channels} channels, got {patch.shape[-2]}")
    spec = rdft(patch)
    parts = []
    for modality in MODALITIES:
        idx = layout.modality_indices(modality)
        amp = spec.amplitude[..., idx, :].mean(axis=-2)
        phase = spec.phase[..., idx, :].mean(axis=-2)
        parts.append(amp_transform(amp[..., BASELINE_BIN_INDICES]))
        parts.append(phase[..., BASELINE_BIN_INDICES])
    return BaselineEmbedding(vector=np.concatenate(parts, axis=-1), kind="freq")


def baseline_embed_patches(patches: np.ndarray, layout: ChannelLayout, kind: str) -> np.ndarray:
    """Batch baseline embeddings for [n_patches, channels, 640] input."""
    if kind == "time":
        return baseline_time_embed(patches, layout).vector
    if kind == "freq":
        return baseline_freq_embed(patches, layout).vector
    raise ValueError(f"unknown baseline kind {kind!r}")

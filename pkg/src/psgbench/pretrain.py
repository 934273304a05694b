"""Self-supervised objectives (masked / denoising reconstruction in time and
frequency domains, pairwise and leave-one-out contrastive), the masking and
corruption procedures, and the pretraining loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import (
    Backbone,
    BackboneConfig,
    check_loss_finite,
    init_parameters,
    save_checkpoint,
)
from .records import MODALITIES, PATCH_SAMPLES, SEGMENT_PATCHES
from .spectral import AMP_EPSILON, AMP_SHIFT, N_BINS

OBJECTIVES = (
    "mae_time_all",
    "mae_time_masked",
    "mae_freq_all",
    "mae_freq_masked",
    "dae_time",
    "dae_freq",
    "cl_pairwise",
    "cl_loo",
)

MASK_RATIO = 0.34
CORRUPT_CHANNEL_PROB = 0.5
CORRUPT_NOISE_RANGE = (0.01, 0.3)
DEFAULT_TEMPERATURE = 0.1

_TWO_PI = 2.0 * math.pi

# RNG stream tags for the training loop.
_STREAM_ORDER = 11
_STREAM_AUG = 12
_STREAM_VAL_AUG = 13


@dataclass
class MaskPlan:
    """Boolean [channels, patches]; per channel exactly round(ratio*P) cells."""

    mask: np.ndarray
    ratio: float = MASK_RATIO

    @property
    def per_channel_count(self) -> int:
        return int(self.mask.sum(axis=1)[0])


def mask_count(n_patches: int, ratio: float) -> int:
    return int(math.floor(ratio * n_patches + 0.5))


def sample_mask(
    n_channels: int = 16,
    n_patches: int = SEGMENT_PATCHES,
    ratio: float = MASK_RATIO,
    rng: np.random.Generator | None = None,
) -> MaskPlan:
    """Independently per channel, mask round(ratio * n_patches) patches."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    rng = rng or np.random.default_rng()
    count = mask_count(n_patches, ratio)
    mask = np.zeros((n_channels, n_patches), dtype=bool)
    for c in range(n_channels):
        mask[c, rng.permutation(n_patches)[:count]] = True
    return MaskPlan(mask=mask, ratio=ratio)


@dataclass
class CorruptionPlan:
    """Per-channel corruption flags and noise levels for one 300 s segment."""

    flags: np.ndarray  # bool [channels]
    noise_fraction: np.ndarray  # u in [0.01, 0.3], per channel
    noise_std: np.ndarray  # u * max|x_channel|


def corrupt(
    segment: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, CorruptionPlan]:
    """Add white Gaussian noise to ~half the channels of [channels, samples].

    Noise std per corrupted channel is u * max|x| with u ~ U(0.01, 0.3);
    the clean input is left untouched (a copy is returned).
    """
    if not np.isfinite(segment).all():
        raise ValueError("segment contains non-finite values")
    n_channels = segment.shape[0]
    flags = rng.random(n_channels) < CORRUPT_CHANNEL_PROB
    u = rng.uniform(*CORRUPT_NOISE_RANGE, size=n_channels)
    peak = np.max(np.abs(segment), axis=1)
    std = u * peak
    out = segment.copy()
    for c in np.flatnonzero(flags):
        if std[c] > 0:
            out[c] += std[c] * rng.standard_normal(segment.shape[1])
    return out, CorruptionPlan(flags=flags, noise_fraction=u, noise_std=std)


class ReconstructionDecoder(nn.Module):
    """One affine map per modality from d_model to the reconstruction width.

    Both domains emit c_m * 640 values per patch: raw samples in the time
    domain, 320 transformed amplitudes followed by 320 phases per channel in
    the frequency domain.
    """

    def __init__(self, cfg: BackboneConfig, domain: str):
        super().__init__()
        if domain not in ("time", "freq"):
            raise ValueError(f"unknown domain {domain!r}")
        self.domain = domain
        self.cfg = cfg
        self.heads = nn.ModuleDict(
            {
                name: nn.Linear(cfg.d_model, c * PATCH_SAMPLES)
                for name, c in zip(MODALITIES, cfg.modality_channels)
            }
        )
        init_parameters(self, cfg.seed + 1)

    def forward(self, per_modality: dict[str, torch.Tensor]) -> torch.Tensor:
        """[B, P, d] per modality -> [B, 16, P, 640] in canonical channel order."""
        outs = []
        for name, c in zip(MODALITIES, self.cfg.modality_channels):
            emb = per_modality[name]
            b, p, _ = emb.shape
            out = self.heads[name](emb).view(b, p, c, PATCH_SAMPLES).permute(0, 2, 1, 3)
            outs.append(out)
        return torch.cat(outs, dim=1)


# --- losses ------------------------------------------------------------------

def _masked_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Mean of values [B, C, P, W] over all cells, or over masked (B,C,P) cells."""
    if mask is None:
        return values.mean()
    m = mask.to(values.dtype)[..., None]
    total = m.sum() * values.shape[-1]
    if total.item() == 0:
        raise ValueError("masked variant requires a nonempty mask")
    return (values * m).sum() / total


def loss_time(
    recon: torch.Tensor,
    target: torch.Tensor,
    channel_mask: torch.Tensor | None,
    variant: str,
) -> torch.Tensor:
    """MSE over all patches or only masked (channel, patch) cells."""
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    if variant == "all":
        mask = None
    elif variant == "masked":
        if channel_mask is None:
            raise ValueError("masked variant requires a mask")
        mask = channel_mask
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return _masked_mean((recon - target) ** 2, mask)


def freq_targets(patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Transformed amplitude and principal-value phase targets, Nyquist
    excluded: [..., 640] -> ([..., 320], [..., 320])."""
    spec = torch.fft.rfft(patches, dim=-1)[..., :N_BINS]
    amplitude = torch.abs(spec)
    amp_t = torch.log10(amplitude + AMP_EPSILON) + AMP_SHIFT
    phase = torch.where(amplitude > 0, torch.atan2(spec.imag, spec.real), torch.zeros_like(amplitude))
    return amp_t, phase


def _phase_error_sq(phase_target: torch.Tensor, phase_pred: torch.Tensor) -> torch.Tensor:
    """Squared angular error minimized over wraps of 0 and +/- 2pi."""
    if (phase_pred.abs() > 3 * math.pi).any():
        raise ValueError("predicted phase outside [-3pi, 3pi]; upstream bug likely")
    if (phase_target.abs() > 3 * math.pi).any():
        raise ValueError("target phase outside [-3pi, 3pi]; upstream bug likely")
    d = phase_target - phase_pred
    candidates = torch.stack(((d) ** 2, (d - _TWO_PI) ** 2, (d + _TWO_PI) ** 2))
    return candidates.min(dim=0).values


def loss_freq(
    recon: torch.Tensor,
    target_patches: torch.Tensor,
    channel_mask: torch.Tensor | None,
    variant: str,
) -> torch.Tensor:
    """Amplitude MSE (in transform space) plus wrap-tolerant phase loss.

    ``recon`` is [B, C, P, 640]: transformed amplitude in the first 320
    columns, phase in the last 320.
    """
    if recon.shape != target_patches.shape:
        raise ValueError(
            f"shape mismatch {tuple(recon.shape)} vs {tuple(target_patches.shape)}"
        )
    if variant == "all":
        mask = None
    elif variant == "masked":
        if channel_mask is None:
            raise ValueError("masked variant requires a mask")
        mask = channel_mask
    else:
        raise ValueError(f"unknown variant {variant!r}")
    amp_hat = recon[..., :N_BINS]
    phase_hat = recon[..., N_BINS:]
    with torch.no_grad():
        amp_target, phase_target = freq_targets(target_patches)
    amp_loss = _masked_mean((amp_hat - amp_target) ** 2, mask)
    phase_loss = _masked_mean(_phase_error_sq(phase_target, phase_hat), mask)
    return amp_loss + phase_loss


def cl_pool(per_modality: dict[str, torch.Tensor]) -> torch.Tensor:
    """Mean over the patch axis per modality: dict of [B, P, d] -> [B, 4, d]."""
    return torch.stack([per_modality[m].mean(dim=1) for m in MODALITIES], dim=1)


def _normalize_embeddings(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero embedding: cosine similarity undefined")
    return x / norms


def loss_cl_pairwise(pooled: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """InfoNCE between every ordered modality pair; positives are the same
    batch index, negatives the other batch elements. pooled: [B, 4, d]."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b, n_mod, _ = pooled.shape
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    z = _normalize_embeddings(pooled)
    labels = torch.arange(b, device=pooled.device)
    losses = []
    for i in range(n_mod):
        for j in range(n_mod):
            if i == j:
                continue
            logits = z[:, i] @ z[:, j].T / temperature
            losses.append(nn.functional.cross_entropy(logits, labels))
    return torch.stack(losses).mean()


def loss_cl_loo(pooled: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """InfoNCE of each modality against the mean of the other modalities."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b, n_mod, _ = pooled.shape
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    z = _normalize_embeddings(pooled)
    loo = (pooled.sum(dim=1, keepdim=True) - pooled) / (n_mod - 1)
    zbar = _normalize_embeddings(loo)
    labels = torch.arange(b, device=pooled.device)
    losses = []
    for i in range(n_mod):
        logits = z[:, i] @ zbar[:, i].T / temperature
        losses.append(nn.functional.cross_entropy(logits, labels))
    return torch.stack(losses).mean()


# --- objective dispatch ------------------------------------------------------

def objective_loss(
    objective: str,
    backbone: Backbone,
    decoder: ReconstructionDecoder | None,
    x: torch.Tensor,
    channel_mask: torch.Tensor | None = None,
    corrupted: torch.Tensor | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Compute one objective's scalar loss for a clean batch [B, 16, P, 640].

    Masked objectives consume ``channel_mask``; denoising objectives consume
    ``corrupted`` (same shape as x) and reconstruct the clean signal.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; valid: {', '.join(OBJECTIVES)}")

    if objective.startswith("mae"):
        if channel_mask is None:
            raise ValueError("mae objectives require a channel mask")
        out = backbone(x, channel_mask=channel_mask)
        recon = decoder(out.per_modality)
        variant = "masked" if objective.endswith("masked") else "all"
        if "time" in objective:
            loss = loss_time(recon, x, channel_mask, variant)
        else:
            loss = loss_freq(recon, x, channel_mask, variant)
    elif objective.startswith("dae"):
        if corrupted is None:
            raise ValueError("dae objectives require a corrupted batch")
        out = backbone(corrupted)
        recon = decoder(out.per_modality)
        if objective == "dae_time":
            loss = loss_time(recon, x, None, "all")
        else:
            loss = loss_freq(recon, x, None, "all")
    else:
        out = backbone(x)
        pooled = cl_pool(out.per_modality)
        if objective == "cl_pairwise":
            loss = loss_cl_pairwise(pooled, temperature)
        else:
            loss = loss_cl_loo(pooled, temperature)
    return check_loss_finite(loss, objective)


def prepare_batch(
    objective: str,
    segments: np.ndarray,
    rngs: list[np.random.Generator],
    mask_ratio: float = MASK_RATIO,
    dtype: torch.dtype = torch.float32,
) -> dict:
    """Turn clean segments [B, 16, 60, 640] into the tensors one objective
    needs, drawing per-segment masks or corruption from the given RNGs."""
    b, c, p, w = segments.shape
    x = torch.from_numpy(np.ascontiguousarray(segments)).to(dtype)
    batch = {"x": x, "channel_mask": None, "corrupted": None}
    if objective.startswith("mae"):
        masks = np.stack([sample_mask(c, p, mask_ratio, rng).mask for rng in rngs])
        batch["channel_mask"] = torch.from_numpy(masks)
    elif objective.startswith("dae"):
        noisy = np.empty_like(segments)
        for i, rng in enumerate(rngs):
            noisy_i, _ = corrupt(segments[i].reshape(c, p * w), rng)
            noisy[i] = noisy_i.reshape(c, p, w)
        batch["corrupted"] = torch.from_numpy(noisy).to(dtype)
    return batch


# --- training loop -----------------------------------------------------------

@dataclass
class PretrainConfig:
    objective: str
    seed: int = 0
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    max_epochs: int = 40
    fixed_epochs: int | None = None  # compute-controlled mode disables early stop
    patience: int = 3
    val_records: int = 10
    mask_ratio: float = MASK_RATIO
    temperature: float = DEFAULT_TEMPERATURE
    dtype: str = "float32"

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class PretrainResult:
    backbone: Backbone
    loss_curve: list[tuple[int, float, str]]
    epochs_run: int
    best_val_loss: float
    checkpoint_path: Path | None = None
    diverged: bool = False


class _SegmentStore:
    """Lazy memmap access to whole 300 s segments of the cohort."""

    def __init__(self, data_dir: Path, entries):
        from .records import open_signal_memmap, read_sidecar

        self.data_dir = Path(data_dir)
        self.entries = {e.record_id: e for e in entries}
        self._maps: dict[str, np.memmap] = {}
        self.n_segments = {}
        for e in entries:
            n = read_sidecar(self.data_dir, e.record_id)["n_samples"]
            self.n_segments[e.record_id] = n // (SEGMENT_PATCHES * PATCH_SAMPLES)
        self._open = open_signal_memmap

    def segment_index(self, record_ids) -> list[tuple[str, int]]:
        out = []
        for rid in record_ids:
            out.extend((rid, s) for s in range(self.n_segments[rid]))
        return out

    def load(self, rid: str, seg: int) -> np.ndarray:
        if rid not in self._maps:
            self._maps[rid] = self._open(self.data_dir, self.entries[rid])
        w = SEGMENT_PATCHES * PATCH_SAMPLES
        raw = np.asarray(self._maps[rid][:, seg * w : (seg + 1) * w], dtype=np.float32)
        return raw.reshape(raw.shape[0], SEGMENT_PATCHES, PATCH_SAMPLES)

    def load_batch(self, keys) -> np.ndarray:
        return np.stack([self.load(rid, seg) for rid, seg in keys])


def _aug_rngs(seed: int, tag: int, epoch: int, indices) -> list[np.random.Generator]:
    return [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag, epoch, int(i))))
        for i in indices
    ]


def run_pretraining(
    manifest,
    data_dir: Path,
    backbone_cfg: BackboneConfig,
    cfg: PretrainConfig,
    out_dir: Path | None = None,
) -> PretrainResult:
    """Adam on one objective with early stopping on validation loss (or a
    fixed epoch budget); emits the best checkpoint and a loss curve."""
    if cfg.objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {cfg.objective!r}; valid: {', '.join(OBJECTIVES)}")
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype()

    backbone = Backbone(backbone_cfg).to(dtype)
    decoder = None
    params = list(backbone.parameters())
    if cfg.objective.startswith(("mae", "dae")):
        domain = "time" if "time" in cfg.objective else "freq"
        decoder = ReconstructionDecoder(backbone_cfg, domain).to(dtype)
        params += list(decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.adam_betas)

    train_ids = sorted(e.record_id for e in manifest.by_split("train"))
    val_ids = sorted(e.record_id for e in manifest.by_split("validation"))[: cfg.val_records]
    store = _SegmentStore(data_dir, manifest.entries)
    train_segments = store.segment_index(train_ids)
    val_segments = store.segment_index(val_ids)
    if not train_segments:
        raise ValueError("no whole segments in the train split")

    is_cl = cfg.objective.startswith("cl")
    min_batch = 2 if is_cl else 1

    curve: list[tuple[int, float, str]] = []
    step = 0
    best_val = math.inf
    best_state = copy.deepcopy(backbone.state_dict())
    last_finite_state = copy.deepcopy(backbone.state_dict())
    bad_evals = 0
    epochs_run = 0
    diverged = False
    n_epochs = cfg.fixed_epochs if cfg.fixed_epochs is not None else cfg.max_epochs

    def _val_loss() -> float:
        losses = []
        with torch.no_grad():
            for i0 in range(0, len(val_segments), cfg.batch_size):
                keys = val_segments[i0 : i0 + cfg.batch_size]
                if len(keys) < min_batch:
                    continue
                segs = store.load_batch(keys)
                rngs = _aug_rngs(cfg.seed, _STREAM_VAL_AUG, 0, range(i0, i0 + len(keys)))
                batch = prepare_batch(cfg.objective, segs, rngs, cfg.mask_ratio, dtype)
                loss = objective_loss(
                    cfg.objective, backbone, decoder, batch["x"],
                    batch["channel_mask"], batch["corrupted"], cfg.temperature,
                )
                losses.append(loss.item())
        return float(np.mean(losses)) if losses else math.inf

    init_val = _val_loss()
    curve.append((0, init_val, "validation"))
    if cfg.fixed_epochs is None:
        best_val = init_val

    for epoch in range(n_epochs):
        order_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(_STREAM_ORDER, epoch))
        )
        order = order_rng.permutation(len(train_segments))
        for i0 in range(0, len(order), cfg.batch_size):
            idx = order[i0 : i0 + cfg.batch_size]
            if len(idx) < min_batch:
                continue
            keys = [train_segments[i] for i in idx]
            segs = store.load_batch(keys)
            rngs = _aug_rngs(cfg.seed, _STREAM_AUG, epoch, idx)
            batch = prepare_batch(cfg.objective, segs, rngs, cfg.mask_ratio, dtype)
            try:
                loss = objective_loss(
                    cfg.objective, backbone, decoder, batch["x"],
                    batch["channel_mask"], batch["corrupted"], cfg.temperature,
                )
            except FloatingPointError:
                diverged = True
                break
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            curve.append((step, loss.item(), "train"))
            last_finite_state = copy.deepcopy(backbone.state_dict())
        epochs_run = epoch + 1
        if diverged:
            backbone.load_state_dict(last_finite_state)
            best_state = last_finite_state
            break
        val = _val_loss()
        curve.append((step, val, "validation"))
        if cfg.fixed_epochs is None:
            if val < best_val:
                best_val, bad_evals = val, 0
                best_state = copy.deepcopy(backbone.state_dict())
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    break
        else:
            best_val = val
            best_state = copy.deepcopy(backbone.state_dict())

    backbone.load_state_dict(best_state)
    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = save_checkpoint(
            out_dir / "checkpoint.bin",
            backbone,
            objective=cfg.objective,
            meta={
                "epochs_run": epochs_run,
                "best_val_loss": best_val,
                "diverged": diverged,
                "pretrain_seed": cfg.seed,
            },
        )
        write_loss_curve(curve, out_dir / "loss_curve.csv")
    result = PretrainResult(
        backbone=backbone,
        loss_curve=curve,
        epochs_run=epochs_run,
        best_val_loss=best_val,
        checkpoint_path=checkpoint_path,
        diverged=diverged,
    )
    if diverged:
        raise FloatingPointError(
            f"pretraining diverged (non-finite {cfg.objective} loss); "
            f"checkpoint of the last finite step"
            + (f" written to {checkpoint_path}" if checkpoint_path else " retained in memory")
        )
    return result


def write_loss_curve(curve, path: Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("step,loss,split\n")
        for step, loss, split in curve:
            fh.write(f"{step},{loss!r},{split}\n")
    return path

"""Shared encoder: per-modality conv patch encoders, sinusoidal positions,
per-modality pre-norm temporal transformers, and modality concatenation.

Also owns deterministic parameter initialization and the checkpoint format
(JSON header + little-endian float64 tensor payload).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .records import MODALITIES, PATCH_SAMPLES, SEGMENT_PATCHES

CONV_KERNEL = 7
CONV_STRIDES = (4, 4, 4, 10)  # 4*4*4*10 = 640: one token per patch
MLP_RATIO = 4
MAX_POSITIONS = 10_000

CHECKPOINT_MAGIC = b"PSGB"


@dataclass
class BackboneConfig:
    patch_len: int = PATCH_SAMPLES
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 6
    modality_channels: tuple[int, ...] = (8, 5, 1, 2)
    segment_patches: int = SEGMENT_PATCHES
    seed: int = 0

    def __post_init__(self):
        self.modality_channels = tuple(self.modality_channels)
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.modality_channels) != len(MODALITIES):
            raise ValueError(f"need channel counts for {len(MODALITIES)} modalities")

    @property
    def n_channels(self) -> int:
        return sum(self.modality_channels)

    @property
    def concat_dim(self) -> int:
        return len(MODALITIES) * self.d_model

    def modality_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, count in zip(MODALITIES, self.modality_channels):
            out[name] = slice(start, start + count)
            start += count
        return out


def paper_config(seed: int = 0) -> BackboneConfig:
    return BackboneConfig(d_model=128, n_heads=8, n_layers=6, seed=seed)


def desk_config(seed: int = 0) -> BackboneConfig:
    return BackboneConfig(d_model=32, n_heads=4, n_layers=2, seed=seed)


def sinusoidal_positions(n_positions: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sin/cos encoding: pe[p, 2i] = sin(p * 10000^(-2i/d))."""
    if n_positions > MAX_POSITIONS:
        raise ValueError(f"positions must stay below {MAX_POSITIONS}")
    pos = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=torch.float64)
    freq = torch.pow(10000.0, -idx / d_model)
    pe = torch.zeros(n_positions, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, CONV_KERNEL, stride=stride, padding=3)
        self.norm = nn.LayerNorm(c_out)
        self.act = nn.GELU()

    def forward(self, x):  # [N, C, L]
        x = self.conv(x)
        x = self.norm(x.transpose(1, 2)).transpose(1, 2)
        return self.act(x)


class PatchConvEncoder(nn.Module):
    """Maps one modality's [c_m, 640] patch to a d_model token (4 blocks)."""

    def __init__(self, c_in: int, d_model: int):
        super().__init__()
        widths = [c_in, d_model, d_model, d_model, d_model]
        self.blocks = nn.Sequential(
            *[ConvBlock(widths[i], widths[i + 1], CONV_STRIDES[i]) for i in range(4)]
        )

    def forward(self, x):  # [N, c_m, 640] -> [N, d_model]
        out = self.blocks(x)
        if out.shape[-1] != 1:
            raise ValueError(f"conv stack must reduce to one token, got length {out.shape[-1]}")
        return out.squeeze(-1)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, x, key_padding_mask=None, return_attn=False):
        b, t, d = x.shape
        q = self.wq(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(
                key_padding_mask[:, None, None, :], float("-inf")
            )
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.wo(out)
        return (out, attn) if return_attn else (out, None)


class EncoderLayer(nn.Module):
    """Pre-norm transformer block with an MLP-ratio-4 feed-forward."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, MLP_RATIO * d_model),
            nn.GELU(),
            nn.Linear(MLP_RATIO * d_model, d_model),
        )

    def forward(self, x, key_padding_mask=None, return_attn=False):
        h, attn = self.attn(self.ln1(x), key_padding_mask, return_attn)
        x = x + h
        x = x + self.mlp(self.ln2(x))
        return x, attn


class TransformerEncoder(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d_model, n_heads) for _ in range(n_layers))
        self.final_norm = nn.LayerNorm(d_model)

    def forward(self, x, key_padding_mask=None, return_attn=False):
        attns = []
        for layer in self.layers:
            x, attn = layer(x, key_padding_mask, return_attn)
            if return_attn:
                attns.append(attn)
        return self.final_norm(x), attns


@dataclass
class BackboneOutput:
    per_modality: dict[str, torch.Tensor]  # each [B, P, d_model]
    concat: torch.Tensor  # [B, P, 4*d_model]
    attention: dict[str, list[torch.Tensor]] = field(default_factory=dict)


class Backbone(nn.Module):
    """Four modality encoders with learned mask tokens and per-modality
    temporal transformers; outputs per-patch embeddings."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.conv_encoders = nn.ModuleDict(
            {
                name: PatchConvEncoder(c, cfg.d_model)
                for name, c in zip(MODALITIES, cfg.modality_channels)
            }
        )
        self.transformers = nn.ModuleDict(
            {
                name: TransformerEncoder(cfg.d_model, cfg.n_heads, cfg.n_layers)
                for name in MODALITIES
            }
        )
        self.mask_tokens = nn.ParameterDict(
            {name: nn.Parameter(torch.zeros(cfg.d_model)) for name in MODALITIES}
        )
        init_parameters(self, cfg.seed)

    def forward(
        self,
        x: torch.Tensor,
        channel_mask: torch.Tensor | None = None,
        return_attn: bool = False,
    ) -> BackboneOutput:
        """x: [B, 16, P, 640]; channel_mask: optional bool [B, 16, P] marking
        masked (channel, patch) cells whose content must stay hidden."""
        if x.ndim != 4 or x.shape[1] != self.cfg.n_channels or x.shape[3] != self.cfg.patch_len:
            raise ValueError(
                f"expected [B, {self.cfg.n_channels}, P, {self.cfg.patch_len}], got {tuple(x.shape)}"
            )
        b, _, n_patches, _ = x.shape
        pos = sinusoidal_positions(n_patches, self.cfg.d_model, dtype=x.dtype).to(x.device)

        per_modality = {}
        attention = {}
        for name, sl in self.cfg.modality_slices().items():
            xm = x[:, sl]  # [B, c_m, P, 640]
            if channel_mask is not None:
                mask_m = channel_mask[:, sl].to(x.dtype)  # [B, c_m, P]
                xm = xm * (1.0 - mask_m[..., None])
            c_m = xm.shape[1]
            flat = xm.permute(0, 2, 1, 3).reshape(b * n_patches, c_m, self.cfg.patch_len)
            tokens = self.conv_encoders[name](flat).view(b, n_patches, self.cfg.d_model)
            if channel_mask is not None:
                # Blend in the mask token by the masked-channel fraction; a
                # fully masked modality-patch becomes exactly the mask token.
                frac = channel_mask[:, sl].to(x.dtype).mean(dim=1)[..., None]  # [B, P, 1]
                tokens = (1.0 - frac) * tokens + frac * self.mask_tokens[name]
            # Scale tokens by sqrt(d) before adding positions (standard
            # practice) so content is not swamped by the shared encoding.
            tokens = tokens * math.sqrt(self.cfg.d_model) + pos
            encoded, attns = self.transformers[name](tokens, return_attn=return_attn)
            per_modality[name] = encoded
            if return_attn:
                attention[name] = attns
        return BackboneOutput(
            per_modality=per_modality,
            concat=concat_modalities(per_modality),
            attention=attention,
        )


def concat_modalities(per_modality: dict[str, torch.Tensor]) -> torch.Tensor:
    """Fixed-order concatenation BAS | RESP | EKG | EMG along the last axis."""
    missing = [m for m in MODALITIES if m not in per_modality]
    if missing:
        raise ValueError(f"missing modalities: {missing}")
    return torch.cat([per_modality[m] for m in MODALITIES], dim=-1)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic re-initialization of every parameter from one seed.

    Conv/Linear use the fan-in uniform scheme (nonzero biases, so zero input
    still produces nonzero output), LayerNorm is identity, LSTM uses the
    1/sqrt(hidden) uniform scheme, and loose parameters (mask tokens,
    pooling queries) are drawn Normal(0, 0.02). Draw order is fixed by
    sorted names, so the result is independent of global RNG state.
    """
    gen = torch.Generator().manual_seed(seed)
    handled: set[int] = set()
    for _, sub in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(sub, (nn.Linear, nn.Conv1d)):
            fan_in = (
                sub.in_features
                if isinstance(sub, nn.Linear)
                else sub.in_channels * sub.kernel_size[0]
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=gen)
                if sub.bias is not None:
                    sub.bias.uniform_(-bound, bound, generator=gen)
                    handled.add(id(sub.bias))
            handled.add(id(sub.weight))
        elif isinstance(sub, nn.LayerNorm):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.fill_(0.0)
            handled.update((id(sub.weight), id(sub.bias)))
        elif isinstance(sub, nn.LSTM):
            bound = 1.0 / math.sqrt(sub.hidden_size)
            with torch.no_grad():
                for pname, p in sorted(sub.named_parameters(), key=lambda kv: kv[0]):
                    p.uniform_(-bound, bound, generator=gen)
                    handled.add(id(p))
    for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if id(p) not in handled:
            with torch.no_grad():
                p.normal_(0.0, 0.02, generator=gen)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_loss_finite(loss: torch.Tensor, term: str) -> torch.Tensor:
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite loss in term {term!r}")
    return loss


# --- checkpoint format -------------------------------------------------------

def save_checkpoint(
    path: Path,
    backbone: Backbone,
    objective: str | None = None,
    meta: dict | None = None,
) -> Path:
    """JSON header + named float64 little-endian tensors, fixed order."""
    path = Path(path)
    state = backbone.state_dict()
    names = sorted(state.keys())
    header = {
        "format_version": 1,
        "config": asdict(backbone.cfg),
        "seed": backbone.cfg.seed,
        "objective": objective,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            arr = state[n].detach().cpu().to(torch.float64).numpy()
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        tensors = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            tensors[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, tensors


def load_backbone(path: Path, dtype: torch.dtype = torch.float32) -> tuple[Backbone, dict]:
    header, tensors = read_checkpoint(path)
    cfg_dict = dict(header["config"])
    cfg_dict["modality_channels"] = tuple(cfg_dict["modality_channels"])
    cfg = BackboneConfig(**cfg_dict)
    backbone = Backbone(cfg)
    state = {k: torch.from_numpy(v).to(dtype) for k, v in tensors.items()}
    backbone.to(dtype)
    backbone.load_state_dict(state)
    return backbone, header

"""Frozen-encoder task heads, the four task losses (cross-entropy, scaled-age
MSE, Cox proportional hazards, 13-outcome survival total), and the
fine-tuning loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, TransformerEncoder, init_parameters
from .preprocess import FINETUNE_MAX_PATCHES, segment_for_finetune
from .records import (
    ManifestEntry,
    N_OUTCOMES,
    PATCH_SAMPLES,
    RecordManifest,
    canonical_layout,
    labels_from_sidecar,
    open_signal_memmap,
    read_sidecar,
)
from .spectral import BASELINE_DIM, baseline_embed_patches

TASKS = ("staging", "apnea", "age", "survival")
BASELINE_METHODS = ("baseline_time", "baseline_freq")

N_STAGES = 5

_STREAM_FT_ORDER = 21


@dataclass
class HeadConfig:
    """Task head: transformer (2 layers, 4 heads) over patch embeddings, a
    2-layer BiLSTM, then a per-patch classifier (staging) or masked attention
    pooling (single 8-head transformer layer) to one record vector."""

    task: str
    input_dim: int
    n_transformer_layers: int = 2
    n_transformer_heads: int = 4
    lstm_layers: int = 2
    pool_heads: int = 8
    max_patches: int = FINETUNE_MAX_PATCHES
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; valid: {', '.join(TASKS)}")
        if self.input_dim % self.n_transformer_heads != 0:
            raise ValueError("input_dim must be divisible by the transformer head count")
        if (2 * self.lstm_hidden) % self.pool_heads != 0:
            raise ValueError("BiLSTM output width must be divisible by pool_heads")

    @property
    def lstm_hidden(self) -> int:
        # Equals the encoder d_model for concatenated 4-modality embeddings.
        return self.input_dim // 4

    @property
    def output_dim(self) -> int:
        return {"staging": N_STAGES, "apnea": 1, "age": 1, "survival": N_OUTCOMES}[self.task]


class TaskHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.transformer = TransformerEncoder(
            cfg.input_dim, cfg.n_transformer_heads, cfg.n_transformer_layers
        )
        self.lstm = nn.LSTM(
            input_size=cfg.input_dim,
            hidden_size=cfg.lstm_hidden,
            num_layers=cfg.lstm_layers,
            batch_first=True,
            bidirectional=True,
        )
        lstm_out = 2 * cfg.lstm_hidden
        if cfg.task == "staging":
            self.classifier = nn.Linear(lstm_out, cfg.output_dim)
        else:
            self.pool_transformer = TransformerEncoder(lstm_out, cfg.pool_heads, 1)
            self.pool_score = nn.Linear(lstm_out, 1)
            self.output = nn.Linear(lstm_out, cfg.output_dim)
        init_parameters(self, cfg.seed)

    def forward(self, emb: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """emb: [B, T, D] frozen patch embeddings, valid: bool [B, T].

        Padded positions are excluded from attention, skipped by the packed
        LSTM, and carry zero pooling weight, so record-level outputs do not
        depend on padding length.
        """
        b, t, _ = emb.shape
        if t == 0:
            raise ValueError("empty record: no patches to process")
        if t > self.cfg.max_patches:
            raise ValueError(f"{t} patches exceeds the {self.cfg.max_patches}-patch cap")
        pad_mask = ~valid
        x, _ = self.transformer(emb, key_padding_mask=pad_mask)

        lengths = valid.sum(dim=1)
        if (lengths == 0).any():
            raise ValueError("every record needs at least one valid patch")
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.lstm(packed)
        h, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=t)

        if self.cfg.task == "staging":
            return self.classifier(h)  # [B, T, 5]
        h, _ = self.pool_transformer(h, key_padding_mask=pad_mask)
        scores = self.pool_score(h).squeeze(-1)
        scores = scores.masked_fill(pad_mask, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        pooled = torch.einsum("bt,btd->bd", weights, h)
        out = self.output(pooled)
        return out.squeeze(-1) if self.cfg.output_dim == 1 else out


# --- task losses ---------------------------------------------------------

def loss_ce(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy over valid positions; logits [..., C]."""
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_labels = labels.reshape(-1)
    if mask is not None:
        keep = mask.reshape(-1)
        if not keep.any():
            raise ValueError("all positions are masked")
        flat_logits = flat_logits[keep]
        flat_labels = flat_labels[keep]
    if flat_labels.numel() == 0:
        raise ValueError("no positions to score")
    return nn.functional.cross_entropy(flat_logits, flat_labels)


def loss_age(pred_raw: torch.Tensor, age_years: torch.Tensor) -> torch.Tensor:
    """Softplus keeps predictions positive; targets are age/100."""
    pred = nn.functional.softplus(pred_raw)
    return ((pred - age_years / 100.0) ** 2).mean()


def age_prediction_years(pred_raw: torch.Tensor) -> torch.Tensor:
    return 100.0 * nn.functional.softplus(pred_raw)


def loss_coxph(
    hazards: torch.Tensor, events: torch.Tensor, times: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Negative Cox partial log-likelihood with risk sets {j : t_j >= t_i}.

    Returns (loss, number of events); an all-censored batch contributes 0
    and is flagged by n_events == 0.
    """
    if not torch.isfinite(hazards).all():
        raise ValueError("non-finite hazard")
    events = events.to(hazards.dtype)
    n_events = int(events.sum().item())
    if n_events == 0:
        return hazards.sum() * 0.0, 0
    at_risk = times[None, :] >= times[:, None]  # [i, j]
    masked = torch.where(at_risk, hazards[None, :], torch.full_like(hazards, -math.inf)[None, :])
    lse = torch.logsumexp(masked, dim=1)
    loss = -(events * (hazards - lse)).sum() / n_events
    return loss, n_events


def loss_survival_total(
    hazards: torch.Tensor, events: torch.Tensor, times: torch.Tensor
) -> tuple[torch.Tensor, list[bool]]:
    """Sum of per-outcome CoxPH losses over 12 diseases plus death.

    hazards/events/times: [batch, 13]. Returns the total and a per-outcome
    flag marking outcomes with no events in the batch.
    """
    if hazards.shape[-1] != N_OUTCOMES:
        raise ValueError(f"expected {N_OUTCOMES} outcomes, got {hazards.shape[-1]}")
    total = hazards.sum() * 0.0
    no_event_flags = []
    for k in range(N_OUTCOMES):
        term, n_events = loss_coxph(hazards[:, k], events[:, k], times[:, k])
        total = total + term
        no_event_flags.append(n_events == 0)
    return total, no_event_flags


# --- embedding providers ---------------------------------------------------

def compute_backbone_embeddings(
    backbone: Backbone,
    signal: np.ndarray,
    max_patches: int = FINETUNE_MAX_PATCHES,
    segment_chunk: int = 16,
) -> np.ndarray:
    """Frozen per-patch embeddings [n_valid_patches, 4*d_model] for one record."""
    segments, n_valid = segment_for_finetune(signal, max_patches)
    dtype = next(backbone.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for i0 in range(0, segments.shape[0], segment_chunk):
            x = torch.from_numpy(segments[i0 : i0 + segment_chunk]).to(dtype)
            out = backbone(x)
            chunks.append(out.concat.reshape(-1, out.concat.shape[-1]).cpu().numpy())
    emb = np.concatenate(chunks, axis=0)
    return emb[:n_valid].astype(np.float32)


def compute_baseline_embeddings(
    kind: str, signal: np.ndarray, max_patches: int = FINETUNE_MAX_PATCHES
) -> np.ndarray:
    """Per-patch baseline embeddings [n_patches, 512] for one record."""
    layout = canonical_layout()
    n_patches = min(signal.shape[1] // PATCH_SAMPLES, max_patches)
    if n_patches == 0:
        raise ValueError("record shorter than one patch")
    patches = (
        signal[:, : n_patches * PATCH_SAMPLES]
        .reshape(signal.shape[0], n_patches, PATCH_SAMPLES)
        .transpose(1, 0, 2)
    )
    short = kind.split("_", 1)[1] if kind.startswith("baseline_") else kind
    return baseline_embed_patches(patches, layout, short).astype(np.float32)


def embed_entries(
    method: str,
    entries: list[ManifestEntry],
    data_dir: Path,
    backbone: Backbone | None,
    max_patches: int = FINETUNE_MAX_PATCHES,
) -> dict[str, np.ndarray]:
    """Embeddings for a list of manifest entries, keyed by record_id."""
    out = {}
    for e in entries:
        signal = np.asarray(open_signal_memmap(data_dir, e), dtype=np.float32)
        if method in BASELINE_METHODS:
            out[e.record_id] = compute_baseline_embeddings(method, signal, max_patches)
        else:
            if backbone is None:
                raise ValueError(f"method {method!r} requires an encoder checkpoint")
            out[e.record_id] = compute_backbone_embeddings(backbone, signal, max_patches)
    return out


# --- fine-tuning loop -------------------------------------------------------

@dataclass
class FinetuneConfig:
    task: str
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 20
    patience: int = 3
    val_records: int = 10
    max_patches: int = FINETUNE_MAX_PATCHES
    dtype: str = "float32"

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class RecordLabels:
    hypnogram: np.ndarray
    apnea: int
    age_years: float
    events: np.ndarray  # [13]
    times: np.ndarray  # [13]


@dataclass
class FinetuneResult:
    head: TaskHead
    predictions: dict[str, np.ndarray]  # test record_id -> task output
    labels: dict[str, RecordLabels]
    loss_curve: list[tuple[int, float, str]]
    epochs_run: int
    best_val_loss: float


def load_labels(data_dir: Path, entries: list[ManifestEntry]) -> dict[str, RecordLabels]:
    out = {}
    for e in entries:
        labels = labels_from_sidecar(read_sidecar(data_dir, e.record_id))
        out[e.record_id] = RecordLabels(
            hypnogram=labels.hypnogram,
            apnea=labels.apnea,
            age_years=labels.age_years,
            events=np.array([o.event for o in labels.survival], dtype=np.float64),
            times=np.array([o.time_days for o in labels.survival], dtype=np.float64),
        )
    return out


def _collate(
    rids: list[str],
    embeddings: dict[str, np.ndarray],
    labels: dict[str, RecordLabels],
    task: str,
    dtype: torch.dtype,
) -> dict:
    t_max = max(embeddings[r].shape[0] for r in rids)
    dim = embeddings[rids[0]].shape[1]
    emb = torch.zeros(len(rids), t_max, dim, dtype=dtype)
    valid = torch.zeros(len(rids), t_max, dtype=torch.bool)
    for i, r in enumerate(rids):
        e = embeddings[r]
        emb[i, : e.shape[0]] = torch.from_numpy(e).to(dtype)
        valid[i, : e.shape[0]] = True
    batch = {"emb": emb, "valid": valid}
    if task == "staging":
        stages = torch.zeros(len(rids), t_max, dtype=torch.long)
        for i, r in enumerate(rids):
            hyp = labels[r].hypnogram[: embeddings[r].shape[0]]
            stages[i, : len(hyp)] = torch.from_numpy(hyp.astype(np.int64))
        batch["stages"] = stages
    elif task == "apnea":
        batch["apnea"] = torch.tensor([labels[r].apnea for r in rids], dtype=dtype)
    elif task == "age":
        batch["age"] = torch.tensor([labels[r].age_years for r in rids], dtype=dtype)
    else:
        batch["events"] = torch.stack([torch.from_numpy(labels[r].events) for r in rids]).to(dtype)
        batch["times"] = torch.stack([torch.from_numpy(labels[r].times) for r in rids]).to(dtype)
    return batch


def task_loss(head_out: torch.Tensor, batch: dict, task: str) -> torch.Tensor:
    if task == "staging":
        return loss_ce(head_out, batch["stages"], batch["valid"])
    if task == "apnea":
        return nn.functional.binary_cross_entropy_with_logits(head_out, batch["apnea"])
    if task == "age":
        return loss_age(head_out, batch["age"])
    loss, _ = loss_survival_total(head_out, batch["events"], batch["times"])
    return loss


def predictions_from_output(head_out: torch.Tensor, task: str) -> np.ndarray:
    """Map head outputs to reported predictions (probabilities, years, hazards)."""
    if task == "staging":
        return torch.softmax(head_out, dim=-1).cpu().numpy()
    if task == "apnea":
        return torch.sigmoid(head_out).cpu().numpy()
    if task == "age":
        return age_prediction_years(head_out).cpu().numpy()
    return head_out.cpu().numpy()


def run_finetune(
    method: str,
    backbone: Backbone | None,
    manifest: RecordManifest,
    data_dir: Path,
    cfg: FinetuneConfig,
    train_subjects: set[str] | None = None,
) -> FinetuneResult:
    """Train a task head on frozen embeddings; early stopping on validation
    task loss; emits per-record (or per-patch) predictions on the test split.

    ``train_subjects`` optionally restricts training to a subject subset
    (the few-shot protocols); validation and test splits stay fixed.
    """
    if cfg.task not in TASKS:
        raise ValueError(f"unknown task {cfg.task!r}")
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype()
    data_dir = Path(data_dir)

    train_entries = manifest.by_split("train")
    if train_subjects is not None:
        train_entries = [e for e in train_entries if e.subject_id in train_subjects]
    if not train_entries:
        raise ValueError("no training records after subject filtering")
    val_entries = sorted(manifest.by_split("validation"), key=lambda e: e.record_id)
    val_entries = val_entries[: cfg.val_records]
    test_entries = sorted(manifest.by_split("test"), key=lambda e: e.record_id)

    if backbone is not None:
        backbone = backbone.to(dtype)
        backbone.eval()
    all_entries = train_entries + val_entries + test_entries
    embeddings = embed_entries(method, all_entries, data_dir, backbone, cfg.max_patches)
    labels = load_labels(data_dir, all_entries)

    # Standardize features with train-split statistics: frozen embeddings
    # (especially log-amplitude baselines) are offset and scaled in ways that
    # saturate the head's gates at init.
    stats = np.concatenate([embeddings[e.record_id] for e in train_entries])
    mean = stats.mean(axis=0)
    std = np.maximum(stats.std(axis=0), 1e-6)
    embeddings = {
        rid: ((emb - mean) / std).astype(np.float32) for rid, emb in embeddings.items()
    }

    input_dim = next(iter(embeddings.values())).shape[1]
    head = TaskHead(HeadConfig(task=cfg.task, input_dim=input_dim, seed=cfg.seed)).to(dtype)
    optimizer = torch.optim.Adam(head.parameters(), lr=cfg.lr)

    train_ids = sorted(e.record_id for e in train_entries)
    val_ids = [e.record_id for e in val_entries]
    test_ids = [e.record_id for e in test_entries]

    def _eval_loss(rids: list[str]) -> float:
        losses = []
        head.eval()
        with torch.no_grad():
            for i0 in range(0, len(rids), cfg.batch_size):
                chunk = rids[i0 : i0 + cfg.batch_size]
                batch = _collate(chunk, embeddings, labels, cfg.task, dtype)
                out = head(batch["emb"], batch["valid"])
                losses.append(task_loss(out, batch, cfg.task).item() * len(chunk))
        head.train()
        return sum(losses) / len(rids)

    curve: list[tuple[int, float, str]] = []
    step = 0
    best_val = math.inf
    best_state = copy.deepcopy(head.state_dict())
    bad_evals = 0
    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        order_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(_STREAM_FT_ORDER, epoch))
        )
        order = order_rng.permutation(len(train_ids))
        for i0 in range(0, len(order), cfg.batch_size):
            chunk = [train_ids[i] for i in order[i0 : i0 + cfg.batch_size]]
            batch = _collate(chunk, embeddings, labels, cfg.task, dtype)
            out = head(batch["emb"], batch["valid"])
            loss = task_loss(out, batch, cfg.task)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            curve.append((step, loss.item(), "train"))
        epochs_run = epoch + 1
        if val_ids:
            val = _eval_loss(val_ids)
            curve.append((step, val, "validation"))
            if val < best_val:
                best_val, bad_evals = val, 0
                best_state = copy.deepcopy(head.state_dict())
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    break
        else:
            best_state = copy.deepcopy(head.state_dict())

    head.load_state_dict(best_state)
    head.eval()
    predictions = {}
    with torch.no_grad():
        for i0 in range(0, len(test_ids), cfg.batch_size):
            chunk = test_ids[i0 : i0 + cfg.batch_size]
            batch = _collate(chunk, embeddings, labels, cfg.task, dtype)
            out = predictions_from_output(head(batch["emb"], batch["valid"]), cfg.task)
            for i, rid in enumerate(chunk):
                if cfg.task == "staging":
                    n = embeddings[rid].shape[0]
                    predictions[rid] = out[i, :n]
                else:
                    predictions[rid] = np.atleast_1d(out[i])
    return FinetuneResult(
        head=head,
        predictions=predictions,
        labels={rid: labels[rid] for rid in test_ids},
        loss_curve=curve,
        epochs_run=epochs_run,
        best_val_loss=best_val,
    )


def write_predictions_csv(result: FinetuneResult, task: str, path: Path) -> Path:
    """CSV dump: one row per record (staging: per patch) with score columns."""
    path = Path(path)
    with open(path, "w") as fh:
        if task == "staging":
            fh.write("record_id,task,patch," + ",".join(f"p_stage{k}" for k in range(N_STAGES)) + "\n")
            for rid in sorted(result.predictions):
                for t, row in enumerate(result.predictions[rid]):
                    fh.write(f"{rid},staging,{t}," + ",".join(repr(float(v)) for v in row) + "\n")
        elif task == "survival":
            from .records import OUTCOME_IDS

            fh.write("record_id,task," + ",".join(f"hazard_{o}" for o in OUTCOME_IDS) + "\n")
            for rid in sorted(result.predictions):
                vals = ",".join(repr(float(v)) for v in result.predictions[rid])
                fh.write(f"{rid},survival,{vals}\n")
        else:
            fh.write("record_id,task,score\n")
            for rid in sorted(result.predictions):
                fh.write(f"{rid},{task},{float(result.predictions[rid][0])!r}\n")
    return path

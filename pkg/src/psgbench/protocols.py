"""Task evaluation (with bootstrap CIs) and the two evaluation protocols:
few-shot label efficiency and compute-controlled pretraining budgets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, load_backbone
from .finetune import FinetuneConfig, FinetuneResult, RecordLabels, run_finetune
from .metrics import MetricReport, auroc, auroc_multiclass, bootstrap_ci, c_index, mae_years
from .pretrain import PretrainConfig, run_pretraining
from .records import ManifestEntry, OUTCOME_IDS, RecordManifest, STAGES
from .synth import sample_fewshot_subsets

_STREAM_FT_SEED = 31
_STREAM_SUBSET = 32

DEFAULT_BOOTSTRAP = 1000


def _staging_arrays(result: FinetuneResult):
    rids = sorted(result.predictions)
    preds = np.empty(len(rids), dtype=object)
    stages = np.empty(len(rids), dtype=object)
    for i, rid in enumerate(rids):
        preds[i] = result.predictions[rid]
        stages[i] = result.labels[rid].hypnogram[: result.predictions[rid].shape[0]]
    return preds, stages


def _staging_macro(preds: np.ndarray, stages: np.ndarray) -> float:
    scores = np.concatenate(list(preds), axis=0)
    labels = np.concatenate(list(stages), axis=0)
    macro, _ = auroc_multiclass(scores, labels)
    return macro


def _staging_stage(preds: np.ndarray, stages: np.ndarray, stage: int) -> float:
    scores = np.concatenate(list(preds), axis=0)[:, stage]
    labels = (np.concatenate(list(stages), axis=0) == stage).astype(np.int64)
    return auroc(scores, labels)


def _survival_arrays(result: FinetuneResult):
    rids = sorted(result.predictions)
    hazards = np.stack([result.predictions[rid] for rid in rids])
    events = np.stack([result.labels[rid].events for rid in rids])
    times = np.stack([result.labels[rid].times for rid in rids])
    return hazards, events, times


def _survival_average(hazards: np.ndarray, events: np.ndarray, times: np.ndarray) -> float:
    values = [
        c_index(hazards[:, k], events[:, k], times[:, k]) for k in range(len(OUTCOME_IDS))
    ]
    return float(np.mean(values))


def _record_scalar_arrays(result: FinetuneResult, task: str):
    rids = sorted(result.predictions)
    scores = np.array([float(result.predictions[rid][0]) for rid in rids])
    if task == "apnea":
        target = np.array([result.labels[rid].apnea for rid in rids], dtype=np.int64)
    else:
        target = np.array([result.labels[rid].age_years for rid in rids])
    return scores, target


def primary_metric(task: str, result: FinetuneResult) -> tuple[str, float]:
    """The one headline number per task (no confidence interval)."""
    if task == "staging":
        return "auroc_macro", _staging_macro(*_staging_arrays(result))
    if task == "apnea":
        return "auroc", auroc(*_record_scalar_arrays(result, "apnea"))
    if task == "age":
        return "mae_years", mae_years(*_record_scalar_arrays(result, "age"))
    if task == "survival":
        return "cindex_avg", _survival_average(*_survival_arrays(result))
    raise ValueError(f"unknown task {task!r}")


def evaluate_task(
    task: str,
    method: str,
    result: FinetuneResult,
    n_boot: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
    **meta,
) -> list[MetricReport]:
    """Full evaluation with record-level bootstrap CIs.

    Staging reports the macro AUROC plus one row per stage; survival reports
    the 13 per-outcome C-indices plus their average.
    """
    reports = []

    def _report(metric, value, lo, hi):
        reports.append(
            MetricReport(
                task=task, method=method, metric=metric, value=value,
                ci_low=lo, ci_high=hi, seed=seed, **meta,
            )
        )

    if task == "staging":
        preds, stages = _staging_arrays(result)
        macro = _staging_macro(preds, stages)
        lo, hi = bootstrap_ci(_staging_macro, (preds, stages), n_boot, seed=seed)
        _report("auroc_macro", macro, min(lo, macro), max(hi, macro))
        labels_all = np.concatenate(list(stages), axis=0)
        for k, stage_name in enumerate(STAGES):
            if not np.any(labels_all == k) or np.all(labels_all == k):
                continue
            value = _staging_stage(preds, stages, k)
            lo, hi = bootstrap_ci(
                lambda p, s, _k=k: _staging_stage(p, s, _k), (preds, stages), n_boot, seed=seed
            )
            _report(f"auroc_{stage_name}", value, min(lo, value), max(hi, value))
    elif task in ("apnea", "age"):
        scores, target = _record_scalar_arrays(result, task)
        fn = auroc if task == "apnea" else mae_years
        name = "auroc" if task == "apnea" else "mae_years"
        value = fn(scores, target)
        lo, hi = bootstrap_ci(fn, (scores, target), n_boot, seed=seed)
        _report(name, value, min(lo, value), max(hi, value))
    elif task == "survival":
        hazards, events, times = _survival_arrays(result)
        for k, oid in enumerate(OUTCOME_IDS):
            value = c_index(hazards[:, k], events[:, k], times[:, k])
            lo, hi = bootstrap_ci(
                lambda h, e, t, _k=k: c_index(h[:, _k], e[:, _k], t[:, _k]),
                (hazards, events, times), n_boot, seed=seed,
            )
            _report(f"cindex_{oid}", value, min(lo, value), max(hi, value))
        value = _survival_average(hazards, events, times)
        lo, hi = bootstrap_ci(_survival_average, (hazards, events, times), n_boot, seed=seed)
        _report("cindex_avg", value, min(lo, value), max(hi, value))
    else:
        raise ValueError(f"unknown task {task!r}")
    return reports


# --- protocols ----------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """A method under evaluation: a baseline, or an objective with its
    pretrained checkpoint (``checkpoint`` may be None for protocols that
    pretrain internally)."""

    name: str
    checkpoint: Path | None = None


def _load_method_backbone(spec: MethodSpec) -> Backbone | None:
    if spec.name.startswith("baseline"):
        return None
    if spec.checkpoint is None:
        raise ValueError(f"method {spec.name!r} needs a checkpoint")
    backbone, _ = load_backbone(spec.checkpoint)
    return backbone


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0] % 2**31)


def run_fewshot_protocol(
    methods: list[MethodSpec],
    manifest: RecordManifest,
    data_dir: Path,
    task: str,
    sizes: tuple[int, ...],
    replicates: int,
    seed: int = 0,
    ft_config: FinetuneConfig | None = None,
) -> tuple[list[MetricReport], list[dict]]:
    """Fine-tune every method on every subject subset; evaluate on the fixed
    test split. Returns per-replicate reports plus mean-over-replicates rows.
    """
    subsets = sample_fewshot_subsets(manifest, sizes=tuple(sizes), replicates=replicates, seed=seed)
    base_cfg = ft_config or FinetuneConfig(task=task)
    reports: list[MetricReport] = []
    for spec in methods:
        backbone = _load_method_backbone(spec)
        for subset in subsets:
            size_idx = list(sizes).index(subset.size)
            ft_seed = _derived_seed(seed, _STREAM_FT_SEED, size_idx, subset.replicate)
            cfg = replace(base_cfg, task=task, seed=ft_seed)
            result = run_finetune(
                spec.name, backbone, manifest, data_dir, cfg,
                train_subjects=set(subset.subject_ids),
            )
            metric, value = primary_metric(task, result)
            reports.append(
                MetricReport(
                    task=task, method=spec.name, metric=metric, value=value,
                    subset_size=subset.size, replicate=subset.replicate, seed=ft_seed,
                )
            )
    summary = summarize_over_replicates(reports)
    return reports, summary


def summarize_over_replicates(reports: list[MetricReport]) -> list[dict]:
    """Mean metric per (method, task, metric, subset size), replicates pooled."""
    groups: dict[tuple, list[float]] = {}
    for r in reports:
        groups.setdefault((r.method, r.task, r.metric, r.subset_size), []).append(r.value)
    out = []
    for (method, task, metric, size), values in sorted(groups.items(), key=lambda kv: str(kv[0])):
        out.append(
            {
                "method": method, "task": task, "metric": metric, "subset_size": size,
                "mean_value": float(np.mean(values)), "n_replicates": len(values),
            }
        )
    return out


def filter_train_subjects(manifest: RecordManifest, subjects: set[str]) -> RecordManifest:
    """Restrict the train split to a subject subset; other splits unchanged."""
    entries = [
        e
        for e in manifest.entries
        if e.split != "train" or e.subject_id in subjects
    ]
    return RecordManifest(entries=entries, seed=manifest.seed)


def run_compute_controlled(
    methods: list[str],
    manifest: RecordManifest,
    data_dir: Path,
    backbone_cfg: BackboneConfig,
    epochs: tuple[int, ...] = (1, 4, 16),
    subset_size: int = 64,
    tasks: tuple[str, ...] = ("staging", "apnea", "age", "survival"),
    seed: int = 0,
    pretrain_config: PretrainConfig | None = None,
    ft_config: FinetuneConfig | None = None,
    work_dir: Path | None = None,
) -> list[MetricReport]:
    """Pretrain each objective for each fixed epoch budget on one fixed
    subject subset, then fine-tune on the full train split and evaluate."""
    if not epochs:
        raise ValueError("epochs must be nonempty")
    train_subjects = manifest.subjects("train")
    if subset_size > len(train_subjects):
        raise ValueError(
            f"subset_size {subset_size} exceeds {len(train_subjects)} train subjects"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAM_SUBSET,)))
    chosen = set(
        train_subjects[i] for i in rng.choice(len(train_subjects), subset_size, replace=False)
    )
    pretrain_manifest = filter_train_subjects(manifest, chosen)

    reports: list[MetricReport] = []
    for method in methods:
        if method.startswith("baseline"):
            raise ValueError("baselines have no pretraining; exclude them here")
        for budget in epochs:
            p_seed = _derived_seed(seed, 41, list(methods).index(method), budget)
            p_cfg = replace(
                pretrain_config or PretrainConfig(objective=method),
                objective=method, fixed_epochs=int(budget), seed=p_seed,
            )
            out_dir = None
            if work_dir is not None:
                out_dir = Path(work_dir) / f"{method}_ep{budget}"
            result = run_pretraining(pretrain_manifest, data_dir, backbone_cfg, p_cfg, out_dir)
            for task in tasks:
                ft_seed = _derived_seed(seed, 42, list(methods).index(method), budget)
                cfg = replace(ft_config or FinetuneConfig(task=task), task=task, seed=ft_seed)
                ft = run_finetune(method, result.backbone, manifest, data_dir, cfg)
                metric, value = primary_metric(task, ft)
                reports.append(
                    MetricReport(
                        task=task, method=method, metric=metric, value=value,
                        pretrain_epochs=int(budget), seed=ft_seed,
                    )
                )
    return reports


def write_summary_csv(summary: list[dict], path: Path) -> Path:
    path = Path(path)
    fields = ["method", "task", "metric", "subset_size", "mean_value", "n_replicates"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in summary:
            writer.writerow(
                [repr(row[f]) if isinstance(row[f], float) else row[f] for f in fields]
            )
    return path

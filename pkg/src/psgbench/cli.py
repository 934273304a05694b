"""Command-line entry point: cohort generation, pretraining, fine-tune +
evaluation, and the two protocols. Every command echoes its configuration
into the output directory and is reproducible from (config, seed).

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import backbone as bb
from .finetune import BASELINE_METHODS, FinetuneConfig, TASKS, run_finetune, write_predictions_csv
from .metrics import write_reports_csv, write_reports_json
from .pretrain import OBJECTIVES, PretrainConfig, run_pretraining
from .protocols import (
    MethodSpec,
    evaluate_task,
    run_compute_controlled,
    run_fewshot_protocol,
    summarize_over_replicates,
    write_summary_csv,
)
from .records import read_manifest
from .synth import (
    DEFAULT_FEWSHOT_REPLICATES,
    DEFAULT_FEWSHOT_SIZES,
    DEFAULT_SPLIT_RATIOS,
    SyntheticConfig,
    write_cohort,
)

SCALES = ("desk", "paper")


def _backbone_config(scale: str, seed: int) -> bb.BackboneConfig:
    return bb.desk_config(seed) if scale == "desk" else bb.paper_config(seed)


def _scale_pretrain_defaults(scale: str) -> dict:
    if scale == "paper":
        return {"batch_size": 256, "val_records": 100}
    return {"batch_size": 16, "val_records": 10}


def _scale_finetune_defaults(scale: str) -> dict:
    if scale == "paper":
        return {"batch_size": 8, "val_records": 100}
    return {"batch_size": 8, "val_records": 10}


def _prepare_out_dir(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise RuntimeError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    # The output directory is implied by the echo's own location; keeping it
    # out of the payload lets identical runs produce identical trees.
    payload = {"command": command}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "out"):
            continue
        payload[k] = str(v) if isinstance(v, Path) else v
    with open(Path(out_dir) / "config.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_generate(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    cfg = SyntheticConfig(
        n_subjects=args.subjects,
        duration_s=args.duration_s,
        seed=args.seed,
        records_per_subject=args.records_per_subject,
        apnea_rate_scale=args.apnea_rate_scale,
    )
    cfg.validate()
    manifest = write_cohort(cfg, out, ratios=tuple(args.ratios))
    _echo_config(out, "generate", args)
    sizes = manifest.split_sizes()
    print(f"wrote {len(manifest.entries)} records to {out}")
    for split, n in sizes.items():
        print(f"  {split}: {n}")
    return 0


def cmd_pretrain(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    manifest = read_manifest(args.data)
    backbone_cfg = _backbone_config(args.scale, args.seed)
    defaults = _scale_pretrain_defaults(args.scale)
    cfg = PretrainConfig(
        objective=args.objective,
        seed=args.seed,
        lr=args.lr,
        batch_size=args.batch_size or defaults["batch_size"],
        max_epochs=args.max_epochs,
        fixed_epochs=args.epochs,
        val_records=args.val_records or defaults["val_records"],
    )
    _echo_config(out, "pretrain", args)
    result = run_pretraining(manifest, args.data, backbone_cfg, cfg, out_dir=out)
    print(
        f"objective {args.objective}: {result.epochs_run} epochs, "
        f"best validation loss {result.best_val_loss:.6f}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_finetune_eval(args) -> int:
    if (args.checkpoint is None) == (args.method is None):
        raise RuntimeError("provide exactly one of --checkpoint or --method baseline_*")
    out = _prepare_out_dir(args.out, args.force)
    manifest = read_manifest(args.data)
    if args.method is not None:
        method, backbone = args.method, None
    else:
        backbone, header = bb.load_backbone(args.checkpoint)
        method = header.get("objective") or "unknown"
    defaults = _scale_finetune_defaults(args.scale)
    cfg = FinetuneConfig(
        task=args.task,
        seed=args.seed,
        lr=args.lr,
        batch_size=args.batch_size or defaults["batch_size"],
        max_epochs=args.max_epochs,
        val_records=args.val_records or defaults["val_records"],
    )
    _echo_config(out, "finetune-eval", args)
    result = run_finetune(method, backbone, manifest, args.data, cfg)
    reports = evaluate_task(args.task, method, result, n_boot=args.n_boot, seed=args.seed)
    write_reports_csv(reports, out / "reports.csv")
    write_reports_json(reports, out / "reports.json")
    write_predictions_csv(result, args.task, out / "predictions.csv")
    for r in reports:
        print(f"{r.task}/{r.method} {r.metric} = {r.value:.4f} ({r.ci_low:.4f}-{r.ci_high:.4f})")
    return 0


def _parse_methods(spec: str) -> list[MethodSpec]:
    methods = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" in part:
            name, path = part.split("=", 1)
            methods.append(MethodSpec(name=name, checkpoint=Path(path)))
        else:
            methods.append(MethodSpec(name=part))
    if not methods:
        raise RuntimeError("no methods given")
    for m in methods:
        if m.name not in BASELINE_METHODS and m.name not in OBJECTIVES:
            raise RuntimeError(f"unknown method {m.name!r}")
    return methods


def cmd_protocol_fewshot(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    manifest = read_manifest(args.data)
    methods = _parse_methods(args.methods)
    sizes = tuple(int(s) for s in args.sizes.split(","))
    defaults = _scale_finetune_defaults(args.scale)
    ft_cfg = FinetuneConfig(
        task=args.task,
        batch_size=defaults["batch_size"],
        max_epochs=args.max_epochs,
        val_records=defaults["val_records"],
    )
    _echo_config(out, "protocol-fewshot", args)
    reports, summary = run_fewshot_protocol(
        methods, manifest, args.data, args.task,
        sizes=sizes, replicates=args.replicates, seed=args.seed, ft_config=ft_cfg,
    )
    write_reports_csv(reports, out / "results.csv")
    write_reports_json(reports, out / "results.json")
    write_summary_csv(summary, out / "summary.csv")
    print(f"wrote {len(reports)} result rows to {out / 'results.csv'}")
    return 0


def cmd_protocol_compute(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    manifest = read_manifest(args.data)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in OBJECTIVES:
            raise RuntimeError(f"unknown objective {m!r}; valid: {', '.join(OBJECTIVES)}")
    epochs = tuple(int(e) for e in args.epochs.split(","))
    tasks = tuple(t.strip() for t in args.tasks.split(","))
    for t in tasks:
        if t not in TASKS:
            raise RuntimeError(f"unknown task {t!r}")
    backbone_cfg = _backbone_config(args.scale, args.seed)
    p_defaults = _scale_pretrain_defaults(args.scale)
    f_defaults = _scale_finetune_defaults(args.scale)
    _echo_config(out, "protocol-compute", args)
    reports = run_compute_controlled(
        methods, manifest, args.data, backbone_cfg,
        epochs=epochs, subset_size=args.subset_size, tasks=tasks, seed=args.seed,
        pretrain_config=PretrainConfig(
            objective=methods[0],
            batch_size=p_defaults["batch_size"],
            val_records=p_defaults["val_records"],
        ),
        ft_config=FinetuneConfig(
            task=tasks[0],
            batch_size=f_defaults["batch_size"],
            max_epochs=args.max_epochs,
            val_records=f_defaults["val_records"],
        ),
        work_dir=out / "pretrain",
    )
    write_reports_csv(reports, out / "results.csv")
    write_reports_json(reports, out / "results.json")
    print(f"wrote {len(reports)} result rows to {out / 'results.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psgbench",
        description="Synthetic multimodal PSG pretraining benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    data_default = os.environ.get("PSGBENCH_DATA")

    p = sub.add_parser("generate", help="generate a synthetic cohort")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--duration-s", type=int, default=3600, dest="duration_s")
    p.add_argument("--records-per-subject", type=int, default=1, dest="records_per_subject")
    p.add_argument("--apnea-rate-scale", type=float, default=1.0, dest="apnea_rate_scale")
    p.add_argument("--ratios", type=float, nargs=3, default=list(DEFAULT_SPLIT_RATIOS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pretrain one objective")
    p.add_argument("--data", type=Path, required=data_default is None, default=data_default)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--objective", choices=OBJECTIVES, required=True)
    p.add_argument("--scale", choices=SCALES, default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--epochs", type=int, default=None, help="fixed epoch budget (disables early stopping)")
    p.add_argument("--max-epochs", type=int, default=40, dest="max_epochs")
    p.add_argument("--val-records", type=int, default=None, dest="val_records")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-eval", help="fine-tune a task head and evaluate")
    p.add_argument("--data", type=Path, required=data_default is None, default=data_default)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--method", choices=BASELINE_METHODS, default=None,
                   help="baseline embeddings (no checkpoint needed)")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--scale", choices=SCALES, default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--max-epochs", type=int, default=20, dest="max_epochs")
    p.add_argument("--val-records", type=int, default=None, dest="val_records")
    p.add_argument("--n-boot", type=int, default=1000, dest="n_boot")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_finetune_eval)

    proto = sub.add_parser("protocol", help="run an evaluation protocol")
    proto_sub = proto.add_subparsers(dest="protocol", required=True)

    p = proto_sub.add_parser("fewshot", help="few-shot label efficiency")
    p.add_argument("--data", type=Path, required=data_default is None, default=data_default)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--methods", required=True,
                   help="comma list: objective=checkpoint or baseline name")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--sizes", default=",".join(str(s) for s in DEFAULT_FEWSHOT_SIZES))
    p.add_argument("--replicates", type=int, default=DEFAULT_FEWSHOT_REPLICATES)
    p.add_argument("--scale", choices=SCALES, default="desk")
    p.add_argument("--max-epochs", type=int, default=20, dest="max_epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_protocol_fewshot)

    p = proto_sub.add_parser("compute", help="compute-controlled pretraining budgets")
    p.add_argument("--data", type=Path, required=data_default is None, default=data_default)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--methods", required=True, help="comma list of objectives")
    p.add_argument("--epochs", default="1,4,16")
    p.add_argument("--subset-size", type=int, default=64, dest="subset_size")
    p.add_argument("--tasks", default=",".join(TASKS))
    p.add_argument("--scale", choices=SCALES, default="desk")
    p.add_argument("--max-epochs", type=int, default=20, dest="max_epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_protocol_compute)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate" and args.subjects <= 0:
        parser.error("--subjects must be a positive integer")
    try:
        return args.func(args)
    except Exception as err:  # runtime failure -> exit 1, usage errors exit 2 above
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

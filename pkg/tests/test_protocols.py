import numpy as np
import pytest

from conftest import tiny_backbone_config

from psgbench.backbone import Backbone, save_checkpoint
from psgbench.finetune import FinetuneConfig, run_finetune
from psgbench.metrics import MetricReport
from psgbench.pretrain import PretrainConfig
from psgbench.protocols import (
    MethodSpec,
    evaluate_task,
    filter_train_subjects,
    primary_metric,
    run_compute_controlled,
    run_fewshot_protocol,
    summarize_over_replicates,
    write_summary_csv,
)
from psgbench.records import OUTCOME_IDS, STAGES


@pytest.fixture(scope="module")
def tiny_checkpoint(tiny_cohort, tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    backbone = Backbone(tiny_backbone_config(seed=13))
    return save_checkpoint(root / "cl_pairwise.bin", backbone, objective="cl_pairwise")


def _ft_cfg(task):
    return FinetuneConfig(task=task, max_epochs=2, val_records=1)


@pytest.fixture(scope="module")
def staging_result(tiny_cohort):
    root, manifest = tiny_cohort
    return run_finetune("baseline_freq", None, manifest, root, _ft_cfg("staging"))


class TestEvaluateTask:

    def test_staging_emits_macro_plus_stage_rows(self, staging_result):
        reports = evaluate_task("staging", "baseline_freq", staging_result, n_boot=100, seed=0)
        metrics = [r.metric for r in reports]
        assert metrics[0] == "auroc_macro"
        assert len(reports) == 1 + len([m for m in metrics if m.startswith("auroc_") and m != "auroc_macro"])
        for r in reports:
            assert r.ci_low <= r.value <= r.ci_high

    def test_survival_emits_13_outcomes_plus_average(self, small_survival_cohort):
        root, manifest = small_survival_cohort
        result = run_finetune("baseline_time", None, manifest, root, _ft_cfg("survival"))
        reports = evaluate_task("survival", "baseline_time", result, n_boot=100, seed=0)
        metrics = [r.metric for r in reports]
        assert metrics == [f"cindex_{oid}" for oid in OUTCOME_IDS] + ["cindex_avg"]
        avg = reports[-1]
        assert abs(avg.value - np.mean([r.value for r in reports[:-1]])) < 1e-12

    def test_scalar_tasks_single_row(self, tiny_cohort):
        root, manifest = tiny_cohort
        result = run_finetune("baseline_time", None, manifest, root, _ft_cfg("age"))
        reports = evaluate_task("age", "baseline_time", result, n_boot=100, seed=0)
        assert [r.metric for r in reports] == ["mae_years"]

    def test_primary_metric_names(self, staging_result):
        name, value = primary_metric("staging", staging_result)
        assert name == "auroc_macro"
        assert 0.0 <= value <= 1.0


class TestFewshot:
    def test_row_count_and_determinism(self, tiny_cohort, tiny_checkpoint):
        root, manifest = tiny_cohort
        methods = [
            MethodSpec("baseline_time"),
            MethodSpec("cl_pairwise", checkpoint=tiny_checkpoint),
        ]
        kw = dict(
            manifest=manifest, data_dir=root, task="age", sizes=(1, 2),
            replicates=2, seed=5, ft_config=_ft_cfg("age"),
        )
        reports_a, summary_a = run_fewshot_protocol(methods, **kw)
        reports_b, summary_b = run_fewshot_protocol(methods, **kw)
        assert len(reports_a) == 2 * 2 * 2  # methods x sizes x replicates
        assert reports_a == reports_b
        assert summary_a == summary_b
        assert len(summary_a) == 4  # methods x sizes
        for row in summary_a:
            assert row["n_replicates"] == 2

    def test_summary_means(self):
        reports = [
            MetricReport("age", "m", "mae_years", 4.0, subset_size=1, replicate=0),
            MetricReport("age", "m", "mae_years", 6.0, subset_size=1, replicate=1),
        ]
        summary = summarize_over_replicates(reports)
        assert summary == [
            {
                "method": "m", "task": "age", "metric": "mae_years",
                "subset_size": 1, "mean_value": 5.0, "n_replicates": 2,
            }
        ]

    def test_summary_csv(self, tmp_path):
        rows = summarize_over_replicates(
            [MetricReport("age", "m", "mae_years", 4.0, subset_size=1, replicate=0)]
        )
        path = write_summary_csv(rows, tmp_path / "s.csv")
        assert path.read_text().splitlines()[0] == "method,task,metric,subset_size,mean_value,n_replicates"


class TestComputeControlled:
    def test_grid_and_determinism(self, tiny_cohort):
        root, manifest = tiny_cohort
        kw = dict(
            manifest=manifest, data_dir=root, backbone_cfg=tiny_backbone_config(seed=2),
            epochs=(1, 2), subset_size=3, tasks=("age",), seed=9,
            pretrain_config=PretrainConfig(objective="mae_time_all", batch_size=8, val_records=1),
            ft_config=_ft_cfg("age"),
        )
        reports = run_compute_controlled(["mae_time_all"], **kw)
        assert len(reports) == 1 * 2 * 1  # methods x epochs x tasks
        assert [r.pretrain_epochs for r in reports] == [1, 2]
        again = run_compute_controlled(["mae_time_all"], **kw)
        assert reports == again

    def test_baselines_rejected(self, tiny_cohort):
        root, manifest = tiny_cohort
        with pytest.raises(ValueError, match="baseline"):
            run_compute_controlled(
                ["baseline_time"], manifest, root, tiny_backbone_config(),
                epochs=(1,), subset_size=2, tasks=("age",),
            )

    def test_empty_epochs_rejected(self, tiny_cohort):
        root, manifest = tiny_cohort
        with pytest.raises(ValueError, match="epochs"):
            run_compute_controlled(
                ["mae_time_all"], manifest, root, tiny_backbone_config(),
                epochs=(), subset_size=2, tasks=("age",),
            )

    def test_oversized_subset_rejected(self, tiny_cohort):
        root, manifest = tiny_cohort
        with pytest.raises(ValueError, match="subset_size"):
            run_compute_controlled(
                ["mae_time_all"], manifest, root, tiny_backbone_config(),
                epochs=(1,), subset_size=1000, tasks=("age",),
            )


class TestFilterTrainSubjects:
    def test_only_train_entries_filtered(self, tiny_cohort):
        _, manifest = tiny_cohort
        keep = set(manifest.subjects("train")[:2])
        filtered = filter_train_subjects(manifest, keep)
        assert {e.subject_id for e in filtered.by_split("train")} == keep
        assert filtered.by_split("test") == manifest.by_split("test")
        assert filtered.by_split("validation") == manifest.by_split("validation")

import numpy as np
import pytest
import torch

from psgbench.backbone import Backbone, BackboneConfig
from psgbench.synth import SyntheticConfig, write_cohort


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """Small on-disk cohort for loop and CLI tests: 12 subjects, 10 min
    records (2 segments each), split (9, 1, 2)."""
    root = tmp_path_factory.mktemp("tiny_cohort")
    cfg = SyntheticConfig(n_subjects=12, duration_s=600, seed=123)
    manifest = write_cohort(cfg, root)
    return root, manifest


@pytest.fixture(scope="session")
def small_survival_cohort(tmp_path_factory):
    """Cohort sized so every outcome has comparable pairs in the test split:
    24 subjects, 10 min records, split (18, 2, 4)."""
    root = tmp_path_factory.mktemp("surv_cohort")
    cfg = SyntheticConfig(n_subjects=24, duration_s=600, seed=321)
    manifest = write_cohort(cfg, root)
    return root, manifest


def tiny_backbone_config(seed: int = 0, **overrides) -> BackboneConfig:
    kwargs = dict(d_model=8, n_heads=2, n_layers=1, seed=seed)
    kwargs.update(overrides)
    return BackboneConfig(**kwargs)


@pytest.fixture()
def tiny_backbone():
    return Backbone(tiny_backbone_config(seed=5))


@pytest.fixture()
def tiny_batch():
    """Clean segments [2, 16, 4, 640] float64 for gradient-level tests."""
    rng = np.random.default_rng(99)
    x = rng.standard_normal((2, 16, 4, 640))
    return torch.from_numpy(x)

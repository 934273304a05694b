import numpy as np
import pytest
import torch

from conftest import tiny_backbone_config
from helpers import finite_difference_check

from psgbench.backbone import (
    Backbone,
    BackboneConfig,
    concat_modalities,
    desk_config,
    load_backbone,
    paper_config,
    parameter_count,
    read_checkpoint,
    save_checkpoint,
    sinusoidal_positions,
)
from psgbench.pretrain import ReconstructionDecoder, objective_loss, prepare_batch

# Pinned at paper scale (d_model 128, 8 heads, 6 layers); a change here means
# the architecture changed.
PAPER_SCALE_PARAM_COUNT = 6_156_800


class TestConfig:
    def test_heads_must_divide_d_model(self):
        with pytest.raises(ValueError, match="divisible"):
            BackboneConfig(d_model=30, n_heads=4)

    def test_presets(self):
        assert paper_config().d_model == 128
        assert paper_config().n_layers == 6
        assert desk_config().d_model == 32
        assert desk_config().concat_dim == 128

    def test_reduction_ratios_average_20(self):
        cfg = paper_config()
        ratios = [c * cfg.patch_len / cfg.d_model for c in cfg.modality_channels]
        assert ratios == [40, 25, 5, 10]
        assert np.mean(ratios) == 20.0

    def test_modality_slices_partition_channels(self):
        slices = desk_config().modality_slices()
        assert slices["BAS"] == slice(0, 8)
        assert slices["RESP"] == slice(8, 13)
        assert slices["EKG"] == slice(13, 14)
        assert slices["EMG"] == slice(14, 16)


class TestPositionalEncoding:
    def test_position_zero(self):
        pe = sinusoidal_positions(4, 8)
        np.testing.assert_allclose(pe[0, 0::2], 0.0, atol=1e-12)
        np.testing.assert_allclose(pe[0, 1::2], 1.0, atol=1e-12)

    def test_rows_depend_only_on_position(self):
        a = sinusoidal_positions(60, 16)
        b = sinusoidal_positions(10, 16)
        np.testing.assert_allclose(a[:10], b, atol=1e-12)

    def test_distinct_positions_differ(self):
        pe = sinusoidal_positions(60, 16).numpy()
        for p in range(60):
            for q in range(p + 1, 60):
                assert np.max(np.abs(pe[p] - pe[q])) > 1e-6

    def test_position_cap(self):
        with pytest.raises(ValueError, match="10000"):
            sinusoidal_positions(10_001, 8)


class TestForward:
    def test_output_shapes(self, tiny_backbone, tiny_batch):
        out = tiny_backbone(tiny_batch.to(torch.float32))
        for emb in out.per_modality.values():
            assert emb.shape == (2, 4, 8)
        assert out.concat.shape == (2, 4, 32)

    def test_concat_order_and_width(self, tiny_backbone, tiny_batch):
        out = tiny_backbone(tiny_batch.to(torch.float32))
        torch.testing.assert_close(out.concat[..., 0:8], out.per_modality["BAS"])
        torch.testing.assert_close(out.concat[..., 24:32], out.per_modality["EMG"])

    def test_missing_modality_rejected(self, tiny_backbone, tiny_batch):
        out = tiny_backbone(tiny_batch.to(torch.float32))
        partial = {k: v for k, v in out.per_modality.items() if k != "EKG"}
        with pytest.raises(ValueError, match="EKG"):
            concat_modalities(partial)

    def test_forward_deterministic(self, tiny_backbone, tiny_batch):
        x = tiny_batch.to(torch.float32)
        a = tiny_backbone(x).concat
        b = tiny_backbone(x).concat
        assert torch.equal(a, b)

    def test_zero_input_gives_nonzero_reproducible_output(self, tiny_batch):
        x = torch.zeros(1, 16, 4, 640)
        out1 = Backbone(tiny_backbone_config(seed=3))(x).concat
        out2 = Backbone(tiny_backbone_config(seed=3))(x).concat
        assert torch.equal(out1, out2)
        assert out1.abs().max() > 0

    def test_different_seed_different_params(self):
        a = Backbone(tiny_backbone_config(seed=1))
        b = Backbone(tiny_backbone_config(seed=2))
        diffs = [
            not torch.equal(pa, pb)
            for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
        ]
        assert any(diffs)

    def test_no_cross_example_leakage(self, tiny_backbone, tiny_batch):
        x = tiny_batch.to(torch.float32)
        single = tiny_backbone(x[:1]).concat
        doubled = tiny_backbone(torch.cat([x[:1], x[:1]])).concat
        torch.testing.assert_close(doubled[0], single[0])
        torch.testing.assert_close(doubled[1], single[0])

    def test_batch_permutation_equivariance(self, tiny_backbone, tiny_batch):
        x = tiny_batch.to(torch.float32)
        out = tiny_backbone(x).concat
        flipped = tiny_backbone(x.flip(0)).concat
        torch.testing.assert_close(flipped.flip(0), out)

    def test_attention_rows_sum_to_one(self, tiny_backbone, tiny_batch):
        out = tiny_backbone(tiny_batch.to(torch.float32), return_attn=True)
        for attns in out.attention.values():
            for attn in attns:
                sums = attn.sum(dim=-1)
                torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)

    def test_bad_shape_rejected(self, tiny_backbone):
        with pytest.raises(ValueError, match="expected"):
            tiny_backbone(torch.zeros(2, 15, 4, 640))


class TestMasking:
    def test_fully_masked_patch_hides_content(self, tiny_backbone, tiny_batch):
        """Changing the signal under a fully masked (all-channel) patch must
        not change any embedding."""
        x = tiny_batch.to(torch.float32).clone()
        mask = torch.zeros(2, 16, 4, dtype=torch.bool)
        mask[0, :, 2] = True  # every channel at patch 2 of example 0
        base = tiny_backbone(x, channel_mask=mask).concat
        x2 = x.clone()
        x2[0, :, 2] = 123.0
        again = tiny_backbone(x2, channel_mask=mask).concat
        torch.testing.assert_close(base, again)

    def test_single_channel_modality_uses_mask_token(self, tiny_backbone, tiny_batch):
        """EKG has one channel, so masking it replaces the token entirely;
        the EKG embedding must not depend on the EKG signal at that patch."""
        x = tiny_batch.to(torch.float32).clone()
        mask = torch.zeros(2, 16, 4, dtype=torch.bool)
        mask[:, 13, :] = True  # the EKG channel, every patch
        base = tiny_backbone(x, channel_mask=mask).per_modality["EKG"]
        x2 = x.clone()
        x2[:, 13] = -55.0
        again = tiny_backbone(x2, channel_mask=mask).per_modality["EKG"]
        torch.testing.assert_close(base, again)

    def test_unmasked_forward_matches_none_mask(self, tiny_backbone, tiny_batch):
        x = tiny_batch.to(torch.float32)
        no_mask = tiny_backbone(x).concat
        zero_mask = tiny_backbone(x, channel_mask=torch.zeros(2, 16, 4, dtype=torch.bool)).concat
        torch.testing.assert_close(no_mask, zero_mask)


class TestParameterCount:
    def test_paper_scale_count_pinned(self):
        assert parameter_count(Backbone(paper_config())) == PAPER_SCALE_PARAM_COUNT

    def test_count_stable_across_builds(self):
        a = parameter_count(Backbone(paper_config(seed=0)))
        b = parameter_count(Backbone(paper_config(seed=9)))
        assert a == b


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path, tiny_backbone, tiny_batch):
        path = save_checkpoint(tmp_path / "ck.bin", tiny_backbone, objective="cl_pairwise")
        loaded, header = load_backbone(path)
        assert header["objective"] == "cl_pairwise"
        assert header["seed"] == tiny_backbone.cfg.seed
        for (na, pa), (nb, pb) in zip(
            sorted(tiny_backbone.state_dict().items()), sorted(loaded.state_dict().items())
        ):
            assert na == nb
            assert torch.equal(pa, pb)
        x = tiny_batch.to(torch.float32)
        torch.testing.assert_close(tiny_backbone(x).concat, loaded(x).concat)

    def test_header_lists_all_tensors(self, tmp_path, tiny_backbone):
        path = save_checkpoint(tmp_path / "ck.bin", tiny_backbone)
        header, tensors = read_checkpoint(path)
        assert set(tensors) == set(tiny_backbone.state_dict())
        for t in header["tensors"]:
            assert tensors[t["name"]].shape == tuple(t["shape"])
            assert tensors[t["name"]].dtype == np.float64

    def test_bad_magic_rejected(self, tmp_path):
        bad = tmp_path / "junk.bin"
        bad.write_bytes(b"NOPE1234")
        with pytest.raises(ValueError, match="not a checkpoint"):
            read_checkpoint(bad)

    def test_save_is_deterministic(self, tmp_path, tiny_backbone):
        p1 = save_checkpoint(tmp_path / "a.bin", tiny_backbone, objective="dae_time")
        p2 = save_checkpoint(tmp_path / "b.bin", tiny_backbone, objective="dae_time")
        assert p1.read_bytes() == p2.read_bytes()


class TestGradients:
    def test_constant_loss_zero_gradient(self, tiny_backbone, tiny_batch):
        out = tiny_backbone.double()(tiny_batch)
        loss = (out.concat * 0.0).sum()
        grads = torch.autograd.grad(loss, list(tiny_backbone.parameters()), allow_unused=True)
        for g in grads:
            assert g is None or torch.all(g == 0)

    def test_quadratic_loss_gradient_is_parameter(self, tiny_backbone):
        params = list(tiny_backbone.parameters())[:3]
        loss = sum(0.5 * (p**2).sum() for p in params)
        grads = torch.autograd.grad(loss, params)
        for p, g in zip(params, grads):
            torch.testing.assert_close(g, p)

    def test_mae_time_finite_difference_sanity(self, tiny_batch):
        """Quick FD spot check; the full 12-objective sweep lives in the
        acceptance suite."""
        cfg = tiny_backbone_config(seed=11)
        backbone = Backbone(cfg).double()
        decoder = ReconstructionDecoder(cfg, "time").double()
        rngs = [np.random.default_rng(i) for i in range(2)]
        batch = prepare_batch("mae_time_all", tiny_batch.numpy(), rngs, dtype=torch.float64)

        named = {f"bb.{n}": p for n, p in backbone.named_parameters()}
        named.update({f"dec.{n}": p for n, p in decoder.named_parameters()})
        sample = dict(list(named.items())[::17])  # spot check a spread of tensors

        def loss_fn():
            return objective_loss(
                "mae_time_all", backbone, decoder, batch["x"], batch["channel_mask"]
            )

        worst = finite_difference_check(loss_fn, sample, max_entries_per_tensor=3)
        assert worst <= 1e-4

    def test_nonfinite_loss_identified(self, tiny_backbone, tiny_batch):
        x = tiny_batch.to(torch.float32).clone()
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(FloatingPointError, match="cl_pairwise"):
            objective_loss("cl_pairwise", tiny_backbone, None, x)

import numpy as np
import pytest
import torch

from agegender import network
from agegender.network import (AGE_GROUP, AGE_REG, GENDER, SPEAKER, AgeGenderNet, BlockSpec,
                               EmbedderConfig, QuartzBlock, build_model, count_params, stats_pool)

TINY = EmbedderConfig.scaled(4, 8)


def shape_walk(F, blocks, dense, head_hidden, head_outs):
    """Independent learnable-scalar count for the embedder + heads."""
    total, c = 0, F
    for k, r, residual, width in blocks:
        d = c
        for _ in range(r):
            total += d * k + d * width + 2 * width  # depthwise, pointwise, batch norm
            d = width
        if residual and c != width:
            total += c * width
        c = width
    d = 2 * c
    for width in dense:
        total += d * width + width + 2 * width
        d = width
    for out in head_outs:
        total += d * head_hidden + head_hidden + 2 * head_hidden + head_hidden * out + out
    return total


DEFAULT_TOPOLOGY = [(3, 1, True, 512), (5, 2, True, 512), (7, 2, True, 512), (9, 2, True, 512), (1, 1, False, 1500)]


class TestConfig:
    def test_table_defaults(self):
        cfg = EmbedderConfig()
        assert [(b.kernel, b.repeats, b.residual, b.channels) for b in cfg.blocks] == DEFAULT_TOPOLOGY
        assert cfg.pooled_dim == 3000
        assert cfg.embed_dim == 512

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            EmbedderConfig(blocks=(BlockSpec(4, 1, True, 8),))

    def test_dict_round_trip(self):
        cfg = EmbedderConfig.scaled(64, 32)
        assert EmbedderConfig.from_dict(cfg.to_dict()) == cfg
        assert EmbedderConfig.from_dict(cfg.to_dict()).config_hash() == cfg.config_hash()
        assert cfg.config_hash() != EmbedderConfig.scaled(30, 32).config_hash()


class TestCountParams:
    def test_dense_layer(self):
        assert sum(p.numel() for p in torch.nn.Linear(512, 512).parameters()) == 262_656

    @pytest.mark.parametrize("F", [30, 64])
    def test_full_model_matches_shape_walk(self, F):
        cfg = EmbedderConfig(input_dim=F)
        assert count_params(cfg) == shape_walk(F, DEFAULT_TOPOLOGY, (512, 512), 512, (1, 8, 1))

    def test_pinned_values(self):
        # frozen after the shape-walk oracle agreed on first build
        assert count_params(EmbedderConfig(input_dim=30)) == 5_001_244
        embedder_only = sum(p.numel() for p in AgeGenderNet(EmbedderConfig(input_dim=30)).embedder.parameters())
        assert embedder_only == 4_205_074
        assert count_params(EmbedderConfig(input_dim=64)) == 5_036_162

    def test_pooling_is_parameter_free(self):
        # a k=1 final block straight into pooling: the pool adds nothing
        cfg = EmbedderConfig(4, (BlockSpec(1, 1, False, 6),), (5,), 5)
        assert count_params(cfg, heads=()) == shape_walk(4, [(1, 1, False, 6)], (5,), 5, ())

    def test_speaker_head(self):
        base = count_params(TINY, heads=())
        assert count_params(TINY, heads=(SPEAKER,), num_speakers=10) == base + 8 * 10 + 10

    def test_identity_residual_has_no_projection(self):
        block = QuartzBlock(512, BlockSpec(5, 2, True, 512))
        assert block.project is None
        assert QuartzBlock(30, BlockSpec(3, 1, True, 512)).project is not None


class TestStatsPool:
    def test_two_pass_oracle(self, rng):
        x = rng.standard_normal((3, 7, 50))
        got = stats_pool(torch.from_numpy(x)).numpy()
        mean = x.sum(axis=-1) / 50
        var = ((x - mean[..., None]) ** 2).sum(axis=-1) / 50  # population convention
        np.testing.assert_allclose(got[:, :7], mean, atol=1e-6)
        np.testing.assert_allclose(got[:, 7:], np.sqrt(var + 1e-9), atol=1e-6)

    def test_constant_frames(self):
        c = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64)
        got = stats_pool(c[None, :, None].expand(1, 3, 20))
        np.testing.assert_allclose(got[0, :3], c, atol=1e-12)
        np.testing.assert_allclose(got[0, 3:], 0.0, atol=1e-4)  # sqrt(1e-9) guard

    def test_permutation_invariant(self, rng):
        x = torch.from_numpy(rng.standard_normal((2, 4, 30)))
        perm = torch.from_numpy(rng.permutation(30))
        np.testing.assert_allclose(stats_pool(x), stats_pool(x[..., perm]), atol=1e-12)


class TestEmbed:
    @pytest.mark.parametrize("T", [50, 200, 498])
    def test_fixed_size(self, T, rng):
        model = build_model(EmbedderConfig.scaled(30, 16), seed=0)
        out = network.embed(rng.standard_normal((T, 30)), model)
        assert out.shape == (16,)

    def test_full_size_embedding(self, rng):
        model = build_model(EmbedderConfig(input_dim=30), seed=0)
        for T in (50, 498):
            assert network.embed(rng.standard_normal((T, 30)).astype(np.float32), model).shape == (512,)

    def test_extreme_inputs_stay_finite(self, rng):
        model = build_model(EmbedderConfig.scaled(30, 16), seed=1).double()
        for scale in (1e3, -1e3):
            x = torch.from_numpy(scale * np.sign(rng.standard_normal((4, 60, 30))))
            model.train()
            assert torch.isfinite(model.embedder(x)).all()
            model.eval()
            assert torch.isfinite(model.embedder(x)).all()

    def test_wrong_feature_dim(self):
        model = build_model(TINY, seed=0)
        with pytest.raises(ValueError, match="expected \\(batch, time, 4\\)"):
            model(torch.zeros(2, 10, 5))

    def test_time_length_preserved_by_blocks(self, rng):
        model = build_model(TINY, seed=0)
        model.eval()
        x = torch.from_numpy(rng.standard_normal((2, 13, 4)).astype(np.float32))
        assert model.embedder.frame_level(x).shape == (2, 8, 13)


class TestQuartzBlock:
    def test_pointwise_only_matches_matmul(self, rng):
        block = QuartzBlock(5, BlockSpec(1, 1, False, 7)).double().eval()
        w = torch.from_numpy(rng.standard_normal((7, 5, 1)))
        with torch.no_grad():
            block.units[0].depthwise.weight.fill_(1.0)
            block.units[0].pointwise.weight.copy_(w)
        x = rng.standard_normal((2, 5, 9))
        got = block(torch.from_numpy(x)).detach().numpy()
        # inference BN with fresh running stats (0, 1) only rescales by 1/sqrt(1 + eps)
        want = np.maximum(0.0, np.einsum("oi,bit->bot", w[..., 0].numpy(), x) / np.sqrt(1 + 1e-5))
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_identity_residual_composition(self, rng):
        block = QuartzBlock(4, BlockSpec(3, 1, True, 4)).double().eval()
        with torch.no_grad():
            dw = block.units[0].depthwise.weight
            dw.zero_()
            dw[:, 0, 1] = 1.0  # centre tap: identity depthwise
            block.units[0].pointwise.weight.copy_(torch.eye(4)[..., None])
        x = torch.from_numpy(rng.standard_normal((1, 4, 11)))
        got = block(x)
        want = torch.relu(x / np.sqrt(1 + 1e-5) + x)
        assert got.shape == x.shape
        np.testing.assert_allclose(got.detach(), want, atol=1e-9)

    @staticmethod
    def _two_unit_block(first, second):
        block = QuartzBlock(3, BlockSpec(3, 2, True, 3)).double().eval()
        with torch.no_grad():
            for u, gain in zip(block.units, (first, second)):
                u.depthwise.weight.zero_()
                u.depthwise.weight[:, 0, 1] = 1.0
                u.pointwise.weight.copy_(gain * torch.eye(3)[..., None])
        return block

    def test_relu_between_subunits(self):
        block = self._two_unit_block(-1.0, -1.0)
        x = torch.ones(1, 3, 5, dtype=torch.float64)
        # -x is clipped to 0 before the second unit, leaving only the skip path
        np.testing.assert_allclose(block(x).detach(), 1.0, atol=1e-12)

    def test_residual_added_before_final_relu(self):
        block = self._two_unit_block(1.0, -2.0)
        x = torch.ones(1, 3, 5, dtype=torch.float64)
        # main path gives about -2, plus skip 1, then ReLU -> 0; a ReLU on the
        # main path before the sum would give 1 instead
        np.testing.assert_allclose(block(x).detach(), 0.0, atol=1e-12)


class TestBatchNormInference:
    def test_identity_up_to_affine(self, rng):
        bn = torch.nn.BatchNorm1d(6, momentum=network.BN_MOMENTUM).double().eval()
        with torch.no_grad():
            bn.weight.copy_(torch.from_numpy(rng.uniform(0.5, 2, 6)))
            bn.bias.copy_(torch.from_numpy(rng.standard_normal(6)))
        x = torch.from_numpy(rng.standard_normal((10, 6)))
        want = x / np.sqrt(1 + bn.eps) * bn.weight + bn.bias
        np.testing.assert_allclose(bn(x).detach(), want.detach(), atol=1e-12)


class TestHeads:
    def test_softmax_sums_to_one(self, rng):
        model = build_model(TINY, seed=3).eval()
        emb = torch.from_numpy(rng.standard_normal((5, 8)).astype(np.float32))
        probs = model.head_forward(emb, AGE_GROUP)
        assert probs.shape == (5, 8)
        np.testing.assert_allclose(probs.sum(-1).detach(), 1.0, atol=1e-6)

    def test_zero_sigmoid_head(self, rng):
        model = build_model(TINY, seed=3).eval()
        with torch.no_grad():
            model.heads[GENDER].out.weight.zero_()
            model.heads[GENDER].out.bias.zero_()
        emb = torch.from_numpy(rng.standard_normal((3, 8)).astype(np.float32))
        np.testing.assert_array_equal(model.head_forward(emb, GENDER).detach(), 0.5)

    def test_regressor_bias(self, rng):
        model = build_model(TINY, seed=3).eval()
        with torch.no_grad():
            model.heads[AGE_REG].out.weight.zero_()
            model.heads[AGE_REG].out.bias.fill_(42.5)
        emb = torch.from_numpy(rng.standard_normal((3, 8)).astype(np.float32))
        np.testing.assert_array_equal(model.head_forward(emb, AGE_REG).detach(), 42.5)

    def test_inactive_head(self):
        model = build_model(TINY, heads=(SPEAKER,), num_speakers=3)
        with pytest.raises(KeyError, match="not active"):
            model.head_forward(torch.zeros(2, 8), GENDER)

    def test_speaker_head_exclusive(self):
        with pytest.raises(ValueError, match="cannot share"):
            AgeGenderNet(TINY, heads=(SPEAKER, GENDER), num_speakers=3)

    def test_output_shapes(self, rng):
        model = build_model(TINY, seed=0)
        out = model(torch.from_numpy(rng.standard_normal((3, 12, 4)).astype(np.float32)))
        assert out[GENDER].shape == (3,)
        assert out[AGE_GROUP].shape == (3, 8)
        assert out[AGE_REG].shape == (3,)


class TestInit:
    def test_deterministic(self):
        a = build_model(TINY, seed=9).state_dict()
        b = build_model(TINY, seed=9).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        c = build_model(TINY, seed=10).state_dict()
        assert not all(torch.equal(a[k], c[k]) for k in a)

    def test_batchnorm_and_bias(self):
        model = build_model(TINY, seed=0)
        for name, p in model.named_parameters():
            if ".bn." in name and name.endswith("weight"):
                assert torch.all(p == 1.0), name
            elif name.endswith("bias"):
                assert torch.all(p == 0.0), name

    def test_weight_moments(self):
        model = build_model(EmbedderConfig(input_dim=30), seed=0)
        w = model.embedder.dense[0]["linear"].weight.detach().double().numpy().ravel()
        assert w.size >= 100_000
        bound = 1 / np.sqrt(3000)
        sigma = bound / np.sqrt(3)  # std of U(-b, b)
        assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
        assert np.abs(w).max() <= bound
        assert w.std() == pytest.approx(sigma, rel=0.01)

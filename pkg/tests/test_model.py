"""Model assembly: tokenization arithmetic, block identities, class-token
isolation, FFN-variant equivalence, locality footprint, parameter counts."""

import numpy as np
import pytest

import lnl.tensor as T
from lnl.gradcheck import check_named_gradients
from lnl.model import (
    CONFIGS,
    LnlConfig,
    LnlModel,
    LocallyFeedForward,
    OuterBlock,
    build_model,
    load_checkpoint,
    locally_ff_forward,
    param_count,
    save_checkpoint,
)
from lnl.nn import Linear, cross_entropy
from lnl.tensor import ShapeError, Tensor


def rng_(seed=0):
    return np.random.default_rng(seed)


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[:] = 0.0


class TestConfig:
    def test_patch_word_arithmetic_224(self):
        cfg = CONFIGS["ti"]()
        assert cfg.patch_count == 196 and cfg.words_per_patch == 16

    def test_patch_word_arithmetic_32(self):
        cfg = CONFIGS["micro"]()
        assert cfg.patch_count == 16 and cfg.words_per_patch == 4

    def test_indivisible_image_rejected(self):
        with pytest.raises(ValueError):
            LnlConfig(image_size=30, patch_size=16, word_size=4, word_dim=8,
                      sentence_dim=16, depth=1, inner_heads=2, outer_heads=2)

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            LnlConfig(image_size=32, patch_size=8, word_size=4, word_dim=8,
                      sentence_dim=15, depth=1, inner_heads=2, outer_heads=2)

    def test_kv_roundtrip(self):
        cfg = CONFIGS["micro"](ffn_variant="mlp", moex_enabled=True, moex_lambda=0.8)
        back = LnlConfig.from_kv(cfg.to_kv())
        assert back == cfg


class TestTokenize:
    def test_shapes_and_class_token(self):
        cfg = CONFIGS["micro"]()
        model = build_model(cfg, seed=0)
        img = Tensor(rng_(1).uniform(0, 1, size=(2, 3, 32, 32)))
        state = model.tokenize(img)
        assert state.words.shape == (2, 16, 4, cfg.word_dim)
        assert state.sentences.shape == (2, 17, cfg.sentence_dim)

    def test_wrong_size_rejected(self):
        model = build_model(CONFIGS["micro"](), seed=0)
        with pytest.raises(ShapeError):
            model.tokenize(Tensor(np.zeros((1, 3, 30, 30))))

    def test_patch_pixel_routing(self):
        # light up one pixel; only the containing patch/word sees it
        cfg = CONFIGS["micro"]()
        model = build_model(cfg, seed=0)
        base = np.zeros((1, 3, 32, 32))
        hot = base.copy()
        hot[0, :, 13, 22] = 1.0  # patch (1, 2); within-patch (5, 6) -> word (1, 1)
        s0 = model.tokenize(Tensor(base))
        s1 = model.tokenize(Tensor(hot))
        dw = np.abs(s1.words.data - s0.words.data).sum(axis=-1)[0]  # (n, m)
        patch_idx = 1 * 4 + 2
        word_idx = 1 * 2 + 1
        assert set(zip(*np.nonzero(dw))) == {(patch_idx, word_idx)}
        dz = np.abs(s1.sentences.data - s0.sentences.data).sum(axis=-1)[0]
        assert set(np.nonzero(dz)[0]) == {patch_idx + 1}  # +1 for class token


class TestInnerBlock:
    def test_zero_branches_identity(self):
        cfg = CONFIGS["micro"]()
        layer = build_model(cfg, seed=0).layers[0]
        zero_params(layer.inner)
        y = Tensor(rng_(2).normal(size=(8, 4, cfg.word_dim)))
        out, _ = layer.inner.forward(y)
        np.testing.assert_array_equal(out.data, y.data)

    def test_shape_preserved_and_grad_flows(self):
        cfg = CONFIGS["micro"]()
        layer = build_model(cfg, seed=3).layers[0]
        y = Tensor(rng_(4).normal(size=(8, 4, cfg.word_dim)), requires_grad=True)
        out, _ = layer.inner.forward(y)
        assert out.shape == y.shape
        T.reduce_sum(T.mul(out, out)).backward()
        assert np.abs(y.grad).max() > 0


class TestInject:
    def test_zero_projection_leaves_z(self):
        cfg = CONFIGS["micro"]()
        model = build_model(cfg, seed=5)
        proj = model.layers[0].inject
        proj.weight.data[:] = 0.0
        proj.bias.data[:] = 0.0
        z = Tensor(rng_(6).normal(size=(2, 17, cfg.sentence_dim)))
        y = Tensor(rng_(7).normal(size=(2, 16, 4, cfg.word_dim)))
        out = LnlModel.inject_words(proj, z, y)
        np.testing.assert_array_equal(out.data, z.data)

    def test_class_row_untouched_random_weights(self):
        cfg = CONFIGS["micro"]()
        model = build_model(cfg, seed=8)
        proj = model.layers[0].inject
        proj.weight.data = rng_(8).normal(size=proj.weight.shape)
        z = Tensor(rng_(9).normal(size=(2, 17, cfg.sentence_dim)))
        y = Tensor(rng_(10).normal(size=(2, 16, 4, cfg.word_dim)))
        out = LnlModel.inject_words(proj, z, y)
        assert (out.data[:, 0] == z.data[:, 0]).all()
        assert np.abs(out.data[:, 1:] - z.data[:, 1:]).max() > 0

    def test_projection_dims(self):
        cfg = CONFIGS["micro"]()
        proj = build_model(cfg, seed=0).layers[0].inject
        assert proj.in_dim == cfg.words_per_patch * cfg.word_dim
        assert proj.out_dim == cfg.sentence_dim


class TestOuterBlock:
    def test_zero_branches_identity_both_variants(self):
        for variant in ("mlp", "locally_ff"):
            cfg = CONFIGS["micro"](ffn_variant=variant)
            block = OuterBlock(cfg, rng_(11))
            zero_params(block)
            z = Tensor(rng_(12).normal(size=(2, 17, cfg.sentence_dim)))
            out, _ = block.forward(z)
            np.testing.assert_array_equal(out.data, z.data)

    def test_variant_toggle_changes_only_ffn(self):
        # same attention weights produce bit-identical attention maps
        cfg_m = CONFIGS["micro"](ffn_variant="mlp")
        cfg_l = CONFIGS["micro"](ffn_variant="locally_ff")
        bm = OuterBlock(cfg_m, rng_(13))
        bl = OuterBlock(cfg_l, rng_(13))
        for (n1, p1), (n2, p2) in zip(
            list(bm.norm1.named_parameters()) + list(bm.msa.named_parameters()),
            list(bl.norm1.named_parameters()) + list(bl.msa.named_parameters()),
        ):
            p2.data = p1.data.copy()
        z = Tensor(rng_(14).normal(size=(2, 17, cfg_m.sentence_dim)))
        _, attn_m = bm.forward(z)
        _, attn_l = bl.forward(z)
        assert (attn_m.data == attn_l.data).all()

    def test_attention_retained_per_layer(self):
        model = build_model(CONFIGS["micro"](), seed=15)
        img = Tensor(rng_(16).uniform(0, 1, size=(1, 3, 32, 32)))
        res = model.forward(img)
        assert len(res.outer_attention) == model.cfg.depth
        for attn in res.outer_attention:
            assert attn.shape == (1, model.cfg.outer_heads, 17, 17)


def _share_ffn_weights(loc: LocallyFeedForward, mlp):
    loc.expand.weight.data = mlp.fc1.weight.data.copy()
    loc.expand.bias.data = mlp.fc1.bias.data.copy()
    loc.shrink.weight.data = mlp.fc2.weight.data.copy()
    loc.shrink.bias.data = mlp.fc2.bias.data.copy()
    loc.conv.kernel.data[:] = 0.0
    center = loc.conv.kernel_size // 2
    loc.conv.kernel.data[:, 0, center, center] = 1.0


class TestLocallyFeedForward:
    def test_identity_kernel_degenerates_to_mlp(self):
        cfg_l = CONFIGS["micro"](ffn_variant="locally_ff")
        cfg_m = CONFIGS["micro"](ffn_variant="mlp")
        bl = OuterBlock(cfg_l, rng_(17))
        bm = OuterBlock(cfg_m, rng_(17))
        for (_, p1), (_, p2) in zip(
            list(bm.norm1.named_parameters()) + list(bm.msa.named_parameters())
            + list(bm.norm2.named_parameters()),
            list(bl.norm1.named_parameters()) + list(bl.msa.named_parameters())
            + list(bl.norm2.named_parameters()),
        ):
            p2.data = p1.data.copy()
        _share_ffn_weights(bl.ffn, bm.ffn)
        z = Tensor(rng_(18).normal(size=(2, 17, cfg_l.sentence_dim)))
        out_l, _ = bl.forward(z)
        out_m, _ = bm.forward(z)
        # patch rows coincide; the class row differs by design (it bypasses
        # the local feed-forward entirely)
        np.testing.assert_allclose(out_l.data[:, 1:], out_m.data[:, 1:], atol=1e-12)

    def test_class_token_row_invariant(self):
        cfg = CONFIGS["micro"]()
        loc = LocallyFeedForward(cfg.sentence_dim, cfg.ffn_ratio, cfg.dw_kernel, rng_(19))
        z = Tensor(rng_(20).normal(size=(2, 17, cfg.sentence_dim)))
        out = locally_ff_forward(loc, z)
        assert out.shape == z.shape
        assert (out.data[:, 0] == z.data[:, 0]).all()

    def test_locality_footprint_is_kxk(self):
        # zeroed attention leaves only the conv as a mixing path
        cfg = CONFIGS["micro"](ffn_variant="locally_ff")
        block = OuterBlock(cfg, rng_(21))
        zero_params(block.msa)
        side = 4
        z = rng_(22).normal(size=(1, 17, cfg.sentence_dim))
        base, _ = block.forward(Tensor(z))
        for (pr, pc) in [(0, 0), (1, 2), (3, 3)]:
            token = pr * side + pc
            zp = z.copy()
            zp[0, 1 + token] = 0.0
            out, _ = block.forward(Tensor(zp))
            delta = np.abs(out.data - base.data)[0].sum(axis=-1)
            changed = set(np.nonzero(delta[1:])[0])
            expected = {
                r * side + c
                for r in range(max(0, pr - 1), min(side, pr + 2))
                for c in range(max(0, pc - 1), min(side, pc + 2))
            }
            assert changed == expected
            assert delta[0] == 0.0  # class row untouched

    def test_non_square_token_count_rejected(self):
        loc = LocallyFeedForward(8, 2, 3, rng_(23))
        with pytest.raises(ShapeError):
            loc.forward(Tensor(np.zeros((1, 5, 8))))


class TestFullForward:
    def test_logit_shapes_per_dataset_class_counts(self):
        for classes in (43, 10):
            model = build_model(CONFIGS["micro"](num_classes=classes), seed=24)
            img = Tensor(rng_(25).uniform(0, 1, size=(2, 3, 32, 32)))
            assert model.forward(img).logits.shape == (2, classes)

    def test_eval_forward_deterministic_bits(self):
        model = build_model(CONFIGS["micro"](), seed=26)
        img = Tensor(rng_(27).uniform(0, 1, size=(2, 3, 32, 32)))
        a = model.forward(img).logits.data
        b = model.forward(img).logits.data
        assert (a == b).all()

    def test_backbone_identity_with_all_layers_zeroed(self):
        cfg = CONFIGS["micro"]()
        model = build_model(cfg, seed=28)
        for layer in model.layers:
            zero_params(layer)
        img = Tensor(rng_(29).uniform(0, 1, size=(1, 3, 32, 32)))
        state = model.tokenize(img)
        y, z = state.words, state.sentences
        b, n, m, c = y.shape
        for layer in model.layers:
            flat = T.reshape(y, (b * n, m, c))
            flat, _ = layer.inner.forward(flat)
            y = T.reshape(flat, (b, n, m, c))
            z = LnlModel.inject_words(layer.inject, z, y)
            z, _ = layer.outer.forward(z)
        np.testing.assert_array_equal(y.data, state.words.data)
        np.testing.assert_array_equal(z.data, state.sentences.data)


class TestParamCount:
    def test_single_linear(self):
        assert Linear(10, 10, rng_(30)).param_count() == 110

    def test_ti_within_10pct_of_6_1m(self):
        count = param_count(CONFIGS["ti"]())
        assert abs(count - 6.1e6) / 6.1e6 < 0.10, f"LNL-Ti params {count}"

    def test_s_within_10pct_of_23_8m(self):
        count = param_count(CONFIGS["s"]())
        assert abs(count - 23.8e6) / 23.8e6 < 0.10, f"LNL-S params {count}"


class TestEndToEndGradients:
    def test_micro_model_matches_finite_differences(self):
        cfg = CONFIGS["gradcheck-micro"]()
        model = build_model(cfg, seed=31)
        rng = rng_(32)
        img = Tensor(rng.uniform(0.2, 0.8, size=(2, 3, 16, 16)), requires_grad=True)
        labels = np.array([0, 2])

        def loss_fn():
            return cross_entropy(model.forward(img).logits, labels)

        tensors = {"input": img}
        tensors.update(dict(model.named_parameters()))
        errors = check_named_gradients(
            tensors, loss_fn, h=1e-4, rtol=1e-3, sample=6, rng=rng_(33)
        )
        assert max(errors.values()) <= 1e-3


class TestCheckpoint:
    def test_roundtrip_bits_and_config(self, tmp_path):
        cfg = CONFIGS["micro"](ffn_variant="locally_ff", moex_lambda=0.8)
        model = build_model(cfg, seed=34)
        img = Tensor(rng_(35).uniform(0, 1, size=(2, 3, 32, 32)))
        before = model.forward(img).logits.data
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.cfg == cfg
        after = loaded.forward(img).logits.data
        assert (before == after).all()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(str(path))

import numpy as np
import pytest

from crossvit import interp
from crossvit import tensor as T
from crossvit.config import BranchConfig, FusionScheme, ModelConfig
from crossvit.fusion import (
    ProjectionPair,
    SumParams,
    attention_entries,
    cls_surrogate,
    cross_attention,
    fuse,
    fuse_all_attention,
    fuse_class_token,
    fuse_cross_attention,
    fuse_pairwise,
    init_fusion,
)
from crossvit.layers import Init, TokenSequence
from crossvit.tensor import Tensor

import oracles
from helpers import direction_arrays, random_cross_case, random_direction, random_sequence, raw

IDENTITY = SumParams(ProjectionPair(None, None), ProjectionPair(None, None))


def _config(cl, hl, cs, hs, scheme, base=16, pl=4, ps=2):
    return ModelConfig(
        large=BranchConfig(patch_size=pl, embed_dim=cl, blocks=1, heads=hl),
        small=BranchConfig(patch_size=ps, embed_dim=cs, blocks=1, heads=hs),
        encoders=1,
        fusion=scheme,
        num_classes=3,
        base_input_side=base,
    )


def _pair_apply(pair, x, back=False):
    lin = raw(pair.g if back else pair.f)
    return oracles.affine(x, lin)


class TestAllAttention:
    def test_zero_attention_is_residual_only(self, rng):
        cfg = _config(8, 2, 4, 1, FusionScheme.ALL_ATTENTION)
        p = init_fusion(Init(rng, 0.3), cfg)
        p.attn.proj.weight = Tensor(np.zeros_like(p.attn.proj.weight.data))
        xl, xs = random_sequence(rng, 2, (4, 4), 8), random_sequence(rng, 2, (8, 8), 4)
        zl, zs = fuse_all_attention(xl, xs, p)
        assert zl.tokens.shape == xl.tokens.shape and zs.tokens.shape == xs.tokens.shape
        np.testing.assert_allclose(zl.tokens.data, xl.tokens.data, atol=1e-12)  # shared width is C_l: f, g identity
        expected = _pair_apply(p.proj_s, _pair_apply(p.proj_s, xs.tokens.data), back=True)
        np.testing.assert_allclose(zs.tokens.data, expected, atol=1e-12)

    def test_matches_joint_self_attention(self, rng):
        cfg = _config(6, 3, 6, 2, FusionScheme.ALL_ATTENTION)
        p = init_fusion(Init(rng, 0.3), cfg)
        xl, xs = random_sequence(rng, 1, (2, 2), 6), random_sequence(rng, 1, (3, 3), 6)
        zl, zs = fuse_all_attention(xl, xs, p)
        y = np.concatenate([xl.tokens.data[0], xs.tokens.data[0]])
        a = p.attn
        o = y + oracles.self_attention(
            oracles.layer_norm(y, p.norm.gamma.data, p.norm.beta.data),
            a.wq.data, a.wk.data, a.wv.data, a.proj.weight.data, a.proj.bias.data, a.heads,
        )
        np.testing.assert_allclose(zl.tokens.data[0], o[:5], atol=1e-12)
        np.testing.assert_allclose(zs.tokens.data[0], o[5:], atol=1e-12)

    def test_entry_count(self):
        assert attention_entries(FusionScheme.ALL_ATTENTION, 196, 400, 1, 1, 1) == 598**2 == 357_604


class TestClassToken:
    def test_identity_sum(self, rng):
        xl, xs = random_sequence(rng, 2, (2, 2), 5), random_sequence(rng, 2, (4, 4), 5)
        zl, zs = fuse_class_token(xl, xs, IDENTITY)
        total = xl.cls.data + xs.cls.data
        np.testing.assert_array_equal(zl.cls.data, total)
        np.testing.assert_array_equal(zs.cls.data, total)

    def test_patches_pass_through(self, rng):
        cfg = _config(8, 2, 4, 1, FusionScheme.CLASS_TOKEN)
        p = init_fusion(Init(rng), cfg)
        xl, xs = random_sequence(rng, 3, (4, 4), 8), random_sequence(rng, 3, (8, 8), 4)
        zl, zs = fuse_class_token(xl, xs, p)
        assert zl.patch.data.tobytes() == xl.patch.data.tobytes()
        assert zs.patch.data.tobytes() == xs.patch.data.tobytes()

    def test_zero_cls_on_one_branch(self, rng):
        cfg = _config(8, 2, 4, 1, FusionScheme.CLASS_TOKEN)
        p = init_fusion(Init(rng, 0.3), cfg)
        xl, xs = random_sequence(rng, 1, (4, 4), 8), random_sequence(rng, 1, (8, 8), 4)
        tokens = xs.tokens.data.copy()
        tokens[:, 0] = 0.0
        xs = TokenSequence(Tensor(tokens), xs.grid)
        zl, zs = fuse_class_token(xl, xs, p)
        f_s_zero = p.proj_s.f.bias.data  # f_s(0) is just its bias
        np.testing.assert_allclose(zl.cls.data[0, 0], xl.cls.data[0, 0] + f_s_zero, atol=1e-12)
        np.testing.assert_allclose(zs.cls.data[0], _pair_apply(p.proj_s, xl.cls.data[0] + f_s_zero, back=True), atol=1e-12)

    def test_no_cls_uses_patch_mean(self, rng):
        xl, xs = random_sequence(rng, 1, (2, 2), 3), random_sequence(rng, 1, (3, 3), 3)
        zl, _ = fuse_class_token(xl, xs, IDENTITY, no_cls=True)
        expected = xl.patch.data.mean(axis=1) + xs.patch.data.mean(axis=1)
        np.testing.assert_allclose(zl.cls.data[:, 0], expected, atol=1e-14)


class TestPairwise:
    def test_identity_sum_on_equal_grids(self, rng):
        xl, xs = random_sequence(rng, 2, (3, 3), 4), random_sequence(rng, 2, (3, 3), 4)
        zl, zs = fuse_pairwise(xl, xs, IDENTITY)
        np.testing.assert_array_equal(zl.patch.data, xl.patch.data + xs.patch.data)
        np.testing.assert_array_equal(zs.patch.data, xl.patch.data + xs.patch.data)

    def test_constant_field_survives_resize(self):
        xl = TokenSequence(Tensor(np.zeros((1, 1 + 16, 2))), (4, 4))
        xs = TokenSequence(Tensor(np.full((1, 1 + 64, 2), 1.25)), (8, 8))
        zl, _ = fuse_pairwise(xl, xs, IDENTITY)
        np.testing.assert_allclose(zl.patch.data, 1.25, atol=1e-12)

    def test_bilinear_oracle_20_to_14(self, rng):
        field = rng.standard_normal((20, 20, 3))
        tokens = Tensor(field.reshape(1, 400, 3))
        out = interp.resize_tokens(tokens, (20, 20), (14, 14), "bilinear").data.reshape(14, 14, 3)
        for ch in range(3):
            np.testing.assert_allclose(out[..., ch], oracles.bilinear_resize(field[..., ch], 14, 14), atol=1e-9)

    def test_mixed_widths_match_manual(self, rng):
        cfg = _config(8, 2, 4, 1, FusionScheme.PAIRWISE)
        p = init_fusion(Init(rng, 0.3), cfg)
        xl, xs = random_sequence(rng, 1, (2, 2), 8), random_sequence(rng, 1, (4, 4), 4)
        zl, zs = fuse_pairwise(xl, xs, p)
        lp, sp = xl.patch.data[0], xs.patch.data[0]
        s_on_l = np.stack([oracles.bilinear_resize(sp.reshape(4, 4, 4)[..., c], 2, 2).reshape(-1) for c in range(4)], 1)
        l_on_s = np.stack([oracles.bilinear_resize(lp.reshape(2, 2, 8)[..., c], 4, 4).reshape(-1) for c in range(8)], 1)
        f_s = lambda x: _pair_apply(p.proj_s, x)
        np.testing.assert_allclose(zl.patch.data[0], lp + f_s(s_on_l), atol=1e-12)
        np.testing.assert_allclose(zs.patch.data[0], _pair_apply(p.proj_s, l_on_s + f_s(sp), back=True), atol=1e-12)

    def test_aspect_mismatch(self, rng):
        xl, xs = random_sequence(rng, 1, (2, 3), 4), random_sequence(rng, 1, (4, 4), 4)
        with pytest.raises(ValueError):
            fuse_pairwise(xl, xs, IDENTITY)


class TestCrossAttention:
    def test_matches_full_attention_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x_cls, patch, d = random_cross_case(rng)
            other = Tensor(patch) if len(patch) else None
            out = cross_attention(Tensor(x_cls), other, d).data
            ref = oracles.cross_attention_via_full(x_cls, patch, **direction_arrays(d))
            np.testing.assert_allclose(out, ref, atol=1e-9)

    def test_map_is_one_row_per_head(self, rng):
        d = random_direction(rng, 6, 4, 2)
        _, a = cross_attention(Tensor(rng.standard_normal((3, 1, 6))), Tensor(rng.standard_normal((3, 9, 4))), d, return_map=True)
        assert a.shape == (3, 2, 1, 10)
        np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_no_patches(self, rng):
        d = random_direction(rng, 6, 4, 2)
        x = rng.standard_normal((1, 6))
        out, a = cross_attention(Tensor(x), None, d, return_map=True)
        np.testing.assert_array_equal(a.data, np.ones((1, 2, 1, 1)))
        w = direction_arrays(d)
        q = oracles.affine(x, w["f"])
        v = oracles.layer_norm(q, w["gamma"], w["beta"]) @ w["wv"]
        np.testing.assert_allclose(out.data, oracles.affine(q + v @ w["wo"] + w["bo"], w["g"]), atol=1e-12)

    def test_zero_output_projection(self, rng):
        d = random_direction(rng, 6, 4, 2)
        d.attn.proj.weight = Tensor(np.zeros((4, 4)))
        d.attn.proj.bias = Tensor(np.zeros(4))
        x = rng.standard_normal((1, 6))
        out = cross_attention(Tensor(x), Tensor(rng.standard_normal((5, 4))), d).data
        w = direction_arrays(d)
        np.testing.assert_allclose(out, oracles.affine(oracles.affine(x, w["f"]), w["g"]), atol=1e-12)

    def test_fuse_keeps_patches(self, rng):
        cfg = _config(8, 2, 4, 1, FusionScheme.CROSS_ATTENTION)
        p = init_fusion(Init(rng), cfg)
        xl, xs = random_sequence(rng, 2, (4, 4), 8), random_sequence(rng, 2, (8, 8), 4)
        zl, zs = fuse_cross_attention(xl, xs, p)
        assert zl.patch.data.tobytes() == xl.patch.data.tobytes()
        assert zs.patch.data.tobytes() == xs.patch.data.tobytes()
        assert not np.array_equal(zl.cls.data, xl.cls.data)

    def test_width_mismatch(self, rng):
        d = random_direction(rng, 6, 4, 2)
        with pytest.raises(ValueError):
            cross_attention(Tensor(rng.standard_normal((1, 6))), Tensor(rng.standard_normal((3, 5))), d)

    def test_entry_counts(self):
        assert attention_entries(FusionScheme.CROSS_ATTENTION, 196, 400, 6, 6, 6) == 6 * (401 + 197)


class TestClsSurrogate:
    def test_single_patch(self, rng):
        seq = random_sequence(rng, 1, (1, 1), 4)
        np.testing.assert_array_equal(cls_surrogate(seq).data, seq.patch.data)

    def test_symmetric_pair(self, rng):
        t = rng.standard_normal(4)
        seq = TokenSequence(Tensor(np.stack([np.zeros(4), t, -t])[None]), (1, 2))
        np.testing.assert_array_equal(cls_surrogate(seq).data, np.zeros((1, 1, 4)))

    def test_direct_sum(self, rng):
        tokens = rng.standard_normal((1, 8, 5))
        seq = TokenSequence(Tensor(tokens), (1, 7))
        expected = sum(tokens[0, i] for i in range(1, 8)) / 7
        np.testing.assert_allclose(cls_surrogate(seq).data[0, 0], expected, atol=1e-12)


@pytest.mark.parametrize("scheme", list(FusionScheme))
def test_dispatch_preserves_shapes(rng, scheme):
    cfg = _config(8, 2, 4, 2, scheme)
    p = init_fusion(Init(rng), cfg)
    xl, xs = random_sequence(rng, 2, (4, 4), 8), random_sequence(rng, 2, (8, 8), 4)
    zl, zs = fuse(scheme, xl, xs, p)
    assert zl.tokens.shape == xl.tokens.shape and zs.tokens.shape == xs.tokens.shape
    if scheme is FusionScheme.NONE:
        assert zl is xl and zs is xs


def test_fusion_gradients_reach_inputs(rng):
    cfg = _config(8, 2, 4, 2, FusionScheme.CROSS_ATTENTION)
    p = init_fusion(Init(rng), cfg)
    lt = Tensor(rng.standard_normal((1, 17, 8)), requires_grad=True)
    st = Tensor(rng.standard_normal((1, 65, 4)), requires_grad=True)
    zl, zs = fuse(cfg.fusion, TokenSequence(lt, (4, 4)), TokenSequence(st, (8, 8)), p)
    T.backward(T.add(T.sum(zl.cls), T.sum(zs.cls)))
    assert np.any(lt.grad[:, 1:] != 0) and np.any(st.grad[:, 1:] != 0)

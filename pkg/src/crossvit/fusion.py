"""Multi-scale token fusion between the large (l) and small (s) branch.

Four schemes plus the no-op: all-attention, class-token, pairwise, and
cross-attention, where one branch's CLS token is the only query against the
other branch's patch tokens.  ``f``/``g`` are linear width-alignment maps and
are identities (``None``) when the widths already agree.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import interp
from . import tensor as T
from .config import FusionScheme
from .layers import Attention, Init, Linear, Norm, TokenSequence, attend, layer_norm
from .tensor import Tensor


@dataclass
class ProjectionPair:
    f: Linear | None  # C_own -> C_target
    g: Linear | None  # C_target -> C_own

    def fwd(self, x: Tensor) -> Tensor:
        return x if self.f is None else T.linear(x, self.f.weight, self.f.bias)

    def back(self, x: Tensor) -> Tensor:
        return x if self.g is None else T.linear(x, self.g.weight, self.g.bias)


@dataclass
class AllAttentionParams:
    proj_l: ProjectionPair
    proj_s: ProjectionPair
    norm: Norm
    attn: Attention


@dataclass
class SumParams:
    """Class-token and pairwise fusion: projections into a shared width."""

    proj_l: ProjectionPair
    proj_s: ProjectionPair


@dataclass
class CrossDirection:
    """One direction of cross-attention; attention runs in the other branch's width."""

    proj: ProjectionPair
    norm: Norm
    attn: Attention


@dataclass
class CrossAttnParams:
    to_large: CrossDirection  # large CLS queries small patches
    to_small: CrossDirection  # small CLS queries large patches


def _pair(init: Init, c_own: int, c_target: int) -> ProjectionPair:
    if c_own == c_target:
        return ProjectionPair(None, None)
    return ProjectionPair(init.linear(c_own, c_target), init.linear(c_target, c_own))


def shared_width(cfg) -> tuple[int, int]:
    """Width and head count used by the all-attention / sum schemes."""
    if cfg.small.embed_dim > cfg.large.embed_dim:
        return cfg.small.embed_dim, cfg.small.heads
    return cfg.large.embed_dim, cfg.large.heads


def init_fusion(init: Init, cfg):
    """Parameters of one fusion pass for ``cfg.fusion`` (None for no fusion)."""
    cl, cs = cfg.large.embed_dim, cfg.small.embed_dim
    scheme = cfg.fusion
    if scheme is FusionScheme.NONE:
        return None
    if scheme is FusionScheme.CROSS_ATTENTION:
        return CrossAttnParams(
            CrossDirection(_pair(init, cl, cs), init.norm(cs), init.attention(cs, cfg.small.heads)),
            CrossDirection(_pair(init, cs, cl), init.norm(cl), init.attention(cl, cfg.large.heads)),
        )
    width, heads = shared_width(cfg)
    pl, ps = _pair(init, cl, width), _pair(init, cs, width)
    if scheme is FusionScheme.ALL_ATTENTION:
        return AllAttentionParams(pl, ps, init.norm(width), init.attention(width, heads))
    return SumParams(pl, ps)


def cls_surrogate(x: TokenSequence) -> Tensor:
    """Mean of the patch tokens, shaped like a CLS row (B, 1, C)."""
    return T.mean(x.patch, axis=1, keepdims=True)


def _query_cls(x: TokenSequence, no_cls: bool) -> Tensor:
    return cls_surrogate(x) if no_cls else x.cls


def fuse_all_attention(xl: TokenSequence, xs: TokenSequence, p: AllAttentionParams):
    """Joint self-attention over every token of both branches in the shared width."""
    y = T.concat([p.proj_l.fwd(xl.tokens), p.proj_s.fwd(xs.tokens)], axis=1)
    if y.shape[-1] != p.attn.wq.shape[0]:
        raise ValueError(f"projected width {y.shape[-1]} does not match attention width {p.attn.wq.shape[0]}")
    normed = layer_norm(y, p.norm)
    out, _ = attend(normed, normed, p.attn)
    o = T.add(y, out)
    nl = xl.tokens.shape[1]
    ol = T.slice(o, 1, 0, nl)
    os_ = T.slice(o, 1, nl, o.shape[1])
    return (
        TokenSequence(p.proj_l.back(ol), xl.grid),
        TokenSequence(p.proj_s.back(os_), xs.grid),
    )


def _summed_cls(xl: TokenSequence, xs: TokenSequence, p: SumParams, no_cls: bool) -> Tensor:
    return T.add(p.proj_l.fwd(_query_cls(xl, no_cls)), p.proj_s.fwd(_query_cls(xs, no_cls)))


def fuse_class_token(xl: TokenSequence, xs: TokenSequence, p: SumParams, no_cls: bool = False):
    """Each branch's CLS becomes g(f_l(cls_l) + f_s(cls_s)); patches pass through."""
    total = _summed_cls(xl, xs, p, no_cls)
    return (
        TokenSequence.join(p.proj_l.back(total), xl.patch, xl.grid),
        TokenSequence.join(p.proj_s.back(total), xs.patch, xs.grid),
    )


def fuse_pairwise(xl: TokenSequence, xs: TokenSequence, p: SumParams, no_cls: bool = False):
    """Spatially aligned sum of patch tokens (bilinear grid interpolation); CLS summed separately."""
    gl, gs = xl.grid, xs.grid
    if gl[0] * gs[1] != gl[1] * gs[0]:
        raise ValueError(f"pairwise fusion needs matching aspect ratios, got grids {gl} and {gs}")
    total = _summed_cls(xl, xs, p, no_cls)
    fl, fs = p.proj_l.fwd, p.proj_s.fwd
    on_l = T.add(fl(xl.patch), fs(interp.resize_tokens(xs.patch, gs, gl, "bilinear")))
    on_s = T.add(fl(interp.resize_tokens(xl.patch, gl, gs, "bilinear")), fs(xs.patch))
    return (
        TokenSequence.join(p.proj_l.back(total), p.proj_l.back(on_l), gl),
        TokenSequence.join(p.proj_s.back(total), p.proj_s.back(on_s), gs),
    )


def cross_attention(x_cls: Tensor, other_patch: Tensor, d: CrossDirection, return_map: bool = False):
    """Fuse one branch's CLS (B,1,C_own) with the other branch's patches (B,N,C_other).

    The projected CLS is the single query over [f(cls) || patches]; the residual
    is taken in the projected width and the sum is mapped back with g.
    """
    squeeze = x_cls.ndim == 2
    if squeeze:
        x_cls = T.reshape(x_cls, (1,) + x_cls.shape)
        if other_patch is not None:
            other_patch = T.reshape(other_patch, (1,) + other_patch.shape)
    q = d.proj.fwd(x_cls)
    if other_patch is not None and other_patch.shape[-1] != q.shape[-1]:
        raise ValueError(f"projected CLS width {q.shape[-1]} does not match patch width {other_patch.shape[-1]}")
    seq = q if other_patch is None else T.concat([q, other_patch], axis=1)
    normed = layer_norm(seq, d.norm)
    out, attn_map = attend(T.slice(normed, 1, 0, 1), normed, d.attn)
    y = d.proj.back(T.add(q, out))
    if squeeze:
        y = T.reshape(y, y.shape[1:])
    return (y, attn_map) if return_map else y


def fuse_cross_attention(xl: TokenSequence, xs: TokenSequence, p: CrossAttnParams, no_cls: bool = False):
    """Replace each branch's CLS by its cross-attention with the other branch; patches untouched."""
    lp, sp = xl.patch, xs.patch
    cls_l = cross_attention(_query_cls(xl, no_cls), sp, p.to_large)
    cls_s = cross_attention(_query_cls(xs, no_cls), lp, p.to_small)
    return TokenSequence.join(cls_l, lp, xl.grid), TokenSequence.join(cls_s, sp, xs.grid)


def fuse(scheme: FusionScheme, xl: TokenSequence, xs: TokenSequence, params, no_cls: bool = False):
    scheme = FusionScheme.parse(scheme)
    if scheme is FusionScheme.NONE:
        return xl, xs
    if scheme is FusionScheme.ALL_ATTENTION:
        return fuse_all_attention(xl, xs, params)
    if scheme is FusionScheme.CLASS_TOKEN:
        return fuse_class_token(xl, xs, params, no_cls)
    if scheme is FusionScheme.PAIRWISE:
        return fuse_pairwise(xl, xs, params, no_cls)
    return fuse_cross_attention(xl, xs, params, no_cls)


def attention_entries(scheme: FusionScheme, n_l: int, n_s: int, heads_l: int, heads_s: int, shared_heads: int) -> int:
    """Attention-map entries generated by one fusion pass (per image)."""
    scheme = FusionScheme.parse(scheme)
    if scheme is FusionScheme.CROSS_ATTENTION:
        return heads_s * (1 + n_s) + heads_l * (1 + n_l)
    if scheme is FusionScheme.ALL_ATTENTION:
        return shared_heads * (2 + n_l + n_s) ** 2
    return 0


__all__ = [
    "AllAttentionParams",
    "CrossAttnParams",
    "CrossDirection",
    "ProjectionPair",
    "SumParams",
    "attention_entries",
    "cls_surrogate",
    "cross_attention",
    "fuse",
    "fuse_all_attention",
    "fuse_class_token",
    "fuse_cross_attention",
    "fuse_pairwise",
    "init_fusion",
    "shared_width",
]

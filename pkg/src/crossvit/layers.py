"""ViT building blocks: tokenizers, CLS/position embeddings, attention, FFN, encoder block."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import interp
from .config import ConfigError
from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor | None


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor


@dataclass
class Attention:
    """Per-head W_q/W_k/W_v (C x C/h) stored side by side as (C x C)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    proj: Linear
    heads: int


@dataclass
class Encoder:
    norm1: Norm
    attn: Attention
    norm2: Norm
    fc1: Linear
    fc2: Linear


@dataclass
class Conv:
    weight: Tensor  # (out, in, k, k)
    bias: Tensor
    stride: int


@dataclass
class Embedding:
    proj: Linear | None
    stem: list | None  # list[Conv] for the conv tokenizer
    cls_token: Tensor | None  # (1, C); None in the no-CLS variant
    pos_embed: Tensor  # (1 + N, C), row 0 is the CLS slot


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk a parameter container in field order, yielding dotted names."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if val is not None:
                yield from named_tensors(val, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            yield from named_tensors(val, f"{prefix}.{i}" if prefix else str(i))


class Init:
    """Seeded initializer: truncated normal (+-2 sigma) weights, zero biases."""

    def __init__(self, rng: np.random.Generator, std: float = INIT_STD):
        self.rng = rng
        self.std = std

    def trunc_normal(self, shape) -> Tensor:
        z = self.rng.standard_normal(shape)
        bad = np.abs(z) > 2.0
        while bad.any():
            z[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > 2.0
        return Tensor(z * self.std, requires_grad=True)

    @staticmethod
    def zeros(shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)

    @staticmethod
    def ones(shape) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True)

    def linear(self, n_in: int, n_out: int, bias: bool = True) -> Linear:
        return Linear(self.trunc_normal((n_in, n_out)), self.zeros((n_out,)) if bias else None)

    def norm(self, c: int) -> Norm:
        return Norm(self.ones((c,)), self.zeros((c,)))

    def attention(self, c: int, heads: int) -> Attention:
        return Attention(
            self.trunc_normal((c, c)),
            self.trunc_normal((c, c)),
            self.trunc_normal((c, c)),
            self.linear(c, c),
            heads,
        )

    def encoder(self, c: int, heads: int, hidden: int) -> Encoder:
        return Encoder(self.norm(c), self.attention(c, heads), self.norm(c), self.linear(c, hidden), self.linear(hidden, c))


def stem_channels(embed_dim: int, layers: int = 3) -> list[int]:
    """Output channel ramp of the conv tokenizer, ending at ``embed_dim``."""
    return [max(1, embed_dim >> (layers - 1 - i)) for i in range(layers)]


def init_embedding(init: Init, cfg, with_cls: bool = True) -> Embedding:
    """Tokenizer + CLS + position parameters for one branch config."""
    c = cfg.embed_dim
    proj, stem = None, None
    if cfg.tokenizer == "linear":
        proj = init.linear(cfg.patch_size * cfg.patch_size * 3, c)
    else:
        stem, c_in = [], 3
        for (k, s), c_out in zip(cfg.stem, stem_channels(c, len(cfg.stem))):
            stem.append(Conv(init.trunc_normal((c_out, c_in, k, k)), init.zeros((c_out,)), s))
            c_in = c_out
    cls_token = init.trunc_normal((1, c)) if with_cls else None
    pos = init.trunc_normal((1 + cfg.num_patches, c))
    return Embedding(proj, stem, cls_token, pos)


# ---------------------------------------------------------------------------
# token sequences


@dataclass
class TokenSequence:
    """A branch activation: (B, 1 + N, C) tokens, CLS in row 0, patches on ``grid``."""

    tokens: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ValueError(f"token tensor must be (B, 1+N, C), got {self.tokens.shape}")
        r, c = self.grid
        if r * c != self.tokens.shape[1] - 1:
            raise ValueError(f"grid {self.grid} does not match {self.tokens.shape[1] - 1} patch tokens")

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[1] - 1

    @property
    def cls(self) -> Tensor:
        return T.slice(self.tokens, 1, 0, 1)

    @property
    def patch(self) -> Tensor:
        return T.slice(self.tokens, 1, 1, 1 + self.num_patches)

    @classmethod
    def join(cls, cls_tok: Tensor, patch: Tensor, grid) -> "TokenSequence":
        return cls(T.concat([cls_tok, patch], axis=1), tuple(grid))


def _batched_image(image: Tensor) -> Tensor:
    if image.ndim == 3:
        return T.reshape(image, (1,) + image.shape)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected image (3, H, W) or (B, 3, H, W), got {image.shape}")
    return image


def patchify(image: Tensor, patch_size: int) -> tuple[Tensor, tuple[int, int]]:
    """Split (B, 3, H, W) into (B, N, P*P*3) rows, row-major pixels, channels innermost."""
    image = _batched_image(image)
    b, ch, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = T.reshape(image, (b, ch, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))  # b, gh, gw, py, px, ch
    return T.reshape(x, (b, gh * gw, p * p * ch)), (gh, gw)


def _attach_cls(patch: Tensor, emb: Embedding, grid) -> TokenSequence:
    b, n, c = patch.shape
    if emb.pos_embed.shape != (1 + n, c):
        raise ValueError(f"position embedding {emb.pos_embed.shape} does not fit {1 + n} tokens of width {c}")
    if emb.cls_token is not None:
        cls_tok = T.expand(T.reshape(emb.cls_token, (1, 1, c)), (b, 1, c))
    else:
        cls_tok = T.mean(patch, axis=1, keepdims=True)
    seq = T.concat([cls_tok, patch], axis=1)
    return TokenSequence(T.add(seq, emb.pos_embed), tuple(grid))


def patch_embed_linear(image: Tensor, emb: Embedding, patch_size: int) -> TokenSequence:
    rows, grid = patchify(image, patch_size)
    return _attach_cls(T.linear(rows, emb.proj.weight, emb.proj.bias), emb, grid)


def conv_stem_forward(image: Tensor, stem: list) -> Tensor:
    x = _batched_image(image)
    for i, layer in enumerate(stem):
        k = layer.weight.shape[-1]
        x = T.conv2d(x, layer.weight, layer.bias, layer.stride, k // 2)
        if i < len(stem) - 1:
            x = T.gelu(x)
    return x


def patch_embed_conv(image: Tensor, emb: Embedding, patch_size: int) -> TokenSequence:
    total = math.prod(layer.stride for layer in emb.stem)
    if total != patch_size:
        raise ConfigError(f"conv stem stride product {total} != patch size {patch_size}")
    image = _batched_image(image)
    h, w = image.shape[-2:]
    if h % total or w % total:
        raise ConfigError(f"image {h}x{w} not divisible by conv stem stride {total}")
    fmap = conv_stem_forward(image, emb.stem)
    b, c, gh, gw = fmap.shape
    patch = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (b, gh * gw, c))
    return _attach_cls(patch, emb, (gh, gw))


def patch_embed(image: Tensor, emb: Embedding, patch_size: int) -> TokenSequence:
    if emb.stem is not None:
        return patch_embed_conv(image, emb, patch_size)
    return patch_embed_linear(image, emb, patch_size)


# ---------------------------------------------------------------------------
# attention / FFN / encoder block


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def attend(query: Tensor, context: Tensor, p: Attention) -> tuple[Tensor, Tensor]:
    """Multi-head attention of ``query`` rows over ``context`` rows.

    Returns (output (B, Tq, C), attention map (B, h, Tq, Tc)).
    """
    c = context.shape[-1]
    if c % p.heads:
        raise ValueError(f"width {c} not divisible by {p.heads} heads")
    if query.shape[-1] != c or p.wq.shape != (c, c):
        raise ValueError(f"attention width mismatch: query {query.shape}, context {context.shape}, W_q {p.wq.shape}")
    q = _split_heads(T.matmul(query, p.wq), p.heads)
    k = _split_heads(T.matmul(context, p.wk), p.heads)
    v = _split_heads(T.matmul(context, p.wv), p.heads)
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(c // p.heads))
    a = T.softmax(scores, axis=-1, attention=True)
    out = _merge_heads(T.matmul(a, v))
    return T.linear(out, p.proj.weight, p.proj.bias), a


def _batched_tokens(x: Tensor):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def msa(x: Tensor, p: Attention) -> Tensor:
    """Self-attention over all rows of ``x`` ((T, C) or (B, T, C))."""
    xb, squeeze = _batched_tokens(x)
    out, _ = attend(xb, xb, p)
    return T.reshape(out, x.shape) if squeeze else out


def layer_norm(x: Tensor, n: Norm) -> Tensor:
    return T.layer_norm(x, n.gamma, n.beta, LN_EPS)


def ffn(x: Tensor, fc1: Linear, fc2: Linear) -> Tensor:
    return T.linear(T.gelu(T.linear(x, fc1.weight, fc1.bias)), fc2.weight, fc2.bias)


def drop_path(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Per-sample stochastic depth on a (B, ...) residual branch."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop path probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode drop path needs a seeded generator")
    b = x.shape[0]
    keep = (rng.random(b) >= p).astype(np.float64) / (1.0 - p)
    return T.mul(x, Tensor(keep.reshape((b,) + (1,) * (x.ndim - 1))))


def encoder_block(
    x: Tensor,
    p: Encoder,
    drop_path_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-LN residual block: attention then FFN."""
    if not 0.0 <= drop_path_p < 1.0:
        raise ValueError(f"drop path probability must lie in [0, 1), got {drop_path_p}")
    xb, squeeze = _batched_tokens(x)
    y = T.add(xb, drop_path(msa(layer_norm(xb, p.norm1), p.attn), drop_path_p, training, rng))
    out = T.add(y, drop_path(ffn(layer_norm(y, p.norm2), p.fc1, p.fc2), drop_path_p, training, rng))
    return T.reshape(out, x.shape) if squeeze else out


def resize_pos_embed(pos: Tensor, old_grid, new_grid) -> Tensor:
    """Bicubically resample the patch rows of a (1 + N, C) position table; CLS row kept."""
    n = pos.shape[0] - 1
    r, c = old_grid
    if r * c != n:
        raise ValueError(f"position table has {n} patch rows, grid {tuple(old_grid)} needs {r * c}")
    if tuple(old_grid) == tuple(new_grid):
        return Tensor(pos.data.copy(), requires_grad=pos.requires_grad)
    nr, nc = new_grid
    planes = pos.data[1:].reshape(r, c, -1).transpose(2, 0, 1)
    rh = interp.bicubic_matrix(r, nr)
    rw = interp.bicubic_matrix(c, nc)
    out = np.matmul(np.matmul(rh, planes), rw.T)  # (C, nr, nc)
    rows = out.transpose(1, 2, 0).reshape(nr * nc, -1)
    return Tensor(np.concatenate([pos.data[:1], rows], axis=0), requires_grad=pos.requires_grad)

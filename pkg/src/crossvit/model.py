"""CrossViT assembly: two branches, K multi-scale encoders, L fusion passes each, two heads."""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import interp
from . import tensor as T
from .config import ConfigError, FusionScheme, ModelConfig
from .fusion import fuse, init_fusion
from .layers import (
    Embedding,
    Init,
    Linear,
    Norm,
    TokenSequence,
    encoder_block,
    init_embedding,
    layer_norm,
    named_tensors,
    patch_embed,
    resize_pos_embed,
)
from .tensor import Tensor


@dataclass
class BranchParams:
    embed: Embedding
    blocks: list  # blocks[k][j]: j-th block of the k-th multi-scale encoder


@dataclass
class Head:
    norm: Norm
    fc: Linear


@dataclass
class Parameters:
    """All learnable tensors.

    Iteration order (and therefore checkpoint layout) is branch-major: large
    branch embedding then its blocks encoder by encoder, the same for the small
    branch, then fusion passes ``fusion[k][l]``, then the large and small heads.
    """

    large: BranchParams
    small: BranchParams
    fusion: list  # fusion[k][l]
    head_large: Head
    head_small: Head

    def named(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(named_tensors(self))

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def num_elements(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def zero_grad(self) -> None:
        T.zero_grad(self.tensors())


def build(config: ModelConfig, seed: int = 0) -> Parameters:
    """Allocate and initialize every parameter, in checkpoint order, from ``seed``."""
    config.validate()
    init = Init(np.random.default_rng(seed))
    branches = {}
    for name, b in config.branches.items():
        emb = init_embedding(init, b, with_cls=not config.no_cls)
        blocks = [[init.encoder(b.embed_dim, b.heads, b.hidden_dim) for _ in range(b.blocks)] for _ in range(config.encoders)]
        branches[name] = BranchParams(emb, blocks)
    fusion = [[init_fusion(init, config) for _ in range(_passes(config))] for _ in range(config.encoders)]
    heads = {
        name: Head(init.norm(b.embed_dim), init.linear(b.embed_dim, config.num_classes))
        for name, b in config.branches.items()
    }
    params = Parameters(branches["large"], branches["small"], fusion, heads["large"], heads["small"])
    for name, t in params.named().items():
        t.name = name
    return params


def _passes(config: ModelConfig) -> int:
    return 0 if config.fusion is FusionScheme.NONE else config.fusion_depth


def _as_image(image) -> tuple[Tensor, bool]:
    image = T.as_tensor(image)
    if image.ndim == 3:
        return T.reshape(image, (1,) + image.shape), True
    return image, False


def embed_branch(image: Tensor, bp: BranchParams, bcfg) -> TokenSequence:
    """Resize to the branch side if needed, then tokenize and add CLS/position."""
    side = bcfg.input_side
    if image.shape[-1] != side or image.shape[-2] != side:
        with T.scope("preprocess"):
            image = interp.resize_planes(image, (side, side), "bilinear")
    return patch_embed(image, bp.embed, bcfg.patch_size)


def forward_features(
    params: Parameters,
    config: ModelConfig,
    image,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Final CLS rows (B, C_l), (B, C_s) of both branches."""
    image, _ = _as_image(image)
    s = config.base_input_side
    if image.shape[-2:] != (s, s) or image.shape[1] != 3:
        raise ValueError(f"expected images of shape (3, {s}, {s}), got {image.shape[1:]}")
    if training and config.drop_path > 0 and rng is None:
        raise ValueError("training with drop path needs a random generator")
    seqs = {}
    for name, bcfg in config.branches.items():
        with T.scope(f"{name}.embed"):
            seqs[name] = embed_branch(image, getattr(params, name), bcfg)
    for k in range(config.encoders):
        for name in ("large", "small"):
            seq = seqs[name]
            x = seq.tokens
            with T.scope(f"{name}.encoder{k}"):
                for blk in getattr(params, name).blocks[k]:
                    x = encoder_block(x, blk, config.drop_path, training, rng)
            seqs[name] = TokenSequence(x, seq.grid)
        with T.scope(f"fusion{k}"):
            for fp in params.fusion[k]:
                seqs["large"], seqs["small"] = fuse(config.fusion, seqs["large"], seqs["small"], fp, config.no_cls)
    cls_l = T.reshape(seqs["large"].cls, (image.shape[0], config.large.embed_dim))
    cls_s = T.reshape(seqs["small"].cls, (image.shape[0], config.small.embed_dim))
    return cls_l, cls_s


def head_logits(head: Head, cls: Tensor) -> Tensor:
    return T.linear(layer_norm(cls, head.norm), head.fc.weight, head.fc.bias)


def predict_heads(params: Parameters, cls_l: Tensor, cls_s: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Per-branch logits and their arithmetic-mean ensemble."""
    with T.scope("large.head"):
        logits_l = head_logits(params.head_large, cls_l)
    with T.scope("small.head"):
        logits_s = head_logits(params.head_small, cls_s)
    return logits_l, logits_s, T.scale(T.add(logits_l, logits_s), 0.5)


def forward(
    params: Parameters,
    config: ModelConfig,
    image,
    training: bool = False,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
    return_branches: bool = False,
):
    """Ensemble logits for one image (3, S, S) -> (K,) or a batch (B, 3, S, S) -> (B, K).

    With ``return_branches`` the result is (logits_l, logits_s, ensemble).
    """
    if training and rng is None and seed is not None:
        rng = np.random.default_rng(seed)
    _, single = _as_image(image)
    cls_l, cls_s = forward_features(params, config, image, training, rng)
    outs = predict_heads(params, cls_l, cls_s)
    if single:
        outs = tuple(T.reshape(o, (config.num_classes,)) for o in outs)
    return outs if return_branches else outs[2]


# ---------------------------------------------------------------------------
# resolution adaptation


def adapted_branch_side(old_side: int, old_base: int, new_base: int, patch_size: int) -> int:
    """Branch input side after moving the base resolution to ``new_base``.

    Branches that consume the base image directly follow it exactly and must
    divide evenly; resized branches scale with the base and snap to the nearest
    multiple of their patch size.
    """
    if old_side == old_base:
        if new_base % patch_size:
            raise ConfigError(f"new base side {new_base} not divisible by patch size {patch_size}")
        return new_base
    scaled = old_side * new_base / old_base
    side = int(round(scaled / patch_size)) * patch_size
    if side < patch_size:
        raise ConfigError(f"branch side {scaled:.1f} too small for patch size {patch_size}")
    return side


def _copy_tree(obj):
    if isinstance(obj, Tensor):
        t = Tensor(obj.data.copy(), requires_grad=obj.requires_grad, name=obj.name)
        return t
    if dataclasses.is_dataclass(obj):
        return dataclasses.replace(obj, **{f.name: _copy_tree(getattr(obj, f.name)) for f in dataclasses.fields(obj)})
    if isinstance(obj, list):
        return [_copy_tree(v) for v in obj]
    return obj


def copy_params(params: Parameters) -> Parameters:
    return _copy_tree(params)


def adapt_resolution(params: Parameters, config: ModelConfig, new_base_side: int) -> tuple[Parameters, ModelConfig]:
    """Re-grid the position embeddings for a new input resolution; nothing else changes."""
    new_branches = {}
    for name, b in config.branches.items():
        side = adapted_branch_side(b.input_side, config.base_input_side, new_base_side, b.patch_size)
        new_branches[name] = dataclasses.replace(b, input_side=side)
    new_cfg = dataclasses.replace(config, base_input_side=new_base_side, **new_branches).validate()
    out = copy_params(params)
    for name in ("large", "small"):
        emb = getattr(out, name).embed
        pos = resize_pos_embed(emb.pos_embed, config.branches[name].grid, new_cfg.branches[name].grid)
        pos.name = emb.pos_embed.name
        emb.pos_embed = pos
    return out, new_cfg


__all__ = [
    "BranchParams",
    "Head",
    "Parameters",
    "adapt_resolution",
    "adapted_branch_side",
    "build",
    "copy_params",
    "forward",
    "forward_features",
    "predict_heads",
]

"""Closed-form parameter, FLOP and attention-map accounting.

One multiply-accumulate counts as one FLOP.  Softmax, layer-norm and GELU work
is tallied separately as ``elementwise_ops``.  Resizing the input image to a
branch's side is preprocessing and is left out of every total.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .config import BranchConfig, FusionScheme, ModelConfig, branch_side_for
from .fusion import shared_width
from .layers import stem_channels
from .model import adapted_branch_side

PREPROCESS_NOTE = "image resizing to each branch's input side is preprocessing and is excluded from flops"


@dataclass
class CostRow:
    name: str
    param_count: int = 0
    flops: int = 0
    attn_entries: int = 0
    elementwise_ops: int = 0


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=lambda: [PREPROCESS_NOTE])

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def param_count(self) -> int:
        return sum(r.param_count for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def attn_entries(self) -> int:
        return sum(r.attn_entries for r in self.rows)

    @property
    def elementwise_ops(self) -> int:
        return sum(r.elementwise_ops for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "param_count", "flops", "attn_entries"])
        for r in self.rows:
            w.writerow([r.name, r.param_count, r.flops, r.attn_entries])
        w.writerow(["total", self.param_count, self.flops, self.attn_entries])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'component':<18}{'params':>14}{'flops':>18}{'attn_entries':>16}{'elementwise':>16}"]
        for r in self.rows + [CostRow("total", self.param_count, self.flops, self.attn_entries, self.elementwise_ops)]:
            lines.append(f"{r.name:<18}{r.param_count:>14,}{r.flops:>18,}{r.attn_entries:>16,}{r.elementwise_ops:>16,}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# parameter counts


def linear_params(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def ffn_params(c: int, hidden: int) -> int:
    return linear_params(c, hidden) + linear_params(hidden, c)


def attention_params(c: int) -> int:
    return 3 * c * c + linear_params(c, c)


def block_params(c: int, hidden: int) -> int:
    return 2 * c + attention_params(c) + 2 * c + ffn_params(c, hidden)


def conv_stem_params(b: BranchConfig) -> int:
    total, c_in = 0, 3
    for (k, _), c_out in zip(b.stem, stem_channels(b.embed_dim, len(b.stem))):
        total += k * k * c_in * c_out + c_out
        c_in = c_out
    return total


def embedding_params(b: BranchConfig, with_cls: bool = True) -> int:
    c = b.embed_dim
    tok = linear_params(b.patch_size**2 * 3, c) if b.tokenizer == "linear" else conv_stem_params(b)
    return tok + (c if with_cls else 0) + (1 + b.num_patches) * c


def _pair_params(c_own: int, c_target: int) -> int:
    return 0 if c_own == c_target else linear_params(c_own, c_target) + linear_params(c_target, c_own)


def fusion_pass_params(cfg: ModelConfig) -> int:
    cl, cs = cfg.large.embed_dim, cfg.small.embed_dim
    if cfg.fusion is FusionScheme.NONE:
        return 0
    if cfg.fusion is FusionScheme.CROSS_ATTENTION:
        return (
            _pair_params(cl, cs) + 2 * cs + attention_params(cs)
            + _pair_params(cs, cl) + 2 * cl + attention_params(cl)
        )
    w, _ = shared_width(cfg)
    total = _pair_params(cl, w) + _pair_params(cs, w)
    if cfg.fusion is FusionScheme.ALL_ATTENTION:
        total += 2 * w + attention_params(w)
    return total


def head_params(c: int, num_classes: int) -> int:
    return 2 * c + linear_params(c, num_classes)


def _fusion_passes(cfg: ModelConfig) -> int:
    return 0 if cfg.fusion is FusionScheme.NONE else cfg.fusion_depth


def param_rows(cfg: ModelConfig) -> list[CostRow]:
    rows = []
    for name, b in cfg.branches.items():
        rows.append(CostRow(f"{name}.embed", embedding_params(b, not cfg.no_cls)))
    for k in range(cfg.encoders):
        for name, b in cfg.branches.items():
            rows.append(CostRow(f"{name}.encoder{k}", b.blocks * block_params(b.embed_dim, b.hidden_dim)))
        if _fusion_passes(cfg):
            rows.append(CostRow(f"fusion{k}", _fusion_passes(cfg) * fusion_pass_params(cfg)))
    for name, b in cfg.branches.items():
        rows.append(CostRow(f"{name}.head", head_params(b.embed_dim, cfg.num_classes)))
    return rows


def count_params(cfg: ModelConfig) -> int:
    """Closed-form count of every learnable scalar in ``build(cfg)``."""
    cfg.validate()
    return sum(r.param_count for r in param_rows(cfg))


# ---------------------------------------------------------------------------
# FLOP counts (per image)


@dataclass
class _Cost:
    flops: int = 0
    attn: int = 0
    elem: int = 0

    def __iadd__(self, o: "_Cost"):
        self.flops += o.flops
        self.attn += o.attn
        self.elem += o.elem
        return self


def _attention_cost(t_q: int, t_k: int, c: int, heads: int) -> _Cost:
    # q proj + k/v proj + scores + weighted sum + output proj
    flops = t_q * c * c + 2 * t_k * c * c + 2 * t_q * t_k * c + t_q * c * c
    return _Cost(flops, heads * t_q * t_k, heads * t_q * t_k)


def block_cost(tokens: int, c: int, hidden: int, heads: int) -> _Cost:
    cost = _attention_cost(tokens, tokens, c, heads)
    cost.flops += 2 * tokens * c * hidden
    cost.elem += 2 * tokens * c + tokens * hidden
    return cost


def embed_cost(b: BranchConfig, side: int) -> _Cost:
    p, c = b.patch_size, b.embed_dim
    if b.tokenizer == "linear":
        n = (side // p) ** 2
        return _Cost(n * p * p * 3 * c)
    cost, c_in, s_cur = _Cost(), 3, side
    stem = b.stem
    for i, ((k, s), c_out) in enumerate(zip(stem, stem_channels(c, len(stem)))):
        s_out = (s_cur + 2 * (k // 2) - k) // s + 1
        cost.flops += s_out * s_out * c_out * c_in * k * k
        if i < len(stem) - 1:
            cost.elem += s_out * s_out * c_out
        c_in, s_cur = c_out, s_out
    return cost


def _proj(tokens: int, c_own: int, c_target: int) -> int:
    return 0 if c_own == c_target else tokens * c_own * c_target


def _grid_resize_flops(old: tuple, new: tuple, c: int) -> int:
    if tuple(old) == tuple(new):
        return 0
    (r, q), (nr, nq) = old, new
    return nr * r * q * c + nr * q * nq * c


def fusion_pass_cost(cfg: ModelConfig, grid_l: tuple, grid_s: tuple) -> _Cost:
    cl, cs = cfg.large.embed_dim, cfg.small.embed_dim
    nl, ns = grid_l[0] * grid_l[1], grid_s[0] * grid_s[1]
    scheme = cfg.fusion
    if scheme is FusionScheme.NONE:
        return _Cost()
    if scheme is FusionScheme.CROSS_ATTENTION:
        cost = _Cost()
        for c_own, c_t, n_other, h in ((cl, cs, ns, cfg.small.heads), (cs, cl, nl, cfg.large.heads)):
            part = _attention_cost(1, 1 + n_other, c_t, h)
            part.flops += 2 * _proj(1, c_own, c_t)
            part.elem += (1 + n_other) * c_t
            cost += part
        return cost
    w, heads = shared_width(cfg)
    if scheme is FusionScheme.ALL_ATTENTION:
        t = 2 + nl + ns
        cost = _attention_cost(t, t, w, heads)
        cost.flops += 2 * (_proj(1 + nl, cl, w) + _proj(1 + ns, cs, w))
        cost.elem += t * w
        return cost
    # class-token sum, plus the spatially aligned patch sum for pairwise
    flops = 2 * (_proj(1, cl, w) + _proj(1, cs, w))
    if scheme is FusionScheme.PAIRWISE:
        flops += _grid_resize_flops(grid_s, grid_l, cs) + _grid_resize_flops(grid_l, grid_s, cl)
        flops += _proj(nl, cl, w) + _proj(nl, cs, w) + _proj(ns, cl, w) + _proj(ns, cs, w)
        flops += _proj(nl, cl, w) + _proj(ns, cs, w)
    return _Cost(flops)


def branch_sides(cfg: ModelConfig, input_side: int | None) -> dict[str, int]:
    if input_side is None or input_side == cfg.base_input_side:
        return {n: b.input_side for n, b in cfg.branches.items()}
    return {
        n: adapted_branch_side(b.input_side, cfg.base_input_side, input_side, b.patch_size)
        for n, b in cfg.branches.items()
    }


def count_flops(cfg: ModelConfig, input_side: int | None = None) -> CostReport:
    """Per-image cost report with one row per component (embeddings, encoders, fusion, heads)."""
    cfg.validate()
    if input_side is not None and input_side < 1:
        raise ValueError(f"invalid input side {input_side}")
    sides = branch_sides(cfg, input_side)
    grids = {n: (sides[n] // b.patch_size,) * 2 for n, b in cfg.branches.items()}
    params = {r.name: r.param_count for r in param_rows(cfg)}
    rows = []

    def add(name: str, cost: _Cost):
        rows.append(CostRow(name, params.get(name, 0), cost.flops, cost.attn, cost.elem))

    for name, b in cfg.branches.items():
        add(f"{name}.embed", embed_cost(b, sides[name]))
    passes = _fusion_passes(cfg)
    for k in range(cfg.encoders):
        for name, b in cfg.branches.items():
            t = 1 + grids[name][0] * grids[name][1]
            cost = _Cost()
            for _ in range(b.blocks):
                cost += block_cost(t, b.embed_dim, b.hidden_dim, b.heads)
            add(f"{name}.encoder{k}", cost)
        if passes:
            cost = _Cost()
            for _ in range(passes):
                cost += fusion_pass_cost(cfg, grids["large"], grids["small"])
            add(f"fusion{k}", cost)
    for name, b in cfg.branches.items():
        add(f"{name}.head", _Cost(b.embed_dim * cfg.num_classes, 0, b.embed_dim))
    return CostReport(rows)


def vit_flops(branch: BranchConfig, input_side: int, num_classes: int = 1000) -> int:
    """FLOPs of a standalone single-branch ViT (tokenizer, blocks, head)."""
    t = 1 + (input_side // branch.patch_size) ** 2
    total = embed_cost(branch, input_side).flops
    total += branch.blocks * block_cost(t, branch.embed_dim, branch.hidden_dim, branch.heads).flops
    return total + branch.embed_dim * num_classes


# ---------------------------------------------------------------------------
# attention-map accounting


def cross_attention_entries(n_l: int, n_s: int, heads: int) -> int:
    """Map entries of one cross-attention pass (both directions)."""
    return heads * ((1 + n_s) + (1 + n_l))


def all_attention_entries(n_l: int, n_s: int, heads: int) -> int:
    """Map entries of one all-attention pass."""
    return heads * (2 + n_l + n_s) ** 2


@dataclass
class AttnCost:
    n_l: int
    n_s: int
    cross_attention: int
    all_attention: int

    @property
    def ratio(self) -> float:
        return self.all_attention / self.cross_attention


def attn_cost(cfg: ModelConfig) -> AttnCost:
    """Per-pass attention entries of cross- vs all-attention fusion for ``cfg``'s token counts."""
    nl, ns = cfg.large.num_patches, cfg.small.num_patches
    cross = cfg.small.heads * (1 + ns) + cfg.large.heads * (1 + nl)
    _, heads = shared_width(cfg)
    return AttnCost(nl, ns, cross, all_attention_entries(nl, ns, heads))


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = [math.log(x) for x in xs]
    ly = [math.log(y) for y in ys]
    mx, my = sum(lx) / len(lx), sum(ly) / len(ly)
    num = sum((a - mx) * (b - my) for a, b in zip(lx, ly))
    den = sum((a - mx) ** 2 for a in lx)
    return num / den


def patch_token_ratio(base_side: int, small_patch: int, large_patch: int) -> float:
    """Ratio of small- to large-branch patch tokens under the branch-side rule."""
    ns = (branch_side_for(base_side, small_patch, large_patch) // small_patch) ** 2
    nl = (branch_side_for(base_side, large_patch, small_patch) // large_patch) ** 2
    return ns / nl


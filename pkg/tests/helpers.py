"""Random parameter and token-sequence factories shared by the fusion tests."""
import numpy as np

from crossvit import tensor as T
from crossvit.config import BranchConfig, FusionScheme, ModelConfig
from crossvit.fusion import CrossDirection, ProjectionPair
from crossvit.layers import Init, Norm, TokenSequence
from crossvit.analysis import count_flops
from crossvit.model import build, forward
from crossvit.interp import resize_planes
from crossvit.tensor import Tensor, no_grad

_LABELS = np.array([0, 2, 1])

# (name, op, input shapes) for every differentiable primitive plus the resize composition
OP_CASES = [
    ("add_broadcast", lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    ("mul_broadcast", lambda a, b: T.mul(a, b), [(2, 3, 4), (1, 4)]),
    ("scale", lambda a: T.scale(a, -2.5), [(3, 4)]),
    ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 5)]),
    ("matmul_batched", lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    ("linear", lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    ("softmax", lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    ("log_softmax", lambda a: T.log_softmax(a, axis=-1), [(3, 5)]),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("gelu", lambda a: T.gelu(a), [(4, 5)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3, 4), (2, 2, 4)]),
    ("slice", lambda a: T.slice(a, 1, 1, 3), [(2, 4, 3)]),
    ("index", lambda a: T.index(a, (slice(None), [0, 2, 2])), [(2, 4)]),
    ("transpose", lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("swap_last", lambda a: T.swap_last(a), [(2, 3, 4)]),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    ("expand", lambda a: T.expand(a, (3, 2, 4)), [(1, 2, 4)]),
    ("sum", lambda a: T.sum(a, axis=0), [(3, 4)]),
    ("mean", lambda a: T.mean(a, axis=1, keepdims=True), [(3, 4)]),
    ("conv2d", lambda x, w, b: T.conv2d(x, w, b, 2, 1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    ("cross_entropy", lambda z: T.cross_entropy(z, _LABELS), [(3, 4)]),
    ("resize_bicubic", lambda a: resize_planes(a, (5, 7), "bicubic"), [(2, 3, 4)]),
]


def raw(lin):
    return None if lin is None else (lin.weight.data, lin.bias.data)


def random_direction(rng, c_own, c_target, heads, std=0.3):
    init = Init(rng, std)
    pair = ProjectionPair(None, None)
    if c_own != c_target:
        pair = ProjectionPair(init.linear(c_own, c_target), init.linear(c_target, c_own))
        pair.f.bias = Tensor(rng.standard_normal(c_target) * std)
        pair.g.bias = Tensor(rng.standard_normal(c_own) * std)
    norm = Norm(Tensor(1.0 + rng.standard_normal(c_target) * std), Tensor(rng.standard_normal(c_target) * std))
    attn = init.attention(c_target, heads)
    attn.proj.bias = Tensor(rng.standard_normal(c_target) * std)
    return CrossDirection(pair, norm, attn)


def direction_arrays(d):
    a = d.attn
    return dict(
        f=raw(d.proj.f),
        g=raw(d.proj.g),
        gamma=d.norm.gamma.data,
        beta=d.norm.beta.data,
        wq=a.wq.data,
        wk=a.wk.data,
        wv=a.wv.data,
        wo=a.proj.weight.data,
        bo=a.proj.bias.data,
        heads=a.heads,
    )


def random_sequence(rng, batch, grid, width):
    n = grid[0] * grid[1]
    return TokenSequence(Tensor(rng.standard_normal((batch, 1 + n, width))), tuple(grid))


def random_cross_case(rng):
    """One random cross-attention configuration: (x_cls, other_patch, direction)."""
    heads = int(rng.integers(1, 5))
    c_target = heads * int(rng.integers(1, 6))
    c_own = int(rng.integers(1, 4)) * int(rng.integers(1, 9)) if rng.random() < 0.7 else c_target
    n = int(rng.integers(0, 25))
    d = random_direction(rng, c_own, c_target, heads)
    return rng.standard_normal((1, c_own)), rng.standard_normal((n, c_target)), d


def random_model_config(rng, fusion=None, tokenizer=None):
    """A random valid small ModelConfig (both branches consume the base side directly)."""
    ps = int(rng.choice([2, 4]))
    pl = ps * int(rng.choice([2, 4]))
    base = pl * int(rng.integers(1, 3))
    tok = tokenizer or str(rng.choice(["linear", "conv3"]))

    def branch(p):
        heads = int(rng.integers(1, 4))
        return BranchConfig(
            patch_size=p,
            embed_dim=heads * int(rng.integers(1, 5)) * 2,
            blocks=int(rng.integers(0, 3)),
            heads=heads,
            ffn_ratio=float(rng.choice([1.0, 2.0, 4.0])),
            tokenizer=tok,
        )

    return ModelConfig(
        large=branch(pl),
        small=branch(ps),
        encoders=int(rng.integers(1, 3)),
        fusion_depth=int(rng.integers(1, 3)),
        fusion=fusion if fusion is not None else FusionScheme(str(rng.choice([s.value for s in FusionScheme]))),
        num_classes=int(rng.integers(1, 6)),
        base_input_side=base,
        no_cls=bool(rng.random() < 0.3),
    )


def instrumented_rows(params, cfg, images):
    """Per-component (macs, attn_entries, elementwise) per image from an actual forward; preprocessing dropped."""
    with no_grad(), T.profile() as tally:
        forward(params, cfg, images)
    b = len(images)
    rows = {}
    keys = set(tally.macs) | set(tally.attn_entries) | set(tally.elementwise)
    for key in keys:
        if key.endswith("preprocess"):
            continue
        vals = (tally.macs.get(key, 0), tally.attn_entries.get(key, 0), tally.elementwise.get(key, 0))
        assert all(v % b == 0 for v in vals), key
        rows[key] = tuple(v // b for v in vals)
    return rows


def assert_matches_tally(cfg, seed=0, batch=1):
    params = build(cfg, seed)
    images = np.random.default_rng(seed).random((batch, 3, cfg.base_input_side, cfg.base_input_side))
    tally = instrumented_rows(params, cfg, images)
    report = count_flops(cfg)
    assert set(tally) == {r.name for r in report.rows if r.flops or r.attn_entries or r.elementwise_ops}
    for r in report.rows:
        assert tally.get(r.name, (0, 0, 0)) == (r.flops, r.attn_entries, r.elementwise_ops), r.name


def randomize(params, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    for name, t in params.named().items():
        noise = rng.standard_normal(t.shape) * std
        t.data = (1.0 + noise) if name.endswith("gamma") else noise
    return params


def branch_arrays(params, cfg, name):
    bp = getattr(params, name)
    head = params.head_large if name == "large" else params.head_small
    blocks = []
    for enc in bp.blocks:
        for blk in enc:
            a = blk.attn
            blocks.append(
                dict(
                    ln1=(blk.norm1.gamma.data, blk.norm1.beta.data),
                    attn=(a.wq.data, a.wk.data, a.wv.data, a.proj.weight.data, a.proj.bias.data),
                    heads=a.heads,
                    ln2=(blk.norm2.gamma.data, blk.norm2.beta.data),
                    fc1=(blk.fc1.weight.data, blk.fc1.bias.data),
                    fc2=(blk.fc2.weight.data, blk.fc2.bias.data),
                )
            )
    return dict(
        patch=cfg.branches[name].patch_size,
        proj_w=bp.embed.proj.weight.data,
        proj_b=bp.embed.proj.bias.data,
        cls=bp.embed.cls_token.data,
        pos=bp.embed.pos_embed.data,
        blocks=blocks,
        head_ln=(head.norm.gamma.data, head.norm.beta.data),
        head_fc=(head.fc.weight.data, head.fc.bias.data),
    )

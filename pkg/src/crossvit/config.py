"""Model and training configuration, presets, and the INI-style config file format.

A config file is UTF-8 text with ``[section]`` headers and ``key = value`` lines::

    [model]
    num_classes = 10
    base_input_side = 224
    encoders = 3            # K
    fusion_depth = 1        # L
    fusion = cross_attention
    drop_path = 0.1
    no_cls = false

    [model.large]
    patch_size = 16
    embed_dim = 384
    blocks = 4              # M
    heads = 6
    ffn_ratio = 4
    tokenizer = linear      # or conv3
    input_side = 224
    conv_stem = 7/4,3/2,3/2 # kernel/stride per conv layer (conv3 only)

    [model.small]
    ...

    [train]
    epochs = 300
    ...

Unset keys take the dataclass defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import enum
import io
import math
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violated constraint."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


class FusionScheme(str, enum.Enum):
    NONE = "none"
    ALL_ATTENTION = "all_attention"
    CLASS_TOKEN = "class_token"
    PAIRWISE = "pairwise"
    CROSS_ATTENTION = "cross_attention"

    @classmethod
    def parse(cls, value) -> "FusionScheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise ConfigError(f"unknown fusion scheme {value!r}; expected one of {[m.value for m in cls]}")


def default_conv_stem(patch_size: int) -> tuple[tuple[int, int], ...]:
    """Three (kernel, stride) pairs whose strides multiply to ``patch_size``."""
    p = patch_size
    s1 = 4 if p % 4 == 0 else (2 if p % 2 == 0 else p)
    rest = p // s1
    s2 = 2 if rest % 2 == 0 else (3 if rest % 3 == 0 else rest)
    s3 = rest // s2
    return tuple((7 if s == 4 else (3 if s <= 3 else 2 * s - 1), s) for s in (s1, s2, s3))


def parse_conv_stem(text: str) -> tuple[tuple[int, int], ...]:
    layers = []
    for part in text.split(","):
        k, s = part.strip().split("/")
        layers.append((int(k), int(s)))
    return tuple(layers)


def format_conv_stem(stem) -> str:
    return ",".join(f"{k}/{s}" for k, s in stem)


def branch_side_for(base_side: int, patch_size: int, other_patch: int | None = None) -> int:
    """Input side of a branch with ``patch_size`` when the model consumes ``base_side`` images.

    A branch whose patch divides the base uses it directly.  Otherwise the image
    is resized up to the smallest side that both branches' patch sizes tile
    (224 with patches 12 and 16 gives 240).
    """
    if base_side % patch_size == 0:
        return base_side
    step = math.lcm(patch_size, other_patch) if other_patch else patch_size
    return step * math.ceil(base_side / step)


@dataclass(frozen=True)
class BranchConfig:
    patch_size: int
    embed_dim: int
    blocks: int
    heads: int
    ffn_ratio: float = 4.0
    tokenizer: str = "linear"
    input_side: int = 0  # 0: derived from the model's base side
    conv_stem: tuple = ()  # empty: default_conv_stem(patch_size)

    @property
    def hidden_dim(self) -> int:
        return int(round(self.ffn_ratio * self.embed_dim))

    @property
    def stem(self) -> tuple:
        return tuple(self.conv_stem) or default_conv_stem(self.patch_size)

    @property
    def grid(self) -> tuple[int, int]:
        g = self.input_side // self.patch_size
        return (g, g)

    @property
    def num_patches(self) -> int:
        r, c = self.grid
        return r * c

    def problems(self, name: str) -> list[str]:
        out = []
        if self.patch_size < 1:
            out.append(f"{name}.patch_size must be positive")
        if self.embed_dim < 1 or self.heads < 1:
            out.append(f"{name}.embed_dim and heads must be positive")
        elif self.embed_dim % self.heads:
            out.append(f"{name}.embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.blocks < 0:
            out.append(f"{name}.blocks must be >= 0")
        hidden = self.ffn_ratio * self.embed_dim
        if self.ffn_ratio <= 0 or abs(hidden - round(hidden)) > 1e-9:
            out.append(f"{name}.ffn_ratio*embed_dim must be a positive integer, got {hidden}")
        if self.tokenizer not in ("linear", "conv3"):
            out.append(f"{name}.tokenizer must be 'linear' or 'conv3', got {self.tokenizer!r}")
        if self.input_side < 1:
            out.append(f"{name}.input_side must be positive")
        elif self.patch_size >= 1 and self.input_side % self.patch_size:
            out.append(f"{name}.input_side={self.input_side} not divisible by patch_size={self.patch_size}")
        if self.tokenizer == "conv3":
            stem = self.stem
            if math.prod(s for _, s in stem) != self.patch_size:
                out.append(f"{name}.conv_stem strides {[s for _, s in stem]} do not multiply to patch_size={self.patch_size}")
            if len(stem) != 3:
                out.append(f"{name}.conv_stem must have three layers, got {len(stem)}")
        return out


@dataclass(frozen=True)
class ModelConfig:
    large: BranchConfig
    small: BranchConfig
    encoders: int = 3  # K
    fusion_depth: int = 1  # L
    fusion: FusionScheme = FusionScheme.CROSS_ATTENTION
    num_classes: int = 1000
    base_input_side: int = 224
    drop_path: float = 0.0
    no_cls: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fusion", FusionScheme.parse(self.fusion))
        for attr, other in (("large", self.small), ("small", self.large)):
            b = getattr(self, attr)
            if b.input_side == 0 and b.patch_size > 0:
                side = branch_side_for(self.base_input_side, b.patch_size, other.patch_size if other.patch_size > 0 else None)
                object.__setattr__(self, attr, dataclasses.replace(b, input_side=side))

    @property
    def branches(self) -> dict[str, BranchConfig]:
        return {"large": self.large, "small": self.small}

    def problems(self) -> list[str]:
        out = self.large.problems("large") + self.small.problems("small")
        if self.small.patch_size >= self.large.patch_size:
            out.append(f"small.patch_size={self.small.patch_size} must be < large.patch_size={self.large.patch_size}")
        if self.encoders < 1:
            out.append("encoders (K) must be >= 1")
        if self.fusion is not FusionScheme.NONE and self.fusion_depth < 1:
            out.append("fusion_depth (L) must be >= 1 when fusion is enabled")
        if self.num_classes < 1:
            out.append("num_classes must be >= 1")
        if self.base_input_side < 1:
            out.append("base_input_side must be positive")
        if not 0.0 <= self.drop_path < 1.0:
            out.append(f"drop_path must lie in [0, 1), got {self.drop_path}")
        if self.fusion is FusionScheme.PAIRWISE:
            gl, gs = self.large.grid, self.small.grid
            if gl[0] * gs[1] != gl[1] * gs[0]:
                out.append(f"pairwise fusion needs matching aspect ratios, got grids {gl} and {gs}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    warmup_epochs: int = 30
    batch_size: int = 4096
    base_lr: float = 0.004
    weight_decay: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"  # or "adamw"
    seed: int = 0
    dataset: str = "synth:n=64,classes=10,side=32,seed=0"
    eval_dataset: str = ""
    out_dir: str = "runs/default"
    label_smoothing: float = 0.0

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("train.epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            out.append(f"train.warmup_epochs={self.warmup_epochs} must be in [0, epochs={self.epochs})")
        if self.batch_size < 1:
            out.append("train.batch_size must be >= 1")
        if self.base_lr < 0 or self.weight_decay < 0:
            out.append("train.base_lr and weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            out.append("train.momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adamw"):
            out.append(f"train.optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


# ---------------------------------------------------------------------------
# presets


def _half_width(width: int, heads: int) -> tuple[int, int]:
    small_heads = max(1, heads // 2)
    dim = max(small_heads, (width // 2) // small_heads * small_heads)
    return dim, small_heads


def preset(name: str, num_classes: int | None = None, **overrides) -> ModelConfig:
    """Named architecture presets.

    ``ti``/``s``/``b`` use a DeiT-Ti/S/B-shaped large branch (12 blocks split over
    K=3 encoders) and a half-width, one-block-per-encoder small branch.
    ``micro`` and ``overfit`` are desk-scale models used by the test-suite.
    """
    name = name.lower()
    if name in ("ti", "s", "b"):
        width, heads = {"ti": (192, 3), "s": (384, 6), "b": (768, 12)}[name]
        sdim, sheads = _half_width(width, heads)
        cfg = ModelConfig(
            large=BranchConfig(patch_size=16, embed_dim=width, blocks=4, heads=heads),
            small=BranchConfig(patch_size=12, embed_dim=sdim, blocks=1, heads=sheads),
            encoders=3,
            fusion_depth=1,
            num_classes=num_classes or 1000,
            base_input_side=224,
        )
    elif name == "micro":
        cfg = ModelConfig(
            large=BranchConfig(patch_size=4, embed_dim=16, blocks=1, heads=2),
            small=BranchConfig(patch_size=2, embed_dim=16, blocks=1, heads=2),
            encoders=1,
            fusion_depth=1,
            num_classes=num_classes or 3,
            base_input_side=8,
        )
    elif name == "overfit":
        cfg = ModelConfig(
            large=BranchConfig(patch_size=8, embed_dim=64, blocks=2, heads=4),
            small=BranchConfig(patch_size=4, embed_dim=32, blocks=1, heads=2),
            encoders=2,
            fusion_depth=1,
            num_classes=num_classes or 10,
            base_input_side=32,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; expected ti, s, b, micro or overfit")
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()


PRESETS = ("ti", "s", "b", "micro", "overfit")


def train_preset(name: str) -> TrainConfig:
    """Training recipe paired with a model preset (the ImageNet-scale defaults otherwise)."""
    name = name.lower()
    if name in ("micro", "overfit"):
        return TrainConfig(
            epochs=40,
            warmup_epochs=5,
            batch_size=16,
            base_lr=1e-3,
            weight_decay=0.01,
            optimizer="adamw",
            dataset="synth:n=16,classes=3,side=8,seed=0" if name == "micro" else TrainConfig.dataset,
            out_dir=f"runs/{name}",
        )
    return TrainConfig()


# ---------------------------------------------------------------------------
# config file I/O

_MODEL_KEYS = {
    "encoders": ("encoders", int),
    "fusion_depth": ("fusion_depth", int),
    "fusion": ("fusion", FusionScheme.parse),
    "num_classes": ("num_classes", int),
    "base_input_side": ("base_input_side", int),
    "drop_path": ("drop_path", float),
    "no_cls": ("no_cls", None),
}

_BRANCH_KEYS = {
    "patch_size": int,
    "embed_dim": int,
    "blocks": int,
    "heads": int,
    "ffn_ratio": float,
    "tokenizer": str,
    "input_side": int,
    "conv_stem": parse_conv_stem,
}


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    return cp


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def model_to_sections(cfg: ModelConfig) -> dict[str, dict[str, str]]:
    model = {
        "num_classes": _fmt(cfg.num_classes),
        "base_input_side": _fmt(cfg.base_input_side),
        "encoders": _fmt(cfg.encoders),
        "fusion_depth": _fmt(cfg.fusion_depth),
        "fusion": _fmt(cfg.fusion),
        "drop_path": _fmt(cfg.drop_path),
        "no_cls": _fmt(cfg.no_cls),
    }
    out = {"model": model}
    for name, b in cfg.branches.items():
        sec = {
            "patch_size": _fmt(b.patch_size),
            "embed_dim": _fmt(b.embed_dim),
            "blocks": _fmt(b.blocks),
            "heads": _fmt(b.heads),
            "ffn_ratio": _fmt(float(b.ffn_ratio)),
            "tokenizer": b.tokenizer,
            "input_side": _fmt(b.input_side),
        }
        if b.conv_stem:
            sec["conv_stem"] = format_conv_stem(b.conv_stem)
        out[f"model.{name}"] = sec
    return out


def train_to_sections(cfg: TrainConfig) -> dict[str, dict[str, str]]:
    return {"train": {f.name: _fmt(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}}


def dumps(model: ModelConfig | None = None, train: TrainConfig | None = None) -> str:
    cp = _parser()
    sections = {}
    if model is not None:
        sections.update(model_to_sections(model))
    if train is not None:
        sections.update(train_to_sections(train))
    cp.read_dict(sections)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, raw: str, conv):
    try:
        return conv(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def model_from_sections(sections, base: ModelConfig | None = None) -> ModelConfig:
    problems: list[str] = []
    kwargs = {}
    model = dict(sections.get("model", {}))
    for key, raw in model.items():
        if key not in _MODEL_KEYS:
            problems.append(f"model.{key}: unknown key")
            continue
        attr, conv = _MODEL_KEYS[key]
        try:
            kwargs[attr] = _coerce(f"model.{key}", raw, conv or _bool)
        except ConfigError as exc:
            problems.extend(exc.problems)
    branches = {}
    for name in ("large", "small"):
        sec = dict(sections.get(f"model.{name}", {}))
        bk = {}
        for key, raw in sec.items():
            if key not in _BRANCH_KEYS:
                problems.append(f"model.{name}.{key}: unknown key")
                continue
            try:
                bk[key] = _coerce(f"model.{name}.{key}", raw, _BRANCH_KEYS[key])
            except ConfigError as exc:
                problems.extend(exc.problems)
        if base is not None:
            branches[name] = dataclasses.replace(getattr(base, name), **bk)
        else:
            missing = [k for k in ("patch_size", "embed_dim", "blocks", "heads") if k not in bk]
            if missing:
                problems.append(f"model.{name}: missing required keys {missing}")
                continue
            branches[name] = BranchConfig(**bk)
    if problems:
        raise ConfigError(problems)
    if base is not None:
        # branch sides re-derive from the (possibly changed) base and patch sizes unless pinned
        for name in ("large", "small"):
            if "input_side" not in sections.get(f"model.{name}", {}):
                branches[name] = dataclasses.replace(branches[name], input_side=0)
        cfg = dataclasses.replace(base, **branches, **kwargs)
    else:
        cfg = ModelConfig(**branches, **kwargs)
    return cfg.validate()


def train_from_sections(sections, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    problems, kwargs = [], {}
    for key, raw in dict(sections.get("train", {})).items():
        if key not in fields:
            problems.append(f"train.{key}: unknown key")
            continue
        current = getattr(base, key)
        conv = type(current) if not isinstance(current, bool) else _bool
        try:
            kwargs[key] = _coerce(f"train.{key}", raw, conv)
        except ConfigError as exc:
            problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return dataclasses.replace(base, **kwargs).validate()


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config text: {exc}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def loads_model(text: str, base: ModelConfig | None = None) -> ModelConfig:
    return model_from_sections(parse_sections(text), base)


def load(path, model_base: ModelConfig | None = None) -> tuple[ModelConfig | None, TrainConfig]:
    """Read a config file; returns (model config or None, train config)."""
    with open(path, encoding="utf-8") as fh:
        sections = parse_sections(fh.read())
    model = None
    if any(s == "model" or s.startswith("model.") for s in sections) or model_base is not None:
        model = model_from_sections(sections, model_base)
    return model, train_from_sections(sections)

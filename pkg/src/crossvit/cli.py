"""Command-line interface: ``crossvit {train,eval,gradcheck,analyze,adapt-res,synth}``."""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys

from . import config as cfgmod
from .config import ConfigError, ModelConfig, TrainConfig, preset, train_preset


def _thread_limit():
    n = os.environ.get("CRVT_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


_MODEL_FLAGS = ("num_classes", "base_input_side", "encoders", "fusion_depth", "fusion", "drop_path", "no_cls")


def _add_model_args(p: argparse.ArgumentParser, default_preset: str) -> None:
    p.add_argument("--config", help="config file ([model], [model.large], [model.small], [train] sections)")
    p.add_argument("--preset", default=None, help=f"architecture preset {cfgmod.PRESETS} (default {default_preset})")
    p.set_defaults(default_preset=default_preset)
    for key in _MODEL_FLAGS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"model_{key}", default=None)
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override any config key, e.g. --set model.small.embed_dim=64",
    )


def _add_train_args(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"train_{f.name}", default=None)


def _sections_from_args(args) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            sections = cfgmod.parse_sections(fh.read())
    for key in _MODEL_FLAGS:
        val = getattr(args, f"model_{key}", None)
        if val is not None:
            sections.setdefault("model", {})[key] = val
    if hasattr(args, "train_epochs"):
        for f in dataclasses.fields(TrainConfig):
            val = getattr(args, f"train_{f.name}")
            if val is not None:
                sections.setdefault("train", {})[f.name] = val
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, val = item.split("=", 1)
        section, _, key = lhs.strip().rpartition(".")
        if not section:
            raise ConfigError(f"--set key must be qualified by its section, got {lhs!r}")
        sections.setdefault(section, {})[key] = val.strip()
    return sections


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    sections = _sections_from_args(args)
    has_branches = all(f"model.{b}" in sections and "patch_size" in sections[f"model.{b}"] for b in ("large", "small"))
    name = args.preset or args.default_preset
    if args.preset is None and has_branches:
        model = cfgmod.model_from_sections(sections)
    else:
        model = cfgmod.model_from_sections(sections, preset(name))
    return model, cfgmod.train_from_sections(sections, train_preset(name))


def cmd_train(args) -> int:
    from .train import train

    model_cfg, train_cfg = resolve_configs(args)
    result = train(model_cfg, train_cfg)
    last = result.metrics[-1]
    print(
        f"trained {train_cfg.epochs} epochs: train_acc={last['train_acc']:.4f} "
        f"acc_l={last['acc_l']:.4f} acc_s={last['acc_s']:.4f} acc_ensemble={last['acc_ensemble']:.4f}"
    )
    print(f"metrics: {result.metrics_path}\nfinal checkpoint: {result.final_checkpoint}\nbest checkpoint: {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import from_spec
    from .train import dump_logits_csv, evaluate

    params, cfg = load_checkpoint(args.checkpoint)
    ds = from_spec(args.dataset, cfg.base_input_side)
    res = evaluate(params, cfg, ds, args.batch_size)
    print(f"n={res.n} acc_l={res.acc_l:.6f} acc_s={res.acc_s:.6f} acc_ensemble={res.acc_ensemble:.6f}")
    if args.dump_logits:
        dump_logits_csv(res, ds.labels, args.dump_logits)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    model_cfg, _ = resolve_configs(args)
    report = gradcheck(model_cfg, seed=args.seed, tolerance=args.tolerance)
    print(report.to_text())
    return 0 if report.passed else 1


def cmd_analyze(args) -> int:
    from .analysis import attn_cost, count_flops

    model_cfg, _ = resolve_configs(args)
    report = count_flops(model_cfg, args.input_side)
    if args.csv:
        text = report.to_csv()
        if args.csv == "-":
            sys.stdout.write(text)
        else:
            with open(args.csv, "w", encoding="utf-8") as fh:
                fh.write(text)
        for note in report.notes:
            print(f"note: {note}", file=sys.stderr)
    else:
        print(report.to_text())
        ac = attn_cost(model_cfg)
        if model_cfg.fusion.value in ("cross_attention", "all_attention"):
            print(
                f"attention entries per fusion pass: cross={ac.cross_attention:,} "
                f"all={ac.all_attention:,} ratio={ac.ratio:.1f}"
            )
    return 0


def cmd_adapt_res(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import adapt_resolution

    params, cfg = load_checkpoint(args.checkpoint)
    new_params, new_cfg = adapt_resolution(params, cfg, args.side)
    save_checkpoint(new_params, new_cfg, args.out)
    print(
        f"adapted {cfg.base_input_side} -> {new_cfg.base_input_side}: "
        f"large side {new_cfg.large.input_side}, small side {new_cfg.small.input_side}; wrote {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    from .data import synth_dataset

    ds = synth_dataset(args.n, args.classes, args.side, args.seed)
    ds.save(args.out)
    print(f"wrote {len(ds)} images ({args.side}x{args.side}, {args.classes} classes) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossvit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; writes metrics.csv, final.crvt, best.crvt")
    _add_model_args(p, "overfit")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="synth:..., cifar10:DIR[,split=test] or npz:PATH")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--dump-logits", help="write per-sample logits to this CSV file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    _add_model_args(p, "micro")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="parameter / FLOP / attention-map cost report")
    _add_model_args(p, "s")
    p.add_argument("--input-side", type=int, default=None)
    p.add_argument("--csv", help="write CSV to this path ('-' for stdout)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("adapt-res", help="re-grid position embeddings of a checkpoint for a new input side")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--side", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt_res)

    p = sub.add_parser("synth", help="write a synthetic blob dataset (.npz)")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

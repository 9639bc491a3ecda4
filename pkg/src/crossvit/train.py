"""Training loop, optimizers, LR schedule and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import Dataset, DatasetError, from_spec
from .model import Parameters, build, forward
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_acc", "acc_l", "acc_s", "acc_ensemble"]


class TrainingError(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def _decays(t: Tensor) -> bool:
    # biases, norm affines and the cls/position tables are not decayed
    name = t.name or ""
    return t.ndim >= 2 and not name.endswith(("pos_embed", "cls_token"))


class SGD:
    """Momentum SGD with decoupled weight decay: p <- p(1 - lr*wd) - lr*v, v <- m*v + g."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            v = self.velocity[i] = self.momentum * self.velocity[i] + p.grad
            if lr == 0.0:
                continue
            data = p.data
            if self.weight_decay and _decays(p):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * v


class AdamW:
    def __init__(self, params: list[Tensor], weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            data = p.data
            if self.weight_decay and _decays(p):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def make_optimizer(params: Parameters, cfg: TrainConfig):
    tensors = params.tensors()
    if cfg.optimizer == "adamw":
        return AdamW(tensors, cfg.weight_decay)
    return SGD(tensors, cfg.momentum, cfg.weight_decay)


def loss_fn(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    ce = T.cross_entropy(logits, labels)
    if not smoothing:
        return ce
    uniform = T.scale(T.mean(T.log_softmax(logits, axis=-1)), -1.0)
    return T.add(T.scale(ce, 1.0 - smoothing), T.scale(uniform, smoothing))


def first_non_finite(params: Parameters, loss: Tensor) -> str:
    """Earliest non-finite tensor: parameters, then forward activations in order, then gradients."""
    named = params.named()
    for name, t in named.items():
        if not np.all(np.isfinite(t.data)):
            return f"parameter {name}"
    for i, t in enumerate(T.Tape.from_root(loss).nodes):
        if not np.all(np.isfinite(t.data)):
            return f"op #{i} ({t.node.op}) output of shape {t.shape}"
    for name, t in named.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"gradient of {name}"
    return "loss"


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    acc_l: float
    acc_s: float
    acc_ensemble: float
    n: int
    logits: tuple = field(default=(), repr=False)  # (logits_l, logits_s, ensemble) arrays


def predict(params: Parameters, config: ModelConfig, images: np.ndarray, batch_size: int = 128):
    outs = [[], [], []]
    with no_grad():
        for i in range(0, len(images), batch_size):
            ll, ls, le = forward(params, config, images[i : i + batch_size], return_branches=True)
            for o, t in zip(outs, (ll, ls, le)):
                o.append(t.data)
    return tuple(np.concatenate(o) for o in outs)


def evaluate(params: Parameters, config: ModelConfig, dataset: Dataset, batch_size: int = 128) -> EvalResult:
    """Eval-mode top-1 accuracy of each head and of the ensemble."""
    if dataset.num_classes != config.num_classes:
        raise DatasetError(f"dataset has {dataset.num_classes} classes, model predicts {config.num_classes}")
    ds = dataset.resized(config.base_input_side)
    logits = predict(params, config, ds.images, batch_size)
    accs = [float(np.mean(np.argmax(z, axis=1) == ds.labels)) for z in logits]
    return EvalResult(*accs, n=len(ds), logits=logits)


def evaluate_checkpoint(path, dataset: Dataset, batch_size: int = 128) -> EvalResult:
    params, cfg = load_checkpoint(path)
    return evaluate(params, cfg, dataset, batch_size)


def dump_logits_csv(result: EvalResult, labels: np.ndarray, path) -> None:
    """One row per sample: label, then logits of the large head, small head and ensemble."""
    ll, ls, le = result.logits
    k = ll.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"{h}{j}" for h in ("l", "s", "e") for j in range(k)])
        for i in range(len(labels)):
            w.writerow([int(labels[i])] + [repr(float(v)) for v in np.concatenate([ll[i], ls[i], le[i]])])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: Parameters
    metrics: list
    final_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    metrics_path: Path | None = None


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["epoch"]] + [_fmt(r[k]) for k in METRICS_HEADER[1:]])
    return buf.getvalue()


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: Dataset | None = None,
    eval_dataset: Dataset | None = None,
    out_dir=None,
    params: Parameters | None = None,
) -> TrainResult:
    """Train on ``dataset`` (or ``train_config.dataset``), writing metrics and checkpoints to ``out_dir``."""
    model_config.validate()
    train_config.validate()
    side = model_config.base_input_side
    if dataset is None:
        dataset = from_spec(train_config.dataset, side)
    if eval_dataset is None and train_config.eval_dataset:
        eval_dataset = from_spec(train_config.eval_dataset, side)
    dataset = dataset.resized(side)
    eval_dataset = (eval_dataset or dataset).resized(side)
    if dataset.num_classes != model_config.num_classes:
        raise DatasetError(f"dataset has {dataset.num_classes} classes, model predicts {model_config.num_classes}")

    if params is None:
        params = build(model_config, train_config.seed)
    opt = make_optimizer(params, train_config)
    n = len(dataset)
    bs = min(train_config.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = steps_per_epoch * train_config.epochs
    warmup = steps_per_epoch * train_config.warmup_epochs

    out = Path(out_dir if out_dir is not None else train_config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    final_ckpt, best_ckpt = out / "final.crvt", out / "best.crvt"

    rows, best, step = [], -1.0, 0
    lr = 0.0
    for epoch in range(train_config.epochs):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            lr = lr_at(step, total, warmup, train_config.base_lr)
            rng = np.random.default_rng([train_config.seed, epoch, b])
            logits = forward(params, model_config, dataset.images[idx], training=True, rng=rng)
            loss = loss_fn(logits, dataset.labels[idx], train_config.label_smoothing)
            params.zero_grad()
            T.backward(loss)
            if not np.isfinite(loss.item()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {b}; first non-finite tensor: {first_non_finite(params, loss)}"
                )
            opt.step(lr)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == dataset.labels[idx]))
            step += 1
        ev = evaluate(params, model_config, eval_dataset)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / n,
            "train_acc": correct / n,
            "acc_l": ev.acc_l,
            "acc_s": ev.acc_s,
            "acc_ensemble": ev.acc_ensemble,
        }
        rows.append(row)
        log.info("epoch %d lr %.3g loss %.4f train_acc %.3f acc_l %.3f acc_s %.3f acc_e %.3f", epoch, lr,
                 row["train_loss"], row["train_acc"], ev.acc_l, ev.acc_s, ev.acc_ensemble)
        metrics_path.write_text(metrics_csv(rows))
        if ev.acc_ensemble > best:
            best = ev.acc_ensemble
            save_checkpoint(params, model_config, best_ckpt)
    save_checkpoint(params, model_config, final_ckpt)
    return TrainResult(params, rows, final_ckpt, best_ckpt, metrics_path)

"""Datasets: CIFAR-10 binary batches, deterministic synthetic blobs, and .npz dumps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import interp
from .tensor import Tensor, no_grad

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, S, S) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DatasetError(f"images must be (n, 3, S, S), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def resized(self, side: int) -> "Dataset":
        if side == self.side:
            return self
        with no_grad():
            out = interp.resize_planes(Tensor(self.images), (side, side), "bilinear").data
        return Dataset(out, self.labels, self.num_classes)

    def save(self, path) -> None:
        np.savez(path, images=self.images, labels=self.labels, num_classes=self.num_classes)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["images"].astype(np.float64), z["labels"], int(z["num_classes"]))


def parse_cifar10_bytes(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records into uint8 images (n, 3, 32, 32) and labels."""
    if len(buf) % CIFAR_RECORD:
        raise DatasetError(f"file length {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record size")
    recs = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(f"record {bad} has label byte {labels[bad]} > 9")
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(
    path,
    split: str = "train",
    side: int | None = None,
    normalize: bool = False,
    limit: int | None = None,
) -> Dataset:
    """Load ``data_batch_*.bin`` (train) or ``test_batch.bin`` (test) from a directory, or one file."""
    path = Path(path)
    if path.is_dir():
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(path.glob(pattern))
        if not files:
            raise DatasetError(f"no {pattern} files in {path}")
    else:
        files = [path]
    images, labels = [], []
    for f in files:
        im, lb = parse_cifar10_bytes(f.read_bytes())
        images.append(im)
        labels.append(lb)
    x = np.concatenate(images).astype(np.float64) / 255.0
    y = np.concatenate(labels)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    if normalize:
        x = (x - np.array(CIFAR_MEAN)[:, None, None]) / np.array(CIFAR_STD)[:, None, None]
    ds = Dataset(x, y, 10)
    return ds.resized(side) if side else ds


def synth_dataset(n: int, num_classes: int, side: int, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Class-conditional Gaussian blobs: each class has its own centre, width and colour."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(num_classes, 2)) * side
    widths = rng.uniform(0.08, 0.2, size=num_classes) * side
    colours = rng.uniform(0.2, 1.0, size=(num_classes, 3))
    labels = rng.permutation(np.arange(n) % num_classes)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    images = np.empty((n, 3, side, side))
    for i, c in enumerate(labels):
        cy, cx = centres[c] + rng.normal(0.0, 0.03 * side, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * widths[c] ** 2))
        img = colours[c][:, None, None] * blob + noise * rng.standard_normal((3, side, side))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, num_classes)


def _kv(text: str) -> dict[str, str]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise DatasetError(f"expected key=value in dataset spec, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def from_spec(spec: str, side: int | None = None) -> Dataset:
    """Build a dataset from ``synth:n=..,classes=..,side=..,seed=..``, ``cifar10:DIR[,split=..,limit=..]`` or ``npz:PATH``."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "synth":
        kv = _kv(rest)
        ds = synth_dataset(
            int(kv.get("n", 64)),
            int(kv.get("classes", 10)),
            int(kv.get("side", side or 32)),
            int(kv.get("seed", 0)),
        )
    elif kind == "cifar10":
        loc, _, opts = rest.partition(",")
        kv = _kv(opts)
        ds = load_cifar10_binary(
            loc,
            split=kv.get("split", "train"),
            normalize=kv.get("normalize", "false").lower() == "true",
            limit=int(kv["limit"]) if "limit" in kv else None,
        )
    elif kind == "npz":
        ds = Dataset.load(rest)
    else:
        raise DatasetError(f"unknown dataset kind {kind!r} in spec {spec!r}")
    return ds.resized(side) if side else ds

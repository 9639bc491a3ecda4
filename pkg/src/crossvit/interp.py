"""Separable resampling of image planes and token grids.

Resampling is expressed as dense (out x in) weight matrices so it composes with
the autodiff engine through ordinary matmuls.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _cubic(t: np.ndarray, a: float) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1.0,
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0,
        np.where(t < 2.0, ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a, 0.0),
    )


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, edge-clamped."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.75) -> np.ndarray:
    """Cubic-convolution weights with corner alignment and replicated borders.

    Output sample ``i`` sits at source coordinate ``i * (n_in - 1) / (n_out - 1)``,
    so the first and last samples land exactly on source knots.
    """
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        i0 = int(np.floor(src))
        t = src - i0
        for off in (-1, 0, 1, 2):
            w = float(_cubic(np.array(t - off), a))
            j = min(max(i0 + off, 0), n_in - 1)
            m[i, j] += w
    return m


def resize_matrix(n_in: int, n_out: int, kind: str) -> np.ndarray:
    if kind == "bilinear":
        return bilinear_matrix(n_in, n_out)
    if kind == "bicubic":
        return bicubic_matrix(n_in, n_out)
    raise ValueError(f"unknown interpolation kind {kind!r}")


def resize_planes(x: Tensor, out_hw: tuple[int, int], kind: str = "bilinear") -> Tensor:
    """Resize the last two axes of ``x`` (..., H, W) to ``out_hw``."""
    h, w = x.shape[-2:]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return x
    rh = Tensor(resize_matrix(h, oh, kind))
    rw_t = Tensor(resize_matrix(w, ow, kind).T.copy())
    return T.matmul(T.matmul(rh, x), rw_t)


def resize_tokens(
    tokens: Tensor, old_grid: tuple[int, int], new_grid: tuple[int, int], kind: str = "bilinear"
) -> Tensor:
    """Resize a (B, rows*cols, C) token grid to ``new_grid`` per channel."""
    b, n, c = tokens.shape
    r, q = old_grid
    if r * q != n:
        raise ValueError(f"grid {old_grid} does not hold {n} tokens")
    if tuple(old_grid) == tuple(new_grid):
        return tokens
    planes = T.transpose(T.reshape(tokens, (b, r, q, c)), (0, 3, 1, 2))
    out = resize_planes(planes, new_grid, kind)
    nr, nq = new_grid
    return T.reshape(T.transpose(out, (0, 2, 3, 1)), (b, nr * nq, c))

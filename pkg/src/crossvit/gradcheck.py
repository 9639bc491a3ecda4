"""Whole-model gradient check against central finite differences."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig, preset
from .model import build, forward
from .tensor import no_grad

TOLERANCE = 1e-3
EPS = 1e-4
# entries whose true gradient is below this are compared absolutely
REL_FLOOR = 1e-6


@dataclass
class GradcheckRow:
    name: str
    size: int
    max_rel_err: float


@dataclass
class GradcheckReport:
    rows: list = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r.max_rel_err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = [f"{'tensor':<48}{'size':>8}{'max_rel_err':>14}"]
        for r in self.rows:
            flag = "" if r.max_rel_err < self.tolerance else "  FAIL"
            lines.append(f"{r.name:<48}{r.size:>8}{r.max_rel_err:>14.3e}{flag}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: max rel err {self.max_rel_err:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(
    config: ModelConfig | None = None,
    seed: int = 0,
    batch: int = 2,
    eps: float = EPS,
    tolerance: float = TOLERANCE,
    tamper: Callable | None = None,
) -> GradcheckReport:
    """Compare every parameter gradient of the ensemble cross-entropy with central differences.

    ``tamper(name, grad) -> grad`` may alter analytic gradients before comparison.
    """
    config = config or preset("micro")
    params = build(config, seed)
    rng = np.random.default_rng([seed, 1])
    s = config.base_input_side
    images = rng.random((batch, 3, s, s))
    labels = rng.integers(0, config.num_classes, size=batch)

    def loss_value() -> float:
        with no_grad():
            return T.cross_entropy(forward(params, config, images), labels).item()

    loss = T.cross_entropy(forward(params, config, images), labels)
    params.zero_grad()
    T.backward(loss)

    report = GradcheckReport(tolerance=tolerance)
    for name, t in params.named().items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if tamper is not None:
            analytic = tamper(name, analytic.copy())
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value()
            flat[i] = orig - eps
            down = loss_value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
        report.rows.append(GradcheckRow(name, t.size, float(np.max(rel_error(analytic, numeric)))))
    return report

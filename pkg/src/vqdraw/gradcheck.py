"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

# coordinates whose gradients fall below this are compared on an absolute scale
DEFAULT_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    excluded: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    nonfinite: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.checked > 0 and self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.0e} checked={self.checked}"
        if self.excluded:
            msg += f" excluded={len(self.excluded)} (kinks)"
        if self.nonfinite:
            msg += f" nonfinite at {self.nonfinite[0]}"
        if self.worst is not None:
            msg += f" worst={self.worst[0]}{list(self.worst[1])}"
        return msg


def relative_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _is_kink(f0: float, evaluate: Callable[[float], float], h: float) -> bool:
    # For a smooth function the one-sided slopes differ by h * f''; halving h
    # halves the gap. A slope jump inside the bracket keeps the gap constant.
    gap_h = (evaluate(h) - 2 * f0 + evaluate(-h)) / h
    gap_half = (evaluate(h / 2) - 2 * f0 + evaluate(-h / 2)) / (h / 2)
    noise = 100 * np.finfo(np.float64).eps * (abs(f0) + 1.0) / h
    return abs(gap_h - 2 * gap_half) > max(0.25 * abs(gap_h), noise)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    fd_step: float = 1e-5,
    tolerance: float = 1e-6,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = DEFAULT_FLOOR,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` takes no arguments and must read the current values of ``params``,
    which are perturbed in place one coordinate at a time and restored.
    Coordinates where the function has a slope discontinuity within the
    finite-difference bracket (e.g. a relu input at exactly zero) are
    excluded and listed in the report. ``max_coords`` subsamples each
    parameter for large networks.
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss = f()
    analytic = backward(loss, params)
    f0 = loss.item()
    rng = rng or np.random.default_rng(0)

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance, checked=0)
    if not math.isfinite(f0):
        report.nonfinite.append(("<base>", ()))
        report.max_rel_error = math.inf
        return report

    for name, p, grad in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for k in coords:
            index = np.unravel_index(k, p.shape)
            original = flat[k]

            def evaluate(delta, _k=k, _orig=original):
                flat[_k] = _orig + delta
                try:
                    return f().item()
                finally:
                    flat[_k] = _orig

            f_plus, f_minus = evaluate(fd_step), evaluate(-fd_step)
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                report.nonfinite.append((name, tuple(int(i) for i in index)))
                report.max_rel_error = math.inf
                continue
            numeric = (f_plus - f_minus) / (2 * fd_step)
            err = relative_error(float(grad[index]), numeric, floor)
            if err >= tolerance and _is_kink(f0, evaluate, fd_step):
                report.excluded.append((name, tuple(int(i) for i in index)))
                continue
            report.checked += 1
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, tuple(int(i) for i in index))
    return report

"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .functional import record_branches
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst_index: Optional[tuple] = None
    skipped: int = 0  # probes discarded because they crossed a kink

    @property
    def passed(self) -> bool:
        return bool(self.n_checked > 0 and self.max_rel_error <= self.tolerance)


def relative_error(a, n, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    fn: Callable[[], Tensor],
    wrt: Tensor,
    tolerance: float,
    h: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
    max_probes: Optional[int] = None,
    zero: Sequence[Tensor] = (),
    skip_kinks: bool = False,
    floor: Optional[float] = None,
) -> GradCheckReport:
    """Compare the backward pass of ``fn`` to central differences w.r.t. ``wrt``.

    ``fn`` is re-evaluated from scratch on every probe and must read
    ``wrt.data`` (which is perturbed in place). Non-scalar outputs are
    reduced with a fixed random projection. Differences are taken on the
    raw outputs before projection so unaffected elements cancel exactly.
    ``zero`` lists other leaves whose gradients should be cleared first.

    With ``skip_kinks`` a probe whose +h or -h evaluation flips any ReLU
    sign or pooling winner is discarded and another entry is drawn; the
    difference quotient across a kink does not estimate the derivative.

    ``floor`` bounds the denominator of the relative error from below
    (default 1e-8); :func:`resolution_floor` gives the value matched to
    the rounding noise of the difference quotient.
    """
    if wrt.data.dtype != np.float64:
        raise TypeError("grad_check needs float64 data")
    rng = rng or np.random.default_rng(0)
    for t in (wrt, *zero):
        t.grad = None
    with record_branches() as base:
        out = fn()
    proj = np.ones(()) if out.data.size == 1 else rng.standard_normal(out.shape)
    out.backward(np.broadcast_to(proj, out.shape).astype(out.dtype))
    analytic = np.zeros_like(wrt.data) if wrt.grad is None else wrt.grad.copy()

    flat = wrt.data.reshape(-1)
    wanted = flat.size if max_probes is None else min(max_probes, flat.size)
    if skip_kinks:
        candidates = rng.permutation(flat.size)
    elif wanted < flat.size:
        candidates = np.sort(rng.choice(flat.size, size=wanted, replace=False))
    else:
        candidates = np.arange(flat.size)
    worst, worst_at = 0.0, None
    checked = skipped = 0
    for i in candidates:
        if checked == wanted:
            break
        orig = flat[i]
        with record_branches() as up:
            flat[i] = orig + h
            plus = fn().data
        with record_branches() as down:
            flat[i] = orig - h
            minus = fn().data
        flat[i] = orig
        if skip_kinks and not (_same_branches(base, up) and _same_branches(base, down)):
            skipped += 1
            continue
        checked += 1
        numeric = float(np.sum((plus - minus) * proj)) / (2 * h)
        err = float(relative_error(analytic.reshape(-1)[i], numeric, 1e-8 if floor is None else floor))
        if err > worst:
            worst, worst_at = err, np.unravel_index(i, wrt.shape)
    return GradCheckReport(worst, tolerance, checked, worst_at, skipped)


def resolution_floor(value: float, h: float) -> float:
    """Smallest derivative a central difference of a scalar near ``value`` resolves to ~1e-4.

    Rounding perturbs each evaluation by a few ulps of ``value``, so the
    quotient carries noise of order eps * |value| / h; below this floor
    the comparison is effectively absolute.
    """
    return 1e4 * np.finfo(np.float64).eps * max(abs(value), 1.0) / h

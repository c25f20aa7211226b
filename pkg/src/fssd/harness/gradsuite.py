"""Finite-difference suite behind the ``gradcheck`` subcommand.

Every differentiable kernel is checked against central differences in
float64 over a range of seeds, followed by the full multibox loss of a
tiny detector with the mined negatives held fixed (mining is a
non-differentiable selection, so it is frozen at the unperturbed point).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional

import numpy as np

from ..model import FSSD, ModelConfig
from ..multibox import GroundTruth, match_priors, multibox_loss
from ..tensor_core import BatchNormParams, ConvParams, Tensor, functional as F, grad_check, no_grad
from ..tensor_core.gradcheck import resolution_floor

LINEAR_TOL = 1e-7
BN_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class SuiteResult:
    check: str
    seed: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# Central differences are exact for maps that are linear around the probe
# point, so the piecewise-linear kernels use a wide step (small rounding
# error); smooth nonlinear ones keep a narrow step (small truncation error).
WIDE_H = 1e-3
NARROW_H = 1e-5


def _worst(fn, leaves, tol, rng, h=WIDE_H) -> float:
    return max(grad_check(fn, t, tol, h=h, rng=rng).max_rel_error for t in leaves)


def _conv(rng, tol):
    x = _leaf(rng.standard_normal((2, 3, 6, 5)))
    errs = []
    for k, s, pad in ((3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 2, 0)):
        p = ConvParams(_leaf(rng.standard_normal((4, 3, k, k))), _leaf(rng.standard_normal(4)), s, pad)
        errs.append(_worst(lambda: F.conv2d(x, p), (x, p.weight, p.bias), tol, rng))
    return max(errs)


def _pool(rng, tol):
    # distinct, well separated values keep every probe away from a tie
    x = _leaf(rng.permutation(2 * 7 * 7).reshape(1, 2, 7, 7) * 0.1)
    return max(
        _worst(lambda: F.max_pool2d(x, 2, 2, True), (x,), tol, rng),
        _worst(lambda: F.max_pool2d(x, 3, 2, True), (x,), tol, rng),
    )


def _bilinear(rng, tol):
    x = _leaf(rng.standard_normal((1, 2, 5, 4)))
    return max(
        _worst(lambda: F.bilinear_resize(x, 10, 9), (x,), tol, rng),
        _worst(lambda: F.bilinear_resize(x, 3, 2), (x,), tol, rng),
    )


def _batch_norm(rng, tol):
    x = _leaf(rng.standard_normal((2, 3, 3, 3)))
    p = BatchNormParams(_leaf(rng.uniform(0.5, 1.5, 3)), _leaf(rng.standard_normal(3)), np.zeros(3), np.ones(3))
    return max(
        _worst(lambda: F.batch_norm(x, p, mode), (x, p.gamma, p.beta), tol, rng, NARROW_H) for mode in (True, False)
    )


def _relu(rng, tol):
    base = rng.standard_normal((1, 2, 4, 4))
    x = _leaf(base + np.sign(base) * 0.01)  # no entry within a probe step of the kink
    return _worst(lambda: F.relu(x), (x,), tol, rng)


def _concat_sum_slice(rng, tol):
    a = _leaf(rng.standard_normal((1, 2, 3, 3)))
    b = _leaf(rng.standard_normal((1, 3, 3, 3)))
    c = _leaf(rng.standard_normal((1, 2, 3, 3)))
    return max(
        _worst(lambda: F.concat_channels([a, b]), (a, b), tol, rng),
        _worst(lambda: F.elementwise_add([a, c]), (a, c), tol, rng),
        _worst(lambda: F.slice_channels(b, 1, 3), (b,), tol, rng),
    )


def _losses(rng, tol):
    logits = _leaf(rng.standard_normal((5, 4)))
    targets = rng.integers(0, 4, 5)
    pred = _leaf(rng.standard_normal((6, 4)) * 2)
    target = rng.standard_normal((6, 4))
    return max(
        _worst(lambda: F.softmax_cross_entropy(logits, targets), (logits,), tol, rng, NARROW_H),
        _worst(lambda: F.smooth_l1(pred, target), (pred,), tol, rng, NARROW_H),
    )


def tiny_model_config() -> ModelConfig:
    """An 80-pixel detector whose base map is 10x10, small enough for finite differences."""
    return ModelConfig.from_dict(
        {
            "backbone": {"input_size": 80, "stage_channels": [2, 3, 4, 4, 4]},
            "fusion": {"projection_channels": [3, 3, 3], "pyramid_channels": [4, 4, 4, 4]},
            "model": {"num_classes": 3, "dtype": "float64"},
        }
    )


def end_to_end_error(seed: int, tol: float = LOSS_TOL, probes_per_tensor: int = 2) -> float:
    """Worst relative error of d(loss)/d(parameter) over sampled entries of every parameter."""
    rng = np.random.default_rng(seed)
    model = FSSD(tiny_model_config(), seed=seed).train()
    images = Tensor(rng.uniform(-0.5, 0.5, (2, 3, 80, 80)))
    gts = []
    for _ in range(2):
        lo = rng.uniform(0.05, 0.5, (2, 2))
        side = rng.uniform(0.2, 0.45, (2, 2))
        gts.append(GroundTruth(np.concatenate([lo, lo + side], axis=1), rng.integers(1, 3, 2)))
    matches = [match_priors(g, model.priors.boxes) for g in gts]
    with no_grad():
        _, conf = model(images)
    negatives = multibox_loss(Tensor(np.zeros(conf.shape[:2] + (4,))), conf, matches).negatives

    def loss():
        loc, conf = model(images)
        return multibox_loss(loc, conf, matches, negatives=negatives).loss

    # probes straddling a ReLU/pool kink are redrawn; derivatives below the
    # rounding resolution of the loss are compared absolutely
    floor = resolution_floor(float(loss().data), 1e-5)
    worst = 0.0
    for _, p in model.named_parameters():
        r = grad_check(loss, p, tol, rng=rng, max_probes=probes_per_tensor, skip_kinks=True, floor=floor)
        worst = max(worst, r.max_rel_error)
    return worst


KERNELS = {
    "conv2d": (_conv, LINEAR_TOL),
    "max_pool2d": (_pool, LINEAR_TOL),
    "bilinear_resize": (_bilinear, LINEAR_TOL),
    "relu": (_relu, LINEAR_TOL),
    "concat/sum/slice": (_concat_sum_slice, LINEAR_TOL),
    "losses": (_losses, 1e-6),
    "batch_norm": (_batch_norm, BN_TOL),
}


def run_suite(
    seeds: Iterable[int] = range(10),
    tolerance: Optional[float] = None,
    end_to_end: bool = True,
    report: Optional[Callable[[SuiteResult], None]] = None,
) -> List[SuiteResult]:
    """``tolerance`` overrides every per-check tolerance when given."""
    out: List[SuiteResult] = []
    seeds = list(seeds)
    checks = [(name, fn, tol) for name, (fn, tol) in KERNELS.items()]
    for name, fn, tol in checks:
        tol = tolerance if tolerance is not None else tol
        for seed in seeds:
            res = SuiteResult(name, seed, fn(np.random.default_rng(seed), tol), tol)
            out.append(res)
            if report:
                report(res)
    if end_to_end:
        tol = tolerance if tolerance is not None else LOSS_TOL
        for seed in seeds:
            res = SuiteResult("multibox_loss end-to-end", seed, end_to_end_error(seed, tol), tol)
            out.append(res)
            if report:
                report(res)
    return out

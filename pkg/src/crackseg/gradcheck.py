"""Finite-difference checks for every differentiable op and a residual block.

Each check builds a small random instance, reduces the op output to a
scalar with a fixed random probe (``sum(out * R)`` with ``|R|`` in
[0.5, 1.5]) and compares backward() against central differences in
float32. Piecewise-linear ops use a large step, which is exact as long as
no kink is crossed; instances are drawn away from kinks and any element
whose perturbation still crosses one is skipped by the checker.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import build_residual_block
from .tensor import Tensor, grad_check_detail

TOLERANCE = 1e-2
N_SEEDS = 10


@dataclass
class CheckResult:
    op: str
    max_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error < TOLERANCE


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _probe(rng, shape) -> Tensor:
    return Tensor(rng.choice([-1.0, 1.0], shape) * rng.uniform(0.5, 1.5, shape))


def _reduce(out: Tensor, probe: Tensor) -> Tensor:
    return T.tensor_sum(T.mul(out, probe))


def check_conv2d(rng):
    x = _param(rng, (2, 2, 5, 5))
    w = _param(rng, (3, 2, 3, 3), 0.5)
    b = _param(rng, (3,), 0.1)
    same = _probe(rng, (2, 3, 5, 5))
    strided = _probe(rng, (2, 3, 3, 3))
    e1 = grad_check_detail(lambda: _reduce(T.conv2d(x, w, b), same), [x, w, b], eps=0.5)
    e2 = grad_check_detail(lambda: _reduce(T.conv2d(x, w, b, stride=2, padding=1), strided),
                           [x, w, b], eps=0.5)
    return max(e1[0], e2[0]), e1[1] + e2[1], e1[2] + e2[2]


def check_conv2d_transpose(rng):
    x = _param(rng, (2, 2, 3, 3))
    w = _param(rng, (2, 3, 2, 2), 0.5)
    b = _param(rng, (3,), 0.1)
    r = _probe(rng, (2, 3, 6, 6))
    return grad_check_detail(lambda: _reduce(T.conv2d_transpose(x, w, b, 2), r), [x, w, b], eps=0.5)


def _spaced(rng, shape) -> np.ndarray:
    # distinct values one unit apart so small steps never change a window max
    n = int(np.prod(shape))
    return (rng.permutation(n) - n / 2).reshape(shape).astype(np.float32)


def check_maxpool2d(rng):
    x = Tensor(_spaced(rng, (2, 2, 4, 4)), requires_grad=True)
    r = _probe(rng, (2, 2, 2, 2))
    return grad_check_detail(lambda: _reduce(T.maxpool2d(x)[0], r), [x], eps=0.25)


def check_max_unpool2d(rng):
    _, idx = T.maxpool2d(Tensor(_spaced(rng, (2, 2, 4, 4))))
    x = _param(rng, (2, 2, 2, 2))
    r = _probe(rng, (2, 2, 4, 4))
    return grad_check_detail(lambda: _reduce(T.max_unpool2d(x, idx, (4, 4)), r), [x], eps=0.5)


def check_relu(rng):
    # away from the kink at 0
    x = Tensor(rng.choice([-1.0, 1.0], (2, 3, 4, 4)) * rng.uniform(0.25, 1.5, (2, 3, 4, 4)),
               requires_grad=True)
    r = _probe(rng, x.shape)
    return grad_check_detail(lambda: _reduce(T.relu(x), r), [x], eps=0.1)


def check_sigmoid(rng):
    x = _param(rng, (2, 3, 4, 4))
    r = _probe(rng, x.shape)
    return grad_check_detail(lambda: _reduce(T.sigmoid(x), r), [x], eps=1e-2)


def check_concat(rng):
    a = _param(rng, (2, 2, 3, 3))
    b = _param(rng, (2, 1, 3, 3))
    r = _probe(rng, (2, 3, 3, 3))
    return grad_check_detail(lambda: _reduce(T.concat_channels(a, b), r), [a, b], eps=0.5)


def check_add(rng):
    a = _param(rng, (2, 2, 3, 3))
    b = _param(rng, (2, 2, 3, 3))
    r = _probe(rng, a.shape)
    return grad_check_detail(lambda: _reduce(T.add(a, b), r), [a, b], eps=0.5)


def check_bce_loss(rng):
    p = Tensor(rng.uniform(0.1, 0.9, (2, 1, 3, 3)), requires_grad=True)
    t = Tensor(rng.integers(0, 2, (2, 1, 3, 3)).astype(np.float32))
    return grad_check_detail(lambda: T.bce_loss(p, t), [p], eps=1e-2)


def _relu_margin(out: Tensor) -> float:
    pre = [n._parents[0].data for n in T._graph_nodes(out) if n.op == "relu"]
    return min(float(np.abs(z).min()) for z in pre)


def check_residual_block(rng, margin: float = 0.2, max_tries: int = 100_000):
    """Projection-shortcut residual block (1 -> 2 channels, 3x3 kernels)."""
    for _ in range(max_tries):
        block = build_residual_block(1, 2, 3, seed=int(rng.integers(2**31)))
        params = list(block.parameters().values())
        for p in params:
            if p.data.ndim == 1:
                p.data = (rng.standard_normal(p.shape) * 0.1).astype(np.float32)
        x = _param(rng, (1, 1, 3, 3))
        if _relu_margin(block(x)) > margin:
            break
    r = _probe(rng, (1, 2, 3, 3))
    return grad_check_detail(lambda: _reduce(block(x), r), [x] + params, eps=0.1)


CHECKS: dict[str, tuple[Callable, str]] = {
    # name -> (check, tensor op it exercises for fault injection)
    "conv2d": (check_conv2d, "conv2d"),
    "conv2d_transpose": (check_conv2d_transpose, "conv2d_transpose"),
    "maxpool2d": (check_maxpool2d, "maxpool2d"),
    "max_unpool2d": (check_max_unpool2d, "max_unpool2d"),
    "relu": (check_relu, "relu"),
    "sigmoid": (check_sigmoid, "sigmoid"),
    "concat_channels": (check_concat, "concat"),
    "add": (check_add, "add"),
    "bce_loss": (check_bce_loss, "bce_loss"),
    "residual_block": (check_residual_block, "add"),
}


def run_gradchecks(seed: int = 0, n_seeds: int = N_SEEDS, only: list[str] | None = None,
                   inject: str | None = None) -> list[CheckResult]:
    """Run every check over seeds ``seed .. seed + n_seeds - 1``.

    ``inject`` names a check whose underlying op gets a deliberately wrong
    gradient rule (negative control).
    """
    names = only or list(CHECKS)
    ctx = T.corrupt_gradient(CHECKS[inject][1]) if inject else contextlib.nullcontext()
    results = []
    with ctx:
        for name in names:
            fn, _ = CHECKS[name]
            worst, checked, skipped = 0.0, 0, 0
            for s in range(seed, seed + n_seeds):
                e, c, k = fn(np.random.default_rng(s))
                worst, checked, skipped = max(worst, e), checked + c, skipped + k
            results.append(CheckResult(name, worst, checked, skipped))
    return results

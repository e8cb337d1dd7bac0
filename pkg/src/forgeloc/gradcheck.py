"""Finite-difference gradient checking.

Central differences with eps=1e-3 in float64, compared against the tape's
analytic gradients with the relative metric
``max |analytic - numeric| / max(1, |numeric|)``. A registry of standard
checks covers every differentiable op so the CLI and the test suite run the
same suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-3
TOL = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _scalarize(out: Tensor, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Contract a tensor output to a scalar with a fixed random projection."""
    proj = rng.standard_normal(out.shape)
    return (out * Tensor(proj, dtype=np.float64)).sum(), proj


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = EPS,
    tol: float = TOL,
    seed: int = 0,
    name: str = "",
) -> GradCheckResult:
    """Check d(fn)/d(inputs) against central differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are contracted with
    a fixed random projection so the whole Jacobian action is exercised.
    """
    rng = np.random.default_rng(seed)
    xs = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*xs)
    proj = None
    if out.size != 1:
        out, proj = _scalarize(out, rng)
    out.backward()
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    def eval_scalar(arrays: list[np.ndarray]) -> float:
        ts = [Tensor(a, dtype=np.float64) for a in arrays]
        with T.no_grad():
            o = fn(*ts)
            if proj is not None:
                o = (o * Tensor(proj, dtype=np.float64)).sum()
        return o.item()

    max_err = 0.0
    base = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    for i, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = eval_scalar(base)
            flat[j] = orig - eps
            down = eval_scalar(base)
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return GradCheckResult(name or getattr(fn, "__name__", "fn"), max_err, tol)


def standard_op_checks(seed: int = 0) -> list[GradCheckResult]:
    """Run the finite-difference check on every differentiable op."""
    rng = np.random.default_rng(seed)

    def r(*shape, low=-1.0, high=1.0):
        return rng.uniform(low, high, size=shape)

    # Inputs are kept away from kinks (relu at 0, clip bounds, ties in max).
    checks: list[tuple[str, Callable, list[np.ndarray]]] = [
        ("add", lambda a, b: a + b, [r(3, 4), r(3, 4)]),
        ("add_leading_broadcast", lambda a, b: a + b, [r(2, 3, 4), r(3, 4)]),
        ("sub", lambda a, b: a - b, [r(3, 4), r(3, 4)]),
        ("mul", lambda a, b: a * b, [r(3, 4), r(3, 4)]),
        ("div", lambda a, b: a / b, [r(3, 4), r(3, 4, low=0.5, high=2.0)]),
        ("scalar_ops", lambda a: 2.5 * a - (a / 3.0) + 0.7, [r(3, 4)]),
        ("neg", lambda a: -a, [r(3, 4)]),
        ("pow", lambda a: a**2.0, [r(3, 4)]),
        ("pow_noninteger", lambda a: a**1.5, [r(3, 4, low=0.2, high=2.0)]),
        ("exp", lambda a: T.exp(a), [r(3, 4)]),
        ("log", lambda a: T.log(a), [r(3, 4, low=0.2, high=3.0)]),
        ("relu", lambda a: T.relu(a), [(lambda x: x + np.sign(x) * 0.2)(r(3, 4))]),
        ("sigmoid", lambda a: T.sigmoid(a), [r(3, 4, low=-4, high=4)]),
        ("clip", lambda a: T.clip(a, -0.5, 0.5), [r(3, 4, low=-2, high=2)]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [r(2, 5)]),
        ("softmax_axis0", lambda a: T.softmax(a, axis=0), [r(4, 3)]),
        ("matmul", lambda a, b: a @ b, [r(3, 4), r(4, 2)]),
        ("matmul_batched", lambda a, b: a @ b, [r(2, 3, 4), r(2, 4, 2)]),
        ("matmul_bcast", lambda a, b: a @ b, [r(2, 2, 3, 4), r(4, 2)]),
        ("sum_all", lambda a: a.sum(), [r(3, 4)]),
        ("sum_axis", lambda a: a.sum(axis=1), [r(3, 4)]),
        ("mean_keepdims", lambda a: a.mean(axis=-1, keepdims=True), [r(3, 4)]),
        ("reshape", lambda a: a.reshape(2, 6), [r(3, 4)]),
        ("transpose", lambda a: a.transpose(1, 0, 2), [r(2, 3, 4)]),
        ("expand", lambda a: a.reshape(3, 1).expand(3, 4), [r(3)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        ("conv2d_3x3", lambda x, w, b: T.conv2d(x, w, b, 1, 1),
         [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)]),
        ("conv2d_1x1", lambda x, w: T.conv2d(x, w), [r(2, 3, 4, 4), r(2, 3, 1, 1)]),
        ("conv2d_stride2_4x4", lambda x, w: T.conv2d(x, w, None, 2, 1),
         [r(1, 2, 6, 6), r(2, 2, 4, 4)]),
        ("conv2d_stride2_2x2", lambda x, w: T.conv2d(x, w, None, 2, 0),
         [r(1, 2, 6, 6), r(2, 2, 2, 2)]),
        ("maxpool2d", lambda x: T.maxpool2d(x), [r(1, 2, 4, 4)]),
        ("nearest_upsample", lambda x: T.nearest_upsample(x, 2), [r(1, 2, 3, 3)]),
        ("dropout_fixed_mask",
         lambda x: T.dropout(x, 0.3, np.random.default_rng(7)), [r(4, 5)]),
    ]

    results = []
    for i, (name, fn, inputs) in enumerate(checks):
        results.append(gradcheck(fn, inputs, seed=seed + i, name=name))
    return results

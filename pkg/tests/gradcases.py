"""Finite-difference case registry covering every registered op kind.

Each case builds a small, well-conditioned instance: inputs stay away from
relu/max kinks, and losses are projections with entries bounded away from
zero so every coordinate's true gradient is O(1) rather than sitting at the
float32 noise floor. Ops whose output is linear or quadratic in each
perturbed coordinate are exact under central differences and get the tight
tolerance; smooth nonlinear ops get the 1e-2 budget.
"""

from typing import Callable, Dict, List, Tuple

import numpy as np

from sdrl import nn_ops as ops
from sdrl import tensor as tz
from sdrl.tensor import Tensor

EXACT_EPS, EXACT_TOL = 3e-2, 1e-4
SMOOTH_EPS, SMOOTH_TOL = 1e-2, 1e-2

Case = Tuple[Callable[[], Tensor], List[Tensor]]
CASES: Dict[str, dict] = {}


def case(kind: str, eps: float, tol: float):
    def deco(factory):
        CASES[kind] = {"eps": eps, "tol": tol, "factory": factory}
        return factory

    return deco


def away(rng, shape, lo=0.5, hi=1.5):
    """Values bounded away from zero on both sides."""
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return (sign * rng.uniform(lo, hi, shape)).astype(np.float32)


def proj(out: Tensor) -> Tensor:
    # positive entries: gather/scatter and interpolation ops sum several of
    # them per input coordinate, and signed entries could cancel to ~0 there
    v = np.random.default_rng(1).uniform(0.5, 1.5, max(out.data.size, 1))
    return tz.dot(tz.reshape(out, (out.data.size,)), Tensor(v))


@case("add", EXACT_EPS, EXACT_TOL)
def _add(rng) -> Case:
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return lambda: proj(tz.add(a, b)), [a, b]


@case("sub", EXACT_EPS, EXACT_TOL)
def _sub(rng) -> Case:
    a = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    return lambda: proj(tz.sub(a, b)), [a, b]


@case("mul", EXACT_EPS, EXACT_TOL)
def _mul(rng) -> Case:
    a = Tensor(away(rng, (3, 3)), requires_grad=True)
    b = Tensor(away(rng, (3, 3)), requires_grad=True)
    return lambda: proj(tz.mul(a, b)), [a, b]


@case("maximum", EXACT_EPS, EXACT_TOL)
def _maximum(rng) -> Case:
    a = rng.standard_normal((4, 4)).astype(np.float32)
    gap = np.where(rng.random((4, 4)) < 0.5, -1.0, 1.0) * rng.uniform(0.3, 1.0, (4, 4))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(a + gap, requires_grad=True)
    return lambda: proj(tz.maximum(ta, tb)), [ta, tb]


@case("scalar_mul", EXACT_EPS, EXACT_TOL)
def _scalar_mul(rng) -> Case:
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    c = float(away(rng, ()))
    return lambda: proj(tz.scalar_mul(x, c)), [x]


@case("add_scalar", EXACT_EPS, EXACT_TOL)
def _add_scalar(rng) -> Case:
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    c = float(rng.standard_normal())
    return lambda: proj(tz.add_scalar(x, c)), [x]


@case("abs", EXACT_EPS, EXACT_TOL)
def _abs(rng) -> Case:
    x = Tensor(away(rng, (3, 4), lo=0.3), requires_grad=True)
    return lambda: proj(tz.absolute(x)), [x]


@case("relu", EXACT_EPS, EXACT_TOL)
def _relu(rng) -> Case:
    x = Tensor(away(rng, (4, 4), lo=0.3), requires_grad=True)
    return lambda: proj(tz.relu(x)), [x]


@case("flip", EXACT_EPS, EXACT_TOL)
def _flip(rng) -> Case:
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    direction = "horizontal" if rng.random() < 0.5 else "vertical"
    return lambda: proj(tz.flip(x, direction)), [x]


@case("concat", EXACT_EPS, EXACT_TOL)
def _concat(rng) -> Case:
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    return lambda: proj(tz.concat([a, b], axis=0)), [a, b]


@case("stack", EXACT_EPS, EXACT_TOL)
def _stack(rng) -> Case:
    a = Tensor(rng.standard_normal(6), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    return lambda: proj(tz.stack([a, b])), [a, b]


@case("take_row", EXACT_EPS, EXACT_TOL)
def _take_row(rng) -> Case:
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    idx = int(rng.integers(4))
    return lambda: proj(tz.take_row(x, idx)), [x]


@case("reshape", EXACT_EPS, EXACT_TOL)
def _reshape(rng) -> Case:
    x = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    return lambda: proj(tz.reshape(x, (3, 4))), [x]


@case("matmul", EXACT_EPS, EXACT_TOL)
def _matmul(rng) -> Case:
    # positive factors keep every gradient entry a same-sign sum
    a = Tensor(rng.uniform(0.2, 1.2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.2, 1.2, (4, 2)), requires_grad=True)
    return lambda: proj(tz.matmul(a, b)), [a, b]


@case("sum", EXACT_EPS, EXACT_TOL)
def _sum(rng) -> Case:
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return lambda: tz.total_sum(x), [x]


@case("mean", EXACT_EPS, EXACT_TOL)
def _mean(rng) -> Case:
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return lambda: tz.mean(x), [x]


@case("dot", EXACT_EPS, EXACT_TOL)
def _dot(rng) -> Case:
    a = Tensor(away(rng, (6,)), requires_grad=True)
    b = Tensor(away(rng, (6,)), requires_grad=True)
    return lambda: tz.dot(a, b), [a, b]


@case("l2_norm", SMOOTH_EPS, SMOOTH_TOL)
def _l2_norm(rng) -> Case:
    x = Tensor(away(rng, (5,), lo=0.4), requires_grad=True)
    return lambda: tz.l2_norm(x), [x]


@case("cosine_similarity", SMOOTH_EPS, SMOOTH_TOL)
def _cosine(rng) -> Case:
    a = Tensor(away(rng, (6,), lo=0.4), requires_grad=True)
    b = Tensor(away(rng, (6,), lo=0.4), requires_grad=True)
    return lambda: tz.cosine_similarity(a, b), [a, b]


@case("stop_gradient", EXACT_EPS, EXACT_TOL)
def _stop_gradient(rng) -> Case:
    # gradient flows only through the non-wrapped operand
    a = Tensor(rng.standard_normal(5), requires_grad=True)
    b = Tensor(away(rng, (5,)))
    return lambda: tz.dot(a, tz.stop_gradient(tz.mul(b, b))), [a]


@case("conv2d", 2e-1, EXACT_TOL)
def _conv2d(rng) -> Case:
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = Tensor(rng.uniform(0.1, 1.0, (2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.uniform(0.1, 0.6, (3, 2, 3, 3)), requires_grad=True)
    return (lambda: proj(ops.conv2d(x, w, stride=stride, padding=padding)), [x, w])


@case("maxpool2d", EXACT_EPS, EXACT_TOL)
def _maxpool2d(rng) -> Case:
    # build from per-window values with a forced clear winner so eps stays
    # below the argmax margin
    wins = rng.uniform(-1.0, 1.0, (2, 2, 2, 2, 4)).astype(np.float32)
    top = wins.argmax(axis=-1)
    np.put_along_axis(wins, top[..., None], wins.max(axis=-1, keepdims=True) + 0.5, axis=-1)
    x = (wins.reshape(2, 2, 2, 2, 2, 2)        # N,C,Ho,Wo,kh,kw
             .transpose(0, 1, 2, 4, 3, 5)      # N,C,Ho,kh,Wo,kw
             .reshape(2, 2, 4, 4))
    t = Tensor(x, requires_grad=True)
    return lambda: proj(ops.maxpool2d(t, 2)), [t]


@case("batch_norm", SMOOTH_EPS, SMOOTH_TOL)
def _batch_norm(rng) -> Case:
    x = Tensor(rng.standard_normal((8, 3, 2, 2)), requires_grad=True)
    scale = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    shift = Tensor(rng.standard_normal(3) * 0.3, requires_grad=True)

    def fn():
        out = ops.batch_norm(x, scale, shift, np.zeros(3, np.float32),
                             np.ones(3, np.float32), training=True)
        return proj(out)

    return fn, [x, scale, shift]


@case("batch_norm_eval", 3e-2, EXACT_TOL)
def _batch_norm_eval(rng) -> Case:
    run_mean = rng.standard_normal(4).astype(np.float32) * 0.2
    run_var = rng.uniform(0.5, 2.0, 4).astype(np.float32)
    # keep x - running_mean positive so the scale gradient cannot cancel
    x = Tensor(run_mean + rng.uniform(0.3, 1.3, (3, 4)), requires_grad=True)
    scale = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
    shift = Tensor(rng.standard_normal(4) * 0.3, requires_grad=True)

    def fn():
        out = ops.batch_norm(x, scale, shift, run_mean.copy(), run_var.copy(),
                             training=False)
        return proj(out)

    return fn, [x, scale, shift]


@case("bilinear_upsample", EXACT_EPS, EXACT_TOL)
def _bilinear(rng) -> Case:
    factor = int(rng.integers(2, 5))
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    return lambda: proj(ops.bilinear_upsample(x, factor)), [x]


@case("nearest_resize", EXACT_EPS, EXACT_TOL)
def _nearest(rng) -> Case:
    size = (2, 2) if rng.random() < 0.5 else (8, 8)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    return lambda: proj(ops.nearest_resize(x, size)), [x]


@case("spatial_mean", EXACT_EPS, EXACT_TOL)
def _spatial_mean(rng) -> Case:
    if rng.random() < 0.5:
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    else:
        x = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
    return lambda: proj(ops.spatial_mean(x)), [x]


@case("masked_mean", EXACT_EPS, EXACT_TOL)
def _masked_mean(rng) -> Case:
    if rng.random() < 0.5:
        x = Tensor(rng.standard_normal((3, 6, 6)), requires_grad=True)
        mask = (rng.random((6, 6)) < 0.5).astype(np.float32)
    else:
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        mask = (rng.random((2, 6, 6)) < 0.5).astype(np.float32)
    return lambda: proj(ops.masked_mean(x, mask)), [x]


@case("cross_entropy", SMOOTH_EPS, SMOOTH_TOL)
def _cross_entropy(rng) -> Case:
    logits = Tensor(rng.standard_normal((2, 3, 4, 4)) * 0.5, requires_grad=True)
    labels = rng.integers(0, 3, (2, 4, 4))
    weights = rng.uniform(0.5, 2.0, 3) if rng.random() < 0.5 else None
    return lambda: ops.cross_entropy(logits, labels, class_weights=weights), [logits]

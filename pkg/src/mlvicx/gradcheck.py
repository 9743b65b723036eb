"""Finite-difference verification harness covering every differentiable
op and the end-to-end training loss on a micro-model.

Probe design matters in 32-bit: each op check contracts the *change* in
the op output against a fixed random weighting (the unperturbed output
is subtracted as a constant), which cancels the accumulation rounding
that would otherwise drown small-gradient coordinates. Shapes stay at or
under 64 elements and inputs are drawn away from relu kinks and pooling
ties.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .losses import VicWeights, mlvicx_loss
from .model import EncoderConfig, MLVICXModel
from .tensor import DTYPE, GradCheckResult, Tensor, grad_check_params

DEFAULT_TOL = 1e-3
MODEL_TOL = 5e-3
MODEL_STEP = 3e-3


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng((0xC0FFEE, tag))


def _signed(rng: np.random.Generator, shape, lo: float = 0.3, hi: float = 1.3) -> np.ndarray:
    """Magnitudes in [lo, hi] with random signs: away from zero kinks."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return (mag * sign).astype(DTYPE)


def _positive(rng: np.random.Generator, shape, lo: float = 0.3, hi: float = 1.3) -> np.ndarray:
    """Positive draws: for multilinear ops they bound every coordinate's
    gradient away from zero, so the relative metric stays informative."""
    return rng.uniform(lo, hi, size=shape).astype(DTYPE)


def _weighting(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(_signed(rng, shape, 0.5, 1.5))


def _pos_weighting(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(_positive(rng, shape, 0.5, 1.5))


def _probed(op_fn: Callable[[], Tensor], tag: int, positive: bool = False) -> Callable[[], Tensor]:
    """Wrap an op closure into a well-conditioned scalar probe: the
    unperturbed output is subtracted as a constant before contracting, so
    the accumulation rounding of the big baseline never enters the
    difference quotient."""
    out0 = op_fn()
    base = Tensor(out0.data.copy())
    make = _pos_weighting if positive else _weighting
    weighting = make(_rng(tag), out0.shape)
    return lambda: T.tsum((op_fn() - base) * weighting)


def _check(name: str, params: dict[str, Tensor], op_fn: Callable[[], Tensor],
           step: float, tol: float, tag: int, positive: bool = False) -> tuple[str, GradCheckResult]:
    return name, grad_check_params(_probed(op_fn, tag, positive), params, step=step, tol=tol)


def _conv2d_checks(step, tol):
    rng = _rng(1)
    x = Tensor(_positive(rng, (1, 2, 5, 5)), requires_grad=True)
    w = Tensor(_positive(rng, (2, 2, 3, 3), 0.5, 1.3), requires_grad=True)
    b = Tensor(_positive(rng, (2,)), requires_grad=True)
    out = [_check("conv2d", {"input": x, "weight": w, "bias": b},
                  lambda: T.conv2d(x, w, b, stride=2, padding=1), step, tol, 11, positive=True)]
    x2 = Tensor(_positive(rng, (1, 1, 6, 6)), requires_grad=True)
    w2 = Tensor(_positive(rng, (1, 1, 3, 3), 0.5, 1.3), requires_grad=True)
    b2 = Tensor(_positive(rng, (1,)), requires_grad=True)
    out.append(_check("conv2d_stride1", {"input": x2, "weight": w2, "bias": b2},
                      lambda: T.conv2d(x2, w2, b2, stride=1, padding=1), step, tol, 12,
                      positive=True))
    return out


def _dense_checks(step, tol):
    rng = _rng(2)
    x = Tensor(_signed(rng, (3, 5)), requires_grad=True)
    w = Tensor(_signed(rng, (4, 5)), requires_grad=True)
    b = Tensor(_signed(rng, (4,)), requires_grad=True)
    return [_check("dense", {"input": x, "weight": w, "bias": b},
                   lambda: T.dense(x, w, b), step, tol, 21)]


def _pool_checks(step, tol):
    rng = _rng(3)
    out = []
    x1 = Tensor(_signed(rng, (2, 3, 3, 3)), requires_grad=True)
    out.append(_check("global_avg_pool", {"input": x1},
                      lambda: T.global_avg_pool(x1), step, tol, 31))
    x2 = Tensor(_signed(rng, (2, 3, 3, 3)), requires_grad=True)
    out.append(_check("global_max_pool", {"input": x2},
                      lambda: T.global_max_pool(x2), step, tol, 32))
    x3 = Tensor(_signed(rng, (2, 4, 2, 3)), requires_grad=True)
    out.append(_check("channelwise_pool_avg", {"input": x3},
                      lambda: T.channelwise_pool(x3, "avg"), step, tol, 33))
    x4 = Tensor(_signed(rng, (2, 4, 2, 3)), requires_grad=True)
    out.append(_check("channelwise_pool_max", {"input": x4},
                      lambda: T.channelwise_pool(x4, "max"), step, tol, 34))
    x5 = Tensor(_positive(rng, (1, 2, 5, 6)), requires_grad=True)
    out.append(_check("adaptive_avg_pool", {"input": x5},
                      lambda: T.adaptive_avg_pool(x5, 2, 3), step, tol, 35, positive=True))
    return out


def _elementwise_checks(step, tol):
    rng = _rng(4)
    out = []
    a = Tensor(_signed(rng, (2, 3, 2, 2)), requires_grad=True)
    b = Tensor(_signed(rng, (2, 3, 1, 1)), requires_grad=True)
    out.append(_check("elementwise_add", {"a": a, "b": b}, lambda: a + b, step, tol, 41))
    c = Tensor(_signed(rng, (2, 3, 2, 2)), requires_grad=True)
    d = Tensor(_signed(rng, (2, 1, 2, 2)), requires_grad=True)
    out.append(_check("elementwise_mul", {"a": c, "b": d}, lambda: c * d, step, tol, 42))
    e = Tensor(_signed(rng, (2, 3, 2, 2)), requires_grad=True)
    g = Tensor(_signed(rng, (1, 3, 2, 2)), requires_grad=True)
    out.append(_check("elementwise_sub", {"a": e, "b": g}, lambda: e - g, step, tol, 43))
    return out


def _activation_checks(step, tol):
    rng = _rng(5)
    out = []
    x1 = Tensor(_signed(rng, (3, 4)), requires_grad=True)
    out.append(_check("relu", {"input": x1}, lambda: T.relu(x1), step, tol, 51))
    x2 = Tensor(_signed(rng, (3, 4)), requires_grad=True)
    out.append(_check("sigmoid", {"input": x2}, lambda: T.sigmoid(x2), step, tol, 52))
    x3 = Tensor(rng.uniform(0.5, 2.0, (3, 4)).astype(DTYPE), requires_grad=True)
    out.append(_check("sqrt", {"input": x3}, lambda: T.sqrt(x3), step, tol, 53))
    x4 = Tensor(_signed(rng, (3, 4)), requires_grad=True)
    out.append(_check("square", {"input": x4}, lambda: T.square(x4), step, tol, 54))
    return out


def _batch_norm_checks(step, tol):
    rng = _rng(6)
    x = Tensor(_signed(rng, (4, 3)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3).astype(DTYPE), requires_grad=True)
    beta = Tensor(_signed(rng, (3,)), requires_grad=True)

    def bn_train():
        rm = np.zeros(3, dtype=DTYPE)
        rv = np.ones(3, dtype=DTYPE)
        return T.batch_norm(x, gamma, beta, rm, rv, training=True)

    out = [_check("batch_norm_train", {"input": x, "gamma": gamma, "beta": beta},
                  bn_train, step, tol, 61)]

    x2 = Tensor(_signed(rng, (4, 3)), requires_grad=True)
    rm_eval = (rng.standard_normal(3) * 0.2).astype(DTYPE)
    rv_eval = rng.uniform(0.5, 1.5, 3).astype(DTYPE)
    out.append(_check("batch_norm_eval", {"input": x2, "gamma": gamma, "beta": beta},
                      lambda: T.batch_norm(x2, gamma, beta, rm_eval, rv_eval, training=False),
                      step, tol, 62))
    return out


def _structural_checks(step, tol):
    rng = _rng(7)
    out = []
    a = Tensor(_signed(rng, (1, 2, 2, 2)), requires_grad=True)
    b = Tensor(_signed(rng, (1, 3, 2, 2)), requires_grad=True)
    out.append(_check("concat", {"a": a, "b": b},
                      lambda: T.concat([a, b], axis=1), step, tol, 71))
    m1 = Tensor(_signed(rng, (3, 4)), requires_grad=True)
    m2 = Tensor(_signed(rng, (4, 2)), requires_grad=True)
    out.append(_check("matmul", {"a": m1, "b": m2},
                      lambda: T.matmul(m1, m2), step, tol, 72))
    m3 = Tensor(_signed(rng, (3, 4)), requires_grad=True)
    out.append(_check("transpose", {"input": m3}, lambda: T.transpose(m3), step, tol, 73))
    m4 = Tensor(_signed(rng, (2, 3, 2, 2)), requires_grad=True)
    out.append(_check("reshape", {"input": m4}, lambda: T.reshape(m4, (2, 12)), step, tol, 74))
    m5 = Tensor(_signed(rng, (3, 4)), requires_grad=True)
    out.append(_check("sum", {"input": m5}, lambda: T.tsum(m5, axis=0), step, tol, 75))
    m6 = Tensor(_signed(rng, (3, 4)), requires_grad=True)
    out.append(_check("mean", {"input": m6}, lambda: T.tmean(m6, axis=1), step, tol, 76))
    logits = Tensor(_signed(rng, (6,)), requires_grad=True)
    targets = (_rng(77).uniform(size=6) > 0.5).astype(DTYPE)
    out.append(("bce_with_logits",
                grad_check_params(lambda: T.bce_with_logits(logits, targets),
                                  {"logits": logits}, step=step, tol=tol)))
    return out


def micro_model() -> tuple[MLVICXModel, Tensor, Tensor, VicWeights]:
    """Tiny two-stage, two-sample setup for the end-to-end loss check.

    The instance is conditioned for a meaningful 32-bit comparison: the
    attention convolutions start larger and the output layer smaller so
    their gradient magnitudes sit above the difference-quotient
    resolution, and the variance stabilizer is widened so the hinge's
    square root is far from its cusp at two-sample variances.
    """
    cfg = EncoderConfig(channels=(2, 3), blocks=(1, 1), strides=(1, 2), tap_levels=(0, 1),
                        input_channels=1, image_size=8, head_width=4)
    model = MLVICXModel(cfg, seed=11)
    for name, p in model.params.items():
        if ".cb." in name and "weight" in name:
            p.data *= DTYPE(3.0)
        if "fc2.weight" in name:
            p.data *= DTYPE(0.4)
    rng = np.random.default_rng((0xAB, 99))
    v = Tensor(rng.uniform(0.1, 0.9, (2, 1, 8, 8)).astype(DTYPE))
    vp = Tensor(rng.uniform(0.1, 0.9, (2, 1, 8, 8)).astype(DTYPE))
    weights = VicWeights(alpha=1.0, beta=1.0, gamma=1.0, balance=1.0, epsilon=1e-2)
    return model, v, vp, weights


def _model_loss_check(step, tol):
    model, v, vp, weights = micro_model()

    def f():
        rec, rec_p = model.siamese_forward(v, vp, training=True)
        return mlvicx_loss(rec.z, rec_p.z, rec.m, rec_p.m, weights).total

    return [("mlvicx_loss_micro_model",
             grad_check_params(f, model.params, step=step, tol=tol))]


_GROUPS: dict[str, Callable] = {
    "conv2d": _conv2d_checks,
    "dense": _dense_checks,
    "pools": _pool_checks,
    "elementwise": _elementwise_checks,
    "activations": _activation_checks,
    "batch_norm": _batch_norm_checks,
    "structural": _structural_checks,
    "model_loss": _model_loss_check,
}


def run_gradcheck(scope: str = "full", step: float | None = None,
                  tol: float | None = None) -> list[tuple[str, GradCheckResult]]:
    """Run one scope (group name) or everything; returns (name, result)
    pairs. The micro-model check uses its own default step/tolerance."""
    if scope == "full":
        groups = list(_GROUPS)
    elif scope in _GROUPS:
        groups = [scope]
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from "
                         f"{['full', *list(_GROUPS)]}")
    results: list[tuple[str, GradCheckResult]] = []
    for group in groups:
        if group == "model_loss":
            group_step = step if step is not None else MODEL_STEP
            group_tol = tol if tol is not None else MODEL_TOL
        else:
            group_step = step if step is not None else 1e-3
            group_tol = tol if tol is not None else DEFAULT_TOL
        results.extend(_GROUPS[group](group_step, group_tol))
    return results

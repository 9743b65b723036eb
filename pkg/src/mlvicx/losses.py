"""Two-tier variance-invariance-covariance objective.

The same three regularizers are applied to the global embedding batches
(Z, Z') and to the multi-level embedding batches (M, M'); the two tiers
are blended by a balance factor to form the training loss. Every term is
differentiable through the tensor engine, including the batch-mean
centering inside the covariance penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, matmul, relu, sqrt, square, transpose, tsum


@dataclass(frozen=True)
class VicWeights:
    """Loss coefficients and the variance-hinge constants.

    ``alpha``/``beta``/``gamma`` weigh invariance/variance/covariance,
    ``balance`` scales the multi-level tier, ``var_target`` is the hinge
    target for per-dimension standard deviation, ``epsilon`` stabilizes
    the square root.

    The invariance term sums squared distances over embedding
    dimensions, so its gradient scale grows with the embedding width;
    the default ``alpha`` is therefore the referenced 25 divided by the
    default width 256 (~0.1). Keeping alpha at 25 against the summed
    distance makes the alignment force outweigh the bounded variance
    hinge by two orders of magnitude and reliably collapses training.
    """

    alpha: float = 0.1
    beta: float = 25.0
    gamma: float = 1.0
    balance: float = 1.0
    var_target: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "balance", "var_target", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"VicWeights.{name} must be non-negative")


@dataclass
class LossBreakdown:
    """Scalar view of one loss evaluation; ``total`` keeps the graph.

    Logged scalars are 64-bit compositions of the 32-bit tier values, so
    ``total_value == l_g + balance * l_l`` holds exactly; the graph tensor
    agrees within float32 rounding.
    """

    total: Tensor
    l_g: float
    l_l: float
    inv_g: float
    var_g: float
    cov_g: float
    inv_l: float
    var_l: float
    cov_l: float
    balance: float

    @property
    def total_value(self) -> float:
        return self.l_g + self.balance * self.l_l

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total_value,
            "l_g": self.l_g,
            "l_l": self.l_l,
            "inv_g": self.inv_g,
            "var_g": self.var_g,
            "cov_g": self.cov_g,
            "inv_l": self.inv_l,
            "var_l": self.var_l,
            "cov_l": self.cov_l,
        }


def _check_batch(z: Tensor, name: str) -> None:
    if z.ndim != 2:
        raise ShapeError(f"{name}: embedding batch must be rank 2 [b,r], got {z.shape}")


def inv_loss(z: Tensor, zp: Tensor) -> Tensor:
    """Mean squared euclidean distance between positionally paired rows."""
    _check_batch(z, "inv_loss")
    if z.shape != zp.shape:
        raise ShapeError(f"inv_loss: shapes differ, {z.shape} vs {zp.shape}")
    b = z.shape[0]
    diff = z - zp
    return tsum(square(diff)) * (1.0 / b)


def var_loss(z: Tensor, var_target: float = 1.0, epsilon: float = 1e-4) -> Tensor:
    """Hinge on per-dimension regularized std falling below the target.

    Uses the unbiased batch variance (divisor b-1); zero exactly when every
    dimension's sqrt(Var + eps) reaches the target.
    """
    _check_batch(z, "var_loss")
    b, r = z.shape
    if b < 2:
        raise ShapeError(f"var_loss: batch size must be >= 2, got {b}")
    mean = z.mean(axis=0, keepdims=True)
    centered = z - mean
    var = tsum(square(centered), axis=0) * (1.0 / (b - 1))
    reg_std = sqrt(var + Tensor(np.full(r, epsilon, dtype=DTYPE)))
    hinge = relu(Tensor(np.full(r, var_target, dtype=DTYPE)) - reg_std)
    return tsum(hinge) * (1.0 / r)


def cov_matrix(z: Tensor) -> Tensor:
    """Unbiased covariance matrix of the batch; centering is differentiable."""
    _check_batch(z, "cov_matrix")
    b, _ = z.shape
    if b < 2:
        raise ShapeError(f"cov_matrix: batch size must be >= 2, got {b}")
    centered = z - z.mean(axis=0, keepdims=True)
    return matmul(transpose(centered), centered) * (1.0 / (b - 1))


def cov_loss(z: Tensor) -> Tensor:
    """Mean squared off-diagonal covariance; zero iff dimensions decorrelate."""
    _check_batch(z, "cov_loss")
    r = z.shape[1]
    if r == 1:
        return tsum(z * Tensor(np.zeros_like(z.data)))  # no off-diagonal terms
    c = cov_matrix(z)
    off_mask = Tensor((1.0 - np.eye(r, dtype=DTYPE)))
    return tsum(square(c) * off_mask) * (1.0 / r)


def vic_term(z: Tensor, zp: Tensor, weights: VicWeights) -> tuple[Tensor, float, float, float]:
    """One tier of the objective; returns (term, inv, var, cov) with the
    last three as detached floats for logging."""
    inv = inv_loss(z, zp)
    var = var_loss(z, weights.var_target, weights.epsilon) + var_loss(
        zp, weights.var_target, weights.epsilon
    )
    cov = cov_loss(z) + cov_loss(zp)
    term = weights.alpha * inv + weights.beta * var + weights.gamma * cov
    return term, inv.item(), var.item(), cov.item()


def mlvicx_loss(z: Tensor, zp: Tensor, m: Tensor, mp: Tensor, weights: VicWeights,
                use_global: bool = True, use_local: bool = True) -> LossBreakdown:
    """Compose the two tiers into the training loss.

    ``use_global=False`` zeroes the global tier's coefficients and
    ``use_local=False`` zeroes the multi-level tier's, which is how the
    single-tier ablations are realized without touching the data flow.
    """
    gw = weights if use_global else VicWeights(0.0, 0.0, 0.0, weights.balance,
                                               weights.var_target, weights.epsilon)
    lw = weights if use_local else VicWeights(0.0, 0.0, 0.0, weights.balance,
                                              weights.var_target, weights.epsilon)
    l_g, inv_g, var_g, cov_g = vic_term(z, zp, gw)
    l_l, inv_l, var_l, cov_l = vic_term(m, mp, lw)
    total = l_g + weights.balance * l_l
    return LossBreakdown(
        total=total,
        l_g=l_g.item(),
        l_l=l_l.item(),
        inv_g=inv_g,
        var_g=var_g,
        cov_g=cov_g,
        inv_l=inv_l,
        var_l=var_l,
        cov_l=cov_l,
        balance=weights.balance,
    )

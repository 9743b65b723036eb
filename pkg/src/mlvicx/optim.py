"""Optimizers: layer-wise adaptive rate scaling for pretraining, plain
momentum SGD for probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, GradientError, Tensor


@dataclass
class LarsOptimizer:
    """Momentum SGD with per-tensor trust-ratio scaling.

    Rank-0/1 parameters (biases, norm scales) skip both weight decay and
    trust scaling when ``exclude_bias_and_norm`` is set, falling back to
    plain momentum SGD — the usual exclusion rule for this family.
    """

    lr: float = 3e-4
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coeff: float = 1.0
    exclude_bias_and_norm: bool = True
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise GradientError(f"parameter {name!r} has no gradient; run backward first")
            excluded = self.exclude_bias_and_norm and p.ndim <= 1
            if excluded:
                g = p.grad
                scale = DTYPE(self.lr)
            else:
                g = p.grad + DTYPE(self.weight_decay) * p.data
                w_norm = np.linalg.norm(p.data.astype(np.float32))
                g_norm = np.linalg.norm(g.astype(np.float32))
                if w_norm > 0 and g_norm > 0:
                    trust = DTYPE(self.trust_coeff) * DTYPE(w_norm) / (DTYPE(g_norm) + DTYPE(1e-8))
                else:
                    trust = DTYPE(1.0)
                scale = DTYPE(self.lr) * trust
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(p.data)
                self.buffers[name] = buf
            buf *= DTYPE(self.momentum)
            buf += scale * g
            p.data -= buf
        self.step_count += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.momentum.{name}": buf for name, buf in self.buffers.items()}
        out["opt.step"] = np.asarray([self.step_count], dtype=DTYPE)
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray], param_names: list[str]) -> None:
        self.buffers = {}
        for name in param_names:
            key = f"opt.momentum.{name}"
            if key in state:
                self.buffers[name] = state[key].astype(DTYPE).copy()
        if "opt.step" in state:
            self.step_count = int(state["opt.step"][0])


@dataclass
class SgdOptimizer:
    """Plain momentum SGD used by the linear probes."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise GradientError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            if self.weight_decay:
                g = g + DTYPE(self.weight_decay) * p.data
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(p.data)
                self.buffers[name] = buf
            buf *= DTYPE(self.momentum)
            buf += DTYPE(self.lr) * g
            p.data -= buf

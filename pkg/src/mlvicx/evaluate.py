"""Downstream evaluation: frozen/fine-tune linear probing with AUC,
plus the paired t-test and the loss-tier ablation harness."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, apply_overrides
from .data import Dataset, split, subset
from .optim import SgdOptimizer
from .tensor import DTYPE, Tensor, bce_with_logits, dense
from .train import load_model_from_checkpoint, pretrain


class EvalError(Exception):
    pass


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties half-counted."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise EvalError(f"auc: scores/labels must be equal-length 1-D, got {s.shape} vs {y.shape}")
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise EvalError("auc requires both classes present")
    greater = np.sum(pos[:, None] > neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's method)."""
    max_iter, eps, fpmin = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool = False
    sides: int = 2  # two-sided by construction


def paired_t_test(a, b) -> TTestResult:
    """Paired Student t on differences a-b; two-sided p via the
    regularized incomplete beta. Zero-variance differences are flagged
    (p=1 when the mean difference is also zero, else p=0)."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise EvalError(f"paired_t_test: need equal-length 1-D samples, got {av.shape} vs {bv.shape}")
    n = len(av)
    if n < 2:
        raise EvalError(f"paired_t_test requires n >= 2, got {n}")
    d = av - bv
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, dof=dof, degenerate=True)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, dof=dof, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))
    return TTestResult(t=t, p=p, dof=dof)


# ----------------------------------------------------------------------
# linear probes
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "frozen"  # frozen | finetune
    fraction: float = 0.1
    lr: float = 0.05
    epochs: int = 120
    patience: int = 10
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.mode not in ("frozen", "finetune"):
            raise EvalError(f"probe mode must be frozen|finetune, got {self.mode!r}")


@dataclass
class EvalReport:
    mode: str
    fraction: float
    auc_test: float
    val_auc_trace: list[float]
    best_epoch: int
    encoder_hash_before: str
    encoder_hash_after: str
    seed: int
    n_train: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _probe_scores(features: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    return features @ w + b


def linear_probe(ckpt: Checkpoint, dataset: Dataset, config: RunConfig,
                 probe: ProbeConfig) -> EvalReport:
    """Attach a single logit layer to the pooled encoder feature and train
    it with logistic loss; frozen mode never touches encoder parameters
    (verified by hashing), finetune backpropagates into the encoder."""
    if dataset.labels is None:
        raise EvalError("linear_probe requires a labeled dataset")
    model = load_model_from_checkpoint(ckpt, config)
    hash_before = model.encoder_hash()
    d = config.data
    train_ds, val_ds, test_ds = split(dataset, (d.split_train, d.split_val, d.split_test),
                                      d.split_seed)
    if probe.fraction < 1.0:
        train_ds = subset(train_ds, probe.fraction, probe.seed)
    y_train = np.asarray(train_ds.labels, dtype=DTYPE)
    y_val = np.asarray(val_ds.labels)
    y_test = np.asarray(test_ds.labels)
    if len(set(train_ds.labels)) < 2:
        raise EvalError("probe training split contains a single class")

    feat_dim = config.encoder_config().channels[-1]
    weight = Tensor(np.zeros((1, feat_dim), dtype=DTYPE), requires_grad=True)
    bias = Tensor(np.zeros(1, dtype=DTYPE), requires_grad=True)
    probe_params = {"probe.weight": weight, "probe.bias": bias}
    optimizer = SgdOptimizer(lr=probe.lr, momentum=0.9)

    frozen = probe.mode == "frozen"
    if frozen:
        f_train = model.features(train_ds.images)
        f_val = model.features(val_ds.images)
        f_test = model.features(test_ds.images)
    else:
        f_train = model.features(train_ds.images)  # standardization stats only
    mu = f_train.mean(axis=0).astype(DTYPE)
    sd = (f_train.std(axis=0) + 1e-6).astype(DTYPE)

    trainable = dict(probe_params)
    if not frozen:
        trainable.update({name: model.params[name] for name in model.encoder_param_names()})

    def batch_logits(indices: np.ndarray) -> Tensor:
        if frozen:
            feats = Tensor((f_train[indices] - mu) / sd)
        else:
            batch = Tensor(np.stack([train_ds.images[i].data for i in indices]))
            rec = model.encode(batch, training=False, with_heads=False)
            feats = (rec.global_feature - Tensor(mu)) * Tensor(1.0 / sd)
        return dense(feats, weight, bias).reshape(len(indices))

    def split_scores(images, feats_cache) -> np.ndarray:
        if frozen:
            feats = feats_cache
        else:
            feats = model.features(images)
        return _probe_scores((feats - mu) / sd, weight.data[0], float(bias.data[0]))

    n_train = len(train_ds)
    best_val = -1.0
    best_epoch = -1
    best_state: dict[str, np.ndarray] = {}
    val_trace: list[float] = []
    since_best = 0
    for epoch in range(probe.epochs):
        order = np.random.default_rng((probe.seed, epoch, 0xF0)).permutation(n_train)
        for start in range(0, n_train, probe.batch_size):
            idx = order[start:start + probe.batch_size]
            logits = batch_logits(idx)
            loss = bce_with_logits(logits, y_train[idx])
            for p in trainable.values():
                p.zero_grad()
            loss.backward()
            optimizer.step(trainable)
        val_auc = auc(split_scores(val_ds.images, f_val if frozen else None), y_val)
        val_trace.append(val_auc)
        if val_auc > best_val:  # ties keep the earliest epoch
            best_val = val_auc
            best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in trainable.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= probe.patience:
                break

    for name, arr in best_state.items():
        trainable[name].data[...] = arr
    test_auc = auc(split_scores(test_ds.images, f_test if frozen else None), y_test)

    hash_after = model.encoder_hash()
    if frozen and hash_after != hash_before:
        raise AssertionError("frozen probe modified encoder parameters")
    return EvalReport(
        mode=probe.mode, fraction=probe.fraction, auc_test=test_auc,
        val_auc_trace=val_trace, best_epoch=best_epoch,
        encoder_hash_before=hash_before, encoder_hash_after=hash_after,
        seed=probe.seed, n_train=n_train,
    )


# ----------------------------------------------------------------------
# ablation harness
# ----------------------------------------------------------------------

ABLATION_VARIANTS = {
    "global_only": {"loss.use_global": "true", "loss.use_local": "false"},
    "local_only": {"loss.use_global": "false", "loss.use_local": "true"},
    "combined": {"loss.use_global": "true", "loss.use_local": "true"},
}


def ablation_suite(dataset: Dataset, base_config: RunConfig,
                   modes: tuple[str, ...] = ("frozen",),
                   seeds: tuple[int, ...] = (0, 1, 2)) -> dict:
    """Pretrain the three loss variants under shared seeds and probe each
    identically; returns a machine-readable table with per-seed AUCs and
    medians."""
    if len(dataset) == 0:
        raise EvalError("ablation_suite requires a non-empty dataset")
    table: dict = {
        "variants": list(ABLATION_VARIANTS),
        "modes": list(modes),
        "seeds": list(seeds),
        "shared_streams": True,  # same train.seed per seed across variants
        "cells": {},
    }
    for variant, mask in ABLATION_VARIANTS.items():
        for seed in seeds:
            cfg = apply_overrides(base_config, dict(mask, **{"train.seed": str(seed)}))
            result = pretrain(dataset, cfg)
            for mode in modes:
                probe = ProbeConfig(
                    mode=mode, fraction=cfg.eval.fraction, lr=cfg.eval.lr,
                    epochs=cfg.eval.epochs, patience=cfg.eval.patience, seed=cfg.eval.seed,
                )
                report = linear_probe(result.checkpoint, dataset, cfg, probe)
                table["cells"].setdefault(variant, {}).setdefault(mode, {})[str(seed)] = (
                    report.auc_test
                )
    table["median"] = {
        variant: {
            mode: float(np.median(list(cells[mode].values())))
            for mode in modes
        }
        for variant, cells in table["cells"].items()
    }
    return table

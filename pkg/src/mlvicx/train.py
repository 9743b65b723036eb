"""Pretraining loop, collapse diagnostics, and metrics emission.

Every source of randomness is counter-based (keyed on seed, epoch, and
sample index), so resuming from a checkpoint at epoch k replays exactly
the batches and views an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .augment import make_views
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig, config_hash
from .data import Dataset
from .losses import mlvicx_loss
from .model import MLVICXModel
from .optim import LarsOptimizer
from .tensor import NonFiniteError, Tensor


class TrainError(Exception):
    pass


@dataclass
class MetricsRecord:
    """One line of the metrics stream (per epoch or per step)."""

    epoch: int
    step: int
    total: float
    l_g: float
    l_l: float
    inv_g: float
    var_g: float
    cov_g: float
    inv_l: float
    var_l: float
    cov_l: float
    z_std_mean: float
    m_std_mean: float
    z_cov_offdiag_mean: float
    m_cov_offdiag_mean: float
    wall_time: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class CollapseReport:
    """Spread diagnostics for an embedding batch."""

    r: int
    per_dim_std: list[float]
    std_mean: float
    std_min: float
    cov_offdiag_mean: float
    collapsed: bool

    def as_dict(self) -> dict:
        return asdict(self)


def collapse_report(embeddings: np.ndarray, threshold: float = 0.1) -> CollapseReport:
    """Per-dimension std plus mean |off-diagonal| covariance; flags
    collapse when the mean std falls under the threshold."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise TrainError(f"collapse_report expects [b,r] embeddings, got shape {emb.shape}")
    b, r = emb.shape
    stds = emb.std(axis=0, ddof=1) if b > 1 else np.zeros(r)
    if r > 1 and b > 1:
        cov = np.cov(emb.T)
        off = cov[~np.eye(r, dtype=bool)]
        cov_offdiag = float(np.abs(off).mean())
    else:
        cov_offdiag = 0.0
    std_mean = float(stds.mean())
    return CollapseReport(
        r=r,
        per_dim_std=[float(s) for s in stds],
        std_mean=std_mean,
        std_min=float(stds.min()),
        cov_offdiag_mean=cov_offdiag,
        collapsed=std_mean < threshold,
    )


def _embedding_stats(values: np.ndarray) -> tuple[float, float]:
    emb = values.astype(np.float64)
    b, r = emb.shape
    std_mean = float(emb.std(axis=0, ddof=1).mean())
    if r > 1:
        cov = np.cov(emb.T)
        off = cov[~np.eye(r, dtype=bool)]
        cov_offdiag = float(np.abs(off).mean())
    else:
        cov_offdiag = 0.0
    return std_mean, cov_offdiag


def embed_dataset(model: MLVICXModel, dataset: Dataset, batch_size: int = 64,
                  limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode global and multi-level embeddings of clean images."""
    images = dataset.images[:limit] if limit else dataset.images
    z_rows, m_rows = [], []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        batch = Tensor(np.stack([img.data for img in chunk]))
        rec = model.encode(batch, training=False)
        z_rows.append(rec.z.data.copy())
        m_rows.append(rec.m.data.copy())
    return np.concatenate(z_rows), np.concatenate(m_rows)


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    metrics: list[MetricsRecord]
    aborted: bool = False
    last_good_path: str | None = None


def _make_checkpoint(model: MLVICXModel, optimizer: LarsOptimizer, epoch: int,
                     seed: int, cfg_hash: str) -> Checkpoint:
    return Checkpoint(
        params={name: arr.copy() for name, arr in model.state_arrays().items()},
        opt_state={name: arr.copy() for name, arr in optimizer.state_arrays().items()},
        epoch=epoch,
        seed=seed,
        config_hash=cfg_hash,
    )


def build_model(config: RunConfig) -> MLVICXModel:
    return MLVICXModel(config.encoder_config(), seed=config.train.seed)


def pretrain(dataset: Dataset, config: RunConfig, run_dir: Path | str | None = None,
             resume: Checkpoint | None = None) -> PretrainResult:
    """Run the self-supervised loop; returns the final checkpoint and the
    metrics stream (also written to ``run_dir/metrics.jsonl`` when given).
    """
    tcfg = config.train
    if len(dataset) == 0:
        raise TrainError("pretrain requires a non-empty dataset")
    if tcfg.batch_size < 2:
        raise TrainError("batch size must be >= 2 (batch statistics need pairs)")

    model = build_model(config)
    optimizer = LarsOptimizer(
        lr=config.optim.lr, weight_decay=config.optim.weight_decay,
        momentum=config.optim.momentum, trust_coeff=config.optim.trust_coeff,
        exclude_bias_and_norm=config.optim.exclude_bias_and_norm,
    )
    cfg_hash = config_hash(config)
    start_epoch = 0
    if resume is not None:
        if resume.config_hash and resume.config_hash != cfg_hash:
            raise TrainError("checkpoint config hash does not match this run's config "
                             "(pass --force to override)")
        model.load_state_arrays(resume.params)
        optimizer.load_state_arrays(resume.opt_state, list(model.params))
        start_epoch = resume.epoch

    run_path = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(exist_ok=True)
        mode = "a" if resume is not None else "w"
        metrics_fh = open(run_path / "metrics.jsonl", mode)

    policy = config.augment_policy()
    weights = config.vic_weights()
    seed = tcfg.seed
    n = len(dataset)
    records: list[MetricsRecord] = []
    last_good_path: str | None = None
    steps_per_epoch = sum(1 for s in range(0, n, tcfg.batch_size)
                          if min(tcfg.batch_size, n - s) >= 2)
    global_step = start_epoch * steps_per_epoch

    def emit(record: MetricsRecord) -> None:
        records.append(record)
        if metrics_fh is not None:
            metrics_fh.write(record.to_json() + "\n")
            metrics_fh.flush()

    def save_epoch_ckpt(tag: str, epoch_done: int) -> str | None:
        if run_path is None:
            return None
        path = run_path / "checkpoints" / f"{tag}.mlvx"
        save_checkpoint(_make_checkpoint(model, optimizer, epoch_done, seed, cfg_hash), path)
        return str(path)

    aborted = False
    hit_step_budget = False
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            if hit_step_budget:
                break
            epoch_start = time.monotonic()
            order = np.random.default_rng((seed, epoch, 0x0A0E)).permutation(n)
            sums: dict[str, float] = {}
            steps_in_epoch = 0
            for batch_start in range(0, n, tcfg.batch_size):
                if tcfg.max_steps and global_step >= tcfg.max_steps:
                    hit_step_budget = True
                    break
                batch_idx = order[batch_start:batch_start + tcfg.batch_size]
                if len(batch_idx) < 2:
                    break
                v_stack, vp_stack = [], []
                for di in batch_idx:
                    pair = make_views(dataset.images[di], policy, seed,
                                      epoch=epoch, sample_index=int(di))
                    v_stack.append(pair.v.data)
                    vp_stack.append(pair.v_prime.data)
                v = Tensor(np.stack(v_stack))
                vp = Tensor(np.stack(vp_stack))

                rec, rec_p = model.siamese_forward(v, vp, training=True)
                breakdown = mlvicx_loss(rec.z, rec_p.z, rec.m, rec_p.m, weights,
                                        use_global=config.loss.use_global,
                                        use_local=config.loss.use_local)
                if not np.isfinite(breakdown.total_value):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch} step {global_step}")
                model.zero_grad()
                breakdown.total.backward()
                optimizer.step(model.params)
                global_step += 1
                steps_in_epoch += 1
                last_embeddings = (rec.z.data, rec.m.data)

                if tcfg.log_cadence == "step":
                    z_std, z_cov = _embedding_stats(rec.z.data)
                    m_std, m_cov = _embedding_stats(rec.m.data)
                    emit(MetricsRecord(epoch=epoch, step=global_step, wall_time=0.0,
                                       seed=seed, z_std_mean=z_std, m_std_mean=m_std,
                                       z_cov_offdiag_mean=z_cov, m_cov_offdiag_mean=m_cov,
                                       **breakdown.as_dict()))
                else:
                    for key, value in breakdown.as_dict().items():
                        sums[key] = sums.get(key, 0.0) + value

            if tcfg.log_cadence == "epoch" and steps_in_epoch > 0:
                # loss fields are epoch means; embedding diagnostics come
                # from the epoch's final batch
                means = {key: value / steps_in_epoch for key, value in sums.items()}
                z_std, z_cov = _embedding_stats(last_embeddings[0])
                m_std, m_cov = _embedding_stats(last_embeddings[1])
                wall = 0.0 if tcfg.deterministic else time.monotonic() - epoch_start
                emit(MetricsRecord(epoch=epoch, step=global_step, wall_time=wall,
                                   seed=seed, z_std_mean=z_std, m_std_mean=m_std,
                                   z_cov_offdiag_mean=z_cov, m_cov_offdiag_mean=m_cov,
                                   **means))

            epoch_done = epoch + 1
            if tcfg.checkpoint_every and epoch_done % tcfg.checkpoint_every == 0:
                last_good_path = save_epoch_ckpt(f"epoch_{epoch_done:04d}", epoch_done)
    except (FloatingPointError, NonFiniteError) as err:
        aborted = True
        params_ok = all(np.isfinite(arr.sum(dtype=np.float64))
                        for arr in model.state_arrays().values())
        abort_path = None
        if params_ok:
            abort_path = save_epoch_ckpt("last_good",
                                         start_epoch if not records else records[-1].epoch)
        if metrics_fh is not None:
            metrics_fh.close()
            metrics_fh = None
        detail = f"last-good checkpoint: {abort_path}" if abort_path else \
            "parameters already non-finite; nothing safe to checkpoint"
        raise TrainError(f"{err}; {detail}") from err
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final = _make_checkpoint(model, optimizer, tcfg.epochs, seed, cfg_hash)
    if run_path is not None:
        final_path = run_path / "checkpoints" / "final.mlvx"
        save_checkpoint(final, final_path)
        last_good_path = str(final_path)
    return PretrainResult(checkpoint=final, metrics=records, aborted=aborted,
                          last_good_path=last_good_path)


def load_model_from_checkpoint(ckpt: Checkpoint, config: RunConfig) -> MLVICXModel:
    model = build_model(config)
    model.load_state_arrays(ckpt.params)
    return model

"""Staged siamese encoder with context-bottleneck refinement and
multi-level aggregation.

The desk-scale backbone is a plain staged CNN (two 3x3 convolutions per
stage, stride on the first). After each tapped stage the feature map is
refined by a context-bottleneck block: channel attention built from a
shared 1x1 convolution over the average- and max-pooled descriptors,
then spatial attention from a 7x7 convolution over the channel-pooled
pair. Refined maps both feed the next stage and are collected, resized
to the deepest tap's spatial size, and channel-concatenated into the
compound representation. Two three-layer expander heads map the pooled
final feature and the pooled compound into the embedding spaces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DTYPE, ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs; defaults are the desk-scale configuration."""

    channels: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (2, 2, 2)
    strides: tuple[int, ...] = (1, 2, 2)
    tap_levels: tuple[int, ...] = (0, 1, 2)
    input_channels: int = 1
    image_size: int = 32
    head_width: int = 256
    channel_reduction: int = 1  # 1 = no bottleneck reduction in channel attention

    def __post_init__(self):
        n = len(self.channels)
        if len(self.blocks) != n or len(self.strides) != n:
            raise ValueError("channels/blocks/strides must have equal lengths")
        if not self.tap_levels:
            raise ValueError("at least one tap level is required")
        for p in self.tap_levels:
            if not 0 <= p < n:
                raise ValueError(f"tap level {p} outside stages 0..{n - 1}")
        if self.channel_reduction < 1:
            raise ValueError("channel_reduction must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def stage_spatial(self, level: int) -> int:
        size = self.image_size
        for s in self.strides[: level + 1]:
            size = (size + 2 - 3) // s + 1  # 3x3 conv, padding 1
        return size

    @property
    def compound_channels(self) -> int:
        return sum(self.channels[p] for p in sorted(self.tap_levels))


@dataclass
class FeatureTap:
    """One refined intermediate map, kept with its level index."""

    level: int
    values: Tensor  # [b, c_p, h_p, w_p]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class ForwardRecord:
    """Everything one branch produces for a batch of views."""

    taps: list[FeatureTap]
    global_feature: Tensor  # [b, c_n]
    compound: Tensor        # [b, sum c_p, h*, w*]
    z: Tensor               # [b, r] global embedding batch
    m: Tensor               # [b, r] multi-level embedding batch


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(DTYPE)


def _he_dense(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    std = np.sqrt(2.0 / n)
    return (rng.standard_normal((m, n)) * std).astype(DTYPE)


class MLVICXModel:
    """Parameter container plus the forward computations.

    Parameters live in ``self.params`` (name -> Tensor, requires_grad on
    trainable entries); batch-norm running statistics live in
    ``self.buffers`` as plain arrays. Both branches of the siamese
    forward share this single parameter set.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------
    def _add_param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        c_prev = cfg.input_channels
        for i, (c_out, blocks, _) in enumerate(zip(cfg.channels, cfg.blocks, cfg.strides)):
            c_in = c_prev
            for j in range(blocks):
                self._add_param(f"stage{i}.conv{j}.weight", _he_conv(rng, c_out, c_in, 3))
                self._add_param(f"stage{i}.conv{j}.bias", np.zeros(c_out, dtype=DTYPE))
                c_in = c_out
            if i in cfg.tap_levels:
                c_mid = max(1, c_out // cfg.channel_reduction)
                self._add_param(f"stage{i}.cb.conv1.weight", _he_conv(rng, c_mid, c_out, 1))
                self._add_param(f"stage{i}.cb.conv1.bias", np.zeros(c_mid, dtype=DTYPE))
                if cfg.channel_reduction > 1:
                    self._add_param(f"stage{i}.cb.conv1b.weight", _he_conv(rng, c_out, c_mid, 1))
                    self._add_param(f"stage{i}.cb.conv1b.bias", np.zeros(c_out, dtype=DTYPE))
                self._add_param(f"stage{i}.cb.conv7.weight", _he_conv(rng, 1, 2, 7))
                self._add_param(f"stage{i}.cb.conv7.bias", np.zeros(1, dtype=DTYPE))
            c_prev = c_out
        self._init_head(rng, "head_g", cfg.channels[-1])
        self._init_head(rng, "head_m", cfg.compound_channels)

    def _init_head(self, rng: np.random.Generator, name: str, in_dim: int) -> None:
        # Linears are bias-free: the batch-norm shifts make pre-BN biases
        # redundant, and a final bias is invisible to the shift-invariant
        # objective (the usual expander arrangement).
        width = self.config.head_width
        dims = [in_dim, width, width, width]
        for j in range(3):
            self._add_param(f"{name}.fc{j}.weight", _he_dense(rng, dims[j + 1], dims[j]))
            if j < 2:
                self._add_param(f"{name}.bn{j}.gamma", np.ones(width, dtype=DTYPE))
                self._add_param(f"{name}.bn{j}.beta", np.zeros(width, dtype=DTYPE))
                self.buffers[f"{name}.bn{j}.running_mean"] = np.zeros(width, dtype=DTYPE)
                self.buffers[f"{name}.bn{j}.running_var"] = np.ones(width, dtype=DTYPE)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("stage")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (trainable params + buffers) by name."""
        out = {name: p.data for name, p in self.params.items()}
        out.update({name: buf for name, buf in self.buffers.items()})
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            if state[name].shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {state[name].shape} != {p.data.shape}")
            self.params[name] = Tensor(state[name].astype(DTYPE), requires_grad=True)
        for name in self.buffers:
            if name not in state:
                raise KeyError(f"missing buffer {name!r} in state")
            self.buffers[name] = state[name].astype(DTYPE).copy()

    def encoder_hash(self) -> str:
        """SHA-256 over the encoder parameter bytes, in name order."""
        digest = hashlib.sha256()
        for name in sorted(self.encoder_param_names()):
            digest.update(name.encode())
            digest.update(self.params[name].data.tobytes())
        return digest.hexdigest()

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------
    def context_bottleneck(self, y: Tensor, level: int) -> Tensor:
        """Channel attention then spatial attention, both multiplicative.

        The 1x1 convolution is shared between the average- and
        max-pooled descriptors; the 7x7 convolution sees exactly the
        2-channel [avg;max] channel-pooled stack and keeps h,w via
        padding 3. Attention values are sigmoid outputs, so the block is
        contractive, and with zero parameters it scales the input by
        exactly 0.25.
        """
        p = self.params
        w1 = p[f"stage{level}.cb.conv1.weight"]
        b1 = p[f"stage{level}.cb.conv1.bias"]
        if y.shape[1] != w1.shape[1]:
            raise ShapeError(
                f"context_bottleneck level {level}: input channels {y.shape[1]} != params {w1.shape[1]}"
            )
        avg_desc = T.conv2d(T.global_avg_pool(y), w1, b1)
        max_desc = T.conv2d(T.global_max_pool(y), w1, b1)
        if self.config.channel_reduction > 1:
            w1b = p[f"stage{level}.cb.conv1b.weight"]
            b1b = p[f"stage{level}.cb.conv1b.bias"]
            avg_desc = T.conv2d(T.relu(avg_desc), w1b, b1b)
            max_desc = T.conv2d(T.relu(max_desc), w1b, b1b)
        a_ch = T.sigmoid(avg_desc + max_desc)          # [b,c,1,1]
        k = a_ch * y
        stacked = T.channelwise_pool_pair(k)           # [avg;max] over channels
        a_sp = T.sigmoid(T.conv2d(stacked, p[f"stage{level}.cb.conv7.weight"],
                                  p[f"stage{level}.cb.conv7.bias"], stride=1, padding=3))
        if T.debug_enabled():
            for name, amap in (("channel", a_ch), ("spatial", a_sp)):
                if not (np.all(amap.data > 0) and np.all(amap.data < 1)):
                    raise AssertionError(f"{name} attention left (0,1) at level {level}")
        return a_sp * k

    def _run_stage(self, x: Tensor, level: int) -> Tensor:
        stride = self.config.strides[level]
        for j in range(self.config.blocks[level]):
            w = self.params[f"stage{level}.conv{j}.weight"]
            b = self.params[f"stage{level}.conv{j}.bias"]
            x = T.conv2d(x, w, b, stride=stride if j == 0 else 1, padding=1,
                         fused_relu=True)
        return x

    def _run_head(self, x: Tensor, name: str, training: bool) -> Tensor:
        for j in range(3):
            w = self.params[f"{name}.fc{j}.weight"]
            x = T.dense(x, w, Tensor(np.zeros(w.shape[0], dtype=DTYPE)))
            if j < 2:
                x = T.batch_norm(
                    x,
                    self.params[f"{name}.bn{j}.gamma"],
                    self.params[f"{name}.bn{j}.beta"],
                    self.buffers[f"{name}.bn{j}.running_mean"],
                    self.buffers[f"{name}.bn{j}.running_var"],
                    training=training,
                )
                x = T.relu(x)
        return x

    def project_global(self, global_feature: Tensor, training: bool = True) -> Tensor:
        return self._run_head(global_feature, "head_g", training)

    def project_multilevel(self, compound: Tensor, training: bool = True) -> Tensor:
        pooled = T.global_avg_pool(compound)
        flat = pooled.reshape(pooled.shape[0], pooled.shape[1])
        return self._run_head(flat, "head_m", training)

    def encode(self, view: Tensor, training: bool = True, with_heads: bool = True) -> ForwardRecord:
        """Run one branch: stages with tap refinement, aggregation, heads."""
        cfg = self.config
        if view.ndim != 4 or view.shape[1] != cfg.input_channels:
            raise ShapeError(f"encoder input must be [b,{cfg.input_channels},H,W], got {view.shape}")
        if view.shape[2] != cfg.image_size or view.shape[3] != cfg.image_size:
            raise ShapeError(
                f"encoder input spatial dims {view.shape[2]}x{view.shape[3]} != configured {cfg.image_size}"
            )
        x = view
        taps: list[FeatureTap] = []
        for level in range(cfg.num_stages):
            x = self._run_stage(x, level)
            # a single reduction: any NaN/Inf poisons the sum
            if not np.isfinite(x.data.sum(dtype=np.float64)):
                raise T.NonFiniteError(f"non-finite activations after stage {level}")
            if level in cfg.tap_levels:
                x = self.context_bottleneck(x, level)
                taps.append(FeatureTap(level=level, values=x))

        pooled = T.global_avg_pool(x)
        global_feature = pooled.reshape(pooled.shape[0], pooled.shape[1])

        target_h, target_w = taps[-1].values.shape[2], taps[-1].values.shape[3]
        aligned = [
            tap.values if tap.values.shape[2:] == (target_h, target_w)
            else T.adaptive_avg_pool(tap.values, target_h, target_w)
            for tap in taps
        ]
        compound = aligned[0] if len(aligned) == 1 else T.concat(aligned, axis=1)

        if with_heads:
            z = self.project_global(global_feature, training)
            m = self.project_multilevel(compound, training)
        else:
            z = global_feature
            m = global_feature
        return ForwardRecord(taps=taps, global_feature=global_feature, compound=compound, z=z, m=m)

    def siamese_forward(self, v: Tensor, v_prime: Tensor, training: bool = True,
                        chunk_size: int = 0) -> tuple[ForwardRecord, ForwardRecord]:
        """Two independent forward passes through the shared parameters.

        The batch-norm-free encoder treats batch rows independently, so
        both view batches ride through it as one concatenated batch
        (identical results, fewer op dispatches); the heads then run per
        branch because their batch statistics must not couple the
        branches. ``chunk_size`` > 0 splits the encoder batch, which
        trades op-dispatch overhead for a smaller working set.
        """
        if v.shape != v_prime.shape:
            raise ShapeError(f"siamese views differ in shape: {v.shape} vs {v_prime.shape}")
        b = v.shape[0]
        joint = np.concatenate([v.data, v_prime.data], axis=0)
        step = chunk_size if chunk_size > 0 else 2 * b
        records = [self.encode(Tensor(joint[s:s + step]), training, with_heads=False)
                   for s in range(0, 2 * b, step)]
        if len(records) == 1:
            gf, cp = records[0].global_feature, records[0].compound
            tap_values = [tap.values for tap in records[0].taps]
        else:
            gf = T.concat([r.global_feature for r in records], axis=0)
            cp = T.concat([r.compound for r in records], axis=0)
            tap_values = [T.concat([r.taps[i].values for r in records], axis=0)
                          for i in range(len(records[0].taps))]
        levels = [tap.level for tap in records[0].taps]
        gf_a, gf_b = T.split_rows(gf, (b, b))
        cp_a, cp_b = T.split_rows(cp, (b, b))
        taps_a, taps_b = [], []
        for level, values in zip(levels, tap_values):
            ta, tb = T.split_rows(values, (b, b))
            taps_a.append(FeatureTap(level, ta))
            taps_b.append(FeatureTap(level, tb))
        rec_a = ForwardRecord(taps=taps_a, global_feature=gf_a, compound=cp_a,
                              z=self.project_global(gf_a, training),
                              m=self.project_multilevel(cp_a, training))
        rec_b = ForwardRecord(taps=taps_b, global_feature=gf_b, compound=cp_b,
                              z=self.project_global(gf_b, training),
                              m=self.project_multilevel(cp_b, training))
        return rec_a, rec_b

    def features(self, images: list[Tensor], batch_size: int = 64) -> np.ndarray:
        """Pooled encoder features for a list of [1,H,W] images, eval mode,
        no graph recording."""
        rows = []
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            batch = Tensor(np.stack([img.data for img in chunk]))
            rec = self.encode(batch, training=False, with_heads=False)
            rows.append(rec.global_feature.data.copy())
        return np.concatenate(rows, axis=0)

"""Adam with cosine annealing, k-fold ensemble training and checkpoint files.

Checkpoint byte layout (all integers little-endian)::

    0       4 bytes   magic b"PSEG"
    4       u32       format version (currently 1)
    8       u32       H, length of the JSON header
    12      H bytes   UTF-8 JSON: {"network": NetworkConfig fields,
                                   "manifest": [{"name", "shape", "offset"}, ...],
                                   "epoch", "val_loss", "history", ...}
    12+H    u64       B, length of the parameter blob in bytes
    20+H    B bytes   float32 parameters, little-endian, concatenated in
                      manifest order; "offset" is the byte offset in the blob
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network as net
from . import tensor as T
from .cases import Case
from .nifti_io import atomic_write_bytes
from .sampler import PatchBatch, PatchSpec, sample_patches

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PSEG"
CHECKPOINT_VERSION = 1
DESK_EPOCHS = 60


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    epochs: int = 300
    batch_size: int = 2
    folds: int = 5
    seed: int = 0
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.folds < 1 or self.batch_size < 1:
            raise ValueError("epochs, folds and batch_size must be >= 1")


def cosine_lr(epoch: int, total_epochs: int, lr0: float = 1e-3, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer state have different lengths")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_p.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, AdamState(t, new_m, new_v)


# -- checkpoints --------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    config: net.NetworkConfig
    params: dict[str, np.ndarray]
    epoch: int = -1
    val_loss: float = float("nan")
    history: list[float] = field(default_factory=list)
    train_history: list[float] = field(default_factory=list)

    def to_model(self) -> net.ResidualUNet:
        model = net.build(self.config, seed=0, dtype=np.float32)
        model.load_state_dict(self.params)
        return model

    def to_bytes(self) -> bytes:
        manifest = []
        chunks = []
        offset = 0
        for name, arr in self.params.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes())
            offset += a.nbytes
        header = {
            "network": self.config.to_dict(),
            "manifest": manifest,
            "epoch": int(self.epoch),
            "val_loss": float(self.val_loss),
            "history": [float(h) for h in self.history],
            "train_history": [float(h) for h in self.train_history],
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        blob = b"".join(chunks)
        return (
            CHECKPOINT_MAGIC
            + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes))
            + hbytes
            + struct.pack("<Q", len(blob))
            + blob
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        (blen,) = struct.unpack_from("<Q", raw, 12 + hlen)
        blob = raw[20 + hlen : 20 + hlen + blen]
        if len(blob) != blen:
            raise CheckpointError("checkpoint blob truncated")
        params = {}
        for entry in header["manifest"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
            params[entry["name"]] = arr.reshape(shape).astype(np.float32)
        config = net.NetworkConfig.from_dict(header["network"])
        expected = {name: shape for name, shape, _ in net.parameter_layout(config)}
        got = {k: v.shape for k, v in params.items()}
        if expected != got:
            raise CheckpointError("manifest does not match the network configuration")
        return cls(config, params, header["epoch"], header["val_loss"], header.get("history", []), header.get("train_history", []))

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# -- training -----------------------------------------------------------------


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def _gather_patches(cases: Sequence[Case], spec: PatchSpec, seed_parts) -> PatchBatch:
    batches = [sample_patches(c.ct, c.suv, c.label, spec, _seed(*seed_parts, i)) for i, c in enumerate(cases)]
    return PatchBatch(
        np.concatenate([b.inputs for b in batches]).astype(np.float32, copy=False),
        np.concatenate([b.labels for b in batches]).astype(np.float32, copy=False),
        np.concatenate([b.positive for b in batches]),
        np.concatenate([b.starts for b in batches]),
    )


def evaluate_loss(model: net.ResidualUNet, patches: PatchBatch, batch_size: int, weights=net.LossWeights()) -> float:
    """Mean composite loss over ``patches`` without building a graph."""
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(patches), batch_size):
            x = patches.inputs[s : s + batch_size]
            y = patches.labels[s : s + batch_size]
            main, ds = model(T.Tensor(x))
            total += net.loss(main, ds, y, weights).item() * len(x)
            count += len(x)
    return total / count


def select_best_epoch(history: Sequence[float]) -> int:
    """Index of the lowest validation loss (first one on ties)."""
    if not history:
        raise ValueError("empty validation history")
    return int(np.argmin(np.asarray(history)))


def train_fold(
    train_set: Sequence[Case],
    val_set: Sequence[Case],
    net_cfg: net.NetworkConfig,
    train_cfg: TrainConfig,
    patch_spec: PatchSpec = PatchSpec(),
    weights: net.LossWeights = net.LossWeights(),
    progress: Callable[[int, float, float], None] | None = None,
) -> ModelCheckpoint:
    """Train one model and return the parameters of its lowest-validation-loss epoch."""
    if not train_set:
        raise ValueError("empty training set")
    if not val_set:
        raise ValueError("empty validation set")
    overlap = {c.case_id for c in train_set} & {c.case_id for c in val_set}
    if overlap:
        raise ValueError(f"train and validation sets share cases: {sorted(overlap)}")
    net_cfg.check_patch(patch_spec.size)
    seed = train_cfg.seed
    model = net.build(net_cfg, seed=seed, dtype=np.float32)
    params = model.parameters()
    state = AdamState.zeros([p.data for p in params])
    val_patches = _gather_patches(val_set, patch_spec, (seed, 1))
    betas = (train_cfg.beta1, train_cfg.beta2)

    history: list[float] = []
    train_history: list[float] = []
    best_params, best_epoch, best_val = None, -1, math.inf
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr0, train_cfg.lr_min)
        patches = _gather_patches(train_set, patch_spec, (seed, 0, epoch))
        order = np.random.default_rng(_seed(seed, 2, epoch)).permutation(len(patches))
        running = 0.0
        for s in range(0, len(order), train_cfg.batch_size):
            idx = order[s : s + train_cfg.batch_size]
            model.zero_grad()
            main, ds = model(T.Tensor(patches.inputs[idx]))
            loss = net.loss(main, ds, patches.labels[idx], weights)
            T.backward(loss, params)
            new, state = adam_step([p.data for p in params], [p.grad for p in params], state, lr, betas, train_cfg.eps)
            for p, d in zip(params, new):
                p.data = d
            running += loss.item() * len(idx)
        train_history.append(running / len(order))
        val = evaluate_loss(model, val_patches, train_cfg.batch_size, weights)
        history.append(val)
        if val < best_val:
            best_params, best_epoch, best_val = model.state_dict(), epoch, val
        logger.info("seed %d epoch %d lr %.2e train %.4f val %.4f", seed, epoch, lr, train_history[-1], val)
        if progress is not None:
            progress(epoch, train_history[-1], val)
    return ModelCheckpoint(net_cfg, best_params, best_epoch, best_val, history, train_history)


def fold_partition(n_cases: int, folds: int) -> list[list[int]]:
    """Round-robin assignment of case indices to folds."""
    if folds < 1:
        raise ValueError("folds must be >= 1")
    if folds > n_cases:
        raise ValueError(f"cannot split {n_cases} cases into {folds} folds")
    return [list(range(i, n_cases, folds)) for i in range(folds)]


def train_ensemble(
    cases: Sequence[Case],
    net_cfg: net.NetworkConfig,
    train_cfg: TrainConfig,
    patch_spec: PatchSpec = PatchSpec(),
    weights: net.LossWeights = net.LossWeights(),
    progress=None,
) -> list[ModelCheckpoint]:
    """Model ``i`` validates on fold ``i`` and trains on the other folds."""
    folds = fold_partition(len(cases), train_cfg.folds)
    if train_cfg.folds == 1:
        raise ValueError("ensemble training needs at least 2 folds (one is held out per model)")
    out = []
    for i, val_idx in enumerate(folds):
        val = [cases[j] for j in val_idx]
        train = [cases[j] for j in range(len(cases)) if j not in set(val_idx)]
        cfg_i = TrainConfig(**{**asdict(train_cfg), "seed": train_cfg.seed + i})
        logger.info("fold %d: %d train / %d val cases", i, len(train), len(val))
        out.append(train_fold(train, val, net_cfg, cfg_i, patch_spec, weights, progress))
    return out

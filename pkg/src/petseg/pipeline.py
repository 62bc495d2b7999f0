"""End-to-end pipeline stages shared by the CLI and the experiment scripts."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import inference, metrics, synth
from .cases import Case, discover_cases, load_case, preprocess, save_case
from .inference import SlidingWindowSpec
from .network import LossWeights, NetworkConfig
from .nifti_io import atomic_write_bytes, write_volume
from .sampler import PatchSpec
from .trainer import DESK_EPOCHS, ModelCheckpoint, TrainConfig, train_ensemble

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("case", "dice", "fp_volume_ml", "fn_volume_ml")


@dataclass
class RunConfig:
    data_dir: str = "data"
    output_dir: str = "run"
    cases: list[str] | None = None
    n_synth_cases: int = 8
    patch: PatchSpec = field(default_factory=PatchSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=DESK_EPOCHS))
    loss: LossWeights = field(default_factory=LossWeights)
    sliding_window: SlidingWindowSpec = field(default_factory=SlidingWindowSpec)
    connectivity: int = 26
    threshold: float = 0.5
    seed: int = 0
    threads: int = 1

    _NESTED = {"patch": PatchSpec, "network": NetworkConfig, "train": TrainConfig, "loss": LossWeights, "sliding_window": SlidingWindowSpec}

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in cls._NESTED:
                kw[k] = cls._NESTED[k](**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
            else:
                kw[k] = v
        cfg = cls(**kw)
        if base_dir is not None:
            cfg.data_dir = str((Path(base_dir) / cfg.data_dir).resolve()) if not Path(cfg.data_dir).is_absolute() else cfg.data_dir
            cfg.output_dir = str((Path(base_dir) / cfg.output_dir).resolve()) if not Path(cfg.output_dir).is_absolute() else cfg.output_dir
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        with open(p) as fh:
            return cls.from_dict(json.load(fh), base_dir=p.parent)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = asdict(v) if f.name in self._NESTED else v
        return d

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def case_ids(self) -> list[str]:
        return list(self.cases) if self.cases else discover_cases(self.data_dir)


class CaseError(RuntimeError):
    """A module error annotated with the case that triggered it."""


def _with_case(case_id, fn, *args):
    try:
        return fn(*args)
    except (ValueError, OSError) as exc:
        raise CaseError(f"case {case_id}: {exc}") from exc


def run_synth(cfg: RunConfig) -> list[str]:
    return synth.write_cases(cfg.n_synth_cases, cfg.seed, cfg.data_dir)


def run_preprocess(cfg: RunConfig) -> list[str]:
    out = cfg.out / "preprocessed"
    ids = cfg.case_ids()
    for cid in ids:
        case = _with_case(cid, load_case, cfg.data_dir, cid)
        save_case(_with_case(cid, preprocess, case), out)
    return ids


def load_preprocessed(cfg: RunConfig) -> list[Case]:
    d = cfg.out / "preprocessed"
    cases = []
    for cid in cfg.case_ids():
        case = _with_case(cid, load_case, d, cid)
        if case.label is None:
            raise CaseError(f"case {cid}: no preprocessed label in {d}; run preprocess first")
        cases.append(case)
    return cases


def checkpoint_paths(cfg: RunConfig) -> list[Path]:
    return sorted((cfg.out / "checkpoints").glob("model_*.pseg"))


def run_train(cfg: RunConfig) -> list[Path]:
    cases = load_preprocessed(cfg)
    ckpts = train_ensemble(cases, cfg.network, cfg.train, cfg.patch, cfg.loss)
    d = cfg.out / "checkpoints"
    d.mkdir(parents=True, exist_ok=True)
    for stale in d.glob("model_*.pseg"):
        stale.unlink()
    paths = []
    for i, ck in enumerate(ckpts):
        p = d / f"model_{i}.pseg"
        ck.save(p)
        paths.append(p)
    return paths


def load_models(paths) -> list:
    return [ModelCheckpoint.load(p).to_model() for p in paths]


def run_predict(cfg: RunConfig) -> list[Path]:
    paths = checkpoint_paths(cfg)
    if not paths:
        raise CaseError(f"no checkpoints found in {cfg.out / 'checkpoints'}; run train first")
    models = load_models(paths)
    spec = SlidingWindowSpec(cfg.patch.size, cfg.sliding_window.overlap, cfg.sliding_window.batch_size)
    d = cfg.out / "predictions"
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for cid in cfg.case_ids():
        case = _with_case(cid, load_case, cfg.data_dir, cid, False)
        mask, _ = _with_case(cid, inference.predict_case, models, case, spec, cfg.threshold)
        p = d / f"{cid}_pred.nii.gz"
        write_volume(mask, p)
        written.append(p)
    return written


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.as_row())
    return buf.getvalue()


def run_evaluate(cfg: RunConfig, pred_dir=None) -> list[metrics.MetricsReport]:
    from .nifti_io import read_volume

    pred_dir = Path(pred_dir) if pred_dir is not None else cfg.out / "predictions"
    reports = []
    for cid in cfg.case_ids():
        gt = _with_case(cid, read_volume, Path(cfg.data_dir) / f"{cid}_seg.nii.gz")
        pred = _with_case(cid, read_volume, pred_dir / f"{cid}_pred.nii.gz")
        reports.append(_with_case(cid, metrics.evaluate_case, pred, gt, cid, cfg.connectivity))
    cfg.out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(cfg.out / "metrics.csv", metrics_csv(reports).encode())
    return reports


# -- desk-scale overfit experiment ------------------------------------------


@dataclass
class OverfitResult:
    train_dice: list[float]
    val_dice: list[float]
    checkpoints: list[ModelCheckpoint]
    seconds: float

    @property
    def mean_train_dice(self) -> float:
        return float(np.mean(self.train_dice))

    @property
    def mean_val_dice(self) -> float:
        return float(np.mean(self.val_dice))


def overfit_experiment(
    n_cases: int = 8,
    n_val: int = 2,
    folds: int = 2,
    epochs: int = DESK_EPOCHS,
    patch_size=(48, 48, 32),
    levels: int = 3,
    base_channels: int = 8,
    seed: int = 0,
    progress=None,
) -> OverfitResult:
    """Train a small ensemble on synthetic cases and score it on the native grids.

    The last ``n_val`` cases are held out. The remaining cases are split into
    ``folds`` folds for ensemble training (each member selects its best epoch
    on its own validation fold). Dice is computed after ensemble averaging.
    """
    import time

    t0 = time.perf_counter()
    raw = synth.generate_cases(n_cases, seed)
    work = [preprocess(c) for c in raw]
    train_idx = list(range(n_cases - n_val))
    net_cfg = NetworkConfig(levels=levels, base_channels=base_channels)
    train_cfg = TrainConfig(epochs=epochs, folds=folds, seed=seed)
    patch = PatchSpec(size=tuple(patch_size))
    ckpts = train_ensemble([work[i] for i in train_idx], net_cfg, train_cfg, patch, progress=progress)
    models = [c.to_model() for c in ckpts]
    spec = SlidingWindowSpec(patch.size, 0.5)
    dice = []
    for case in raw:
        mask, _ = inference.predict_case(models, case, spec)
        dice.append(metrics.dice_score(mask, case.label))
    return OverfitResult(
        [dice[i] for i in train_idx],
        dice[n_cases - n_val :],
        ckpts,
        time.perf_counter() - t0,
    )

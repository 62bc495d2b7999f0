"""Sliding-window prediction, ensemble averaging and mapping back to the native grid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cases import Case, preprocess
from .sampler import pad_to_patch
from .volume import Volume, resample_to_grid


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SlidingWindowSpec:
    patch_size: tuple[int, int, int] = (48, 48, 32)
    overlap: float = 0.5
    batch_size: int = 2

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")

    def strides(self) -> tuple[int, int, int]:
        return tuple(max(1, int(round(p * (1.0 - self.overlap)))) for p in self.patch_size)


def window_starts(dim: int, patch: int, stride: int) -> list[int]:
    """Window origins along one axis; the last window is pulled back to end at ``dim``."""
    if dim <= patch:
        return [0]
    starts = []
    s = 0
    while s + patch < dim:
        starts.append(s)
        s += stride
    starts.append(dim - patch)
    return sorted(set(starts))


def window_grid(dims, spec: SlidingWindowSpec) -> list[tuple[int, int, int]]:
    axes = [window_starts(d, p, s) for d, p, s in zip(dims, spec.patch_size, spec.strides())]
    return [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]


def _model_probabilities(model, batch: np.ndarray) -> np.ndarray:
    with T.no_grad():
        out = model(T.Tensor(batch))
    logits = out[0] if isinstance(out, tuple) else out
    return T._sigmoid(logits.data)[:, 0]


def predict_volume(model: Callable, ct: Volume, suv: Volume, spec: SlidingWindowSpec = SlidingWindowSpec()) -> Volume:
    """Average the sigmoid outputs of overlapping windows into a likelihood volume.

    ``model`` maps a ``[B, 2, X, Y, Z]`` Tensor to ``(main_logits, side_logits)``
    (or just the main logits). Volumes smaller than a patch are zero-padded
    for inference and cropped back.
    """
    if not ct.same_grid(suv):
        raise GridMismatchError(f"CT grid {ct.dims} and SUV grid {suv.dims} differ")
    size = spec.patch_size
    ct_a, lead = pad_to_patch(ct.data.astype(np.float32), size)
    suv_a, _ = pad_to_patch(suv.data.astype(np.float32), size)
    acc = np.zeros(ct_a.shape, dtype=np.float64)
    hits = np.zeros(ct_a.shape, dtype=np.int32)
    windows = window_grid(ct_a.shape, spec)
    for k in range(0, len(windows), spec.batch_size):
        chunk = windows[k : k + spec.batch_size]
        batch = np.stack(
            [
                np.stack([ct_a[x : x + size[0], y : y + size[1], z : z + size[2]], suv_a[x : x + size[0], y : y + size[1], z : z + size[2]]])
                for x, y, z in chunk
            ]
        )
        probs = _model_probabilities(model, batch)
        for (x, y, z), p in zip(chunk, probs):
            acc[x : x + size[0], y : y + size[1], z : z + size[2]] += p
            hits[x : x + size[0], y : y + size[1], z : z + size[2]] += 1
    lik = acc / hits
    nx, ny, nz = ct.dims
    lik = lik[lead[0] : lead[0] + nx, lead[1] : lead[1] + ny, lead[2] : lead[2] + nz]
    return ct.with_data(lik.astype(np.float32))


def ensemble_average(likelihoods: Sequence[Volume]) -> Volume:
    """Voxelwise arithmetic mean of likelihood volumes on one grid."""
    if not likelihoods:
        raise ValueError("ensemble_average needs at least one volume")
    ref = likelihoods[0]
    for v in likelihoods[1:]:
        if not ref.same_grid(v):
            raise GridMismatchError("ensemble members are on different grids")
    total = np.zeros(ref.dims, dtype=np.float64)
    for v in likelihoods:
        total += v.data
    return ref.with_data((total / len(likelihoods)).astype(ref.data.dtype))


def to_original_mask(likelihood: Volume, reference: Volume, threshold: float = 0.5) -> Volume:
    """Resample the likelihood onto ``reference``'s grid, then keep voxels strictly above ``threshold``."""
    lik = resample_to_grid(likelihood, reference.dims, reference.spacing, reference.origin, "trilinear")
    return lik.with_data((lik.data > threshold).astype(np.float32))


def predict_case(models: Sequence, case: Case, spec: SlidingWindowSpec = SlidingWindowSpec(), threshold: float = 0.5) -> tuple[Volume, Volume]:
    """Full pipeline for one raw case: ``(mask on the CT grid, working-grid likelihood)``."""
    work = preprocess(Case(case.case_id, case.ct, case.suv))
    liks = [predict_volume(m, work.ct, work.suv, spec) for m in models]
    lik = ensemble_average(liks)
    return to_original_mask(lik, case.ct, threshold), lik

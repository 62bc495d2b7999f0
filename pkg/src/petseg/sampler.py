"""Class-balanced extraction of 2-channel (CT, SUV) training patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume

NEGATIVE_RETRIES = 100


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int] = (48, 48, 32)
    patches_per_volume: int = 12
    pos_neg_ratio: tuple[int, int] = (3, 1)

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) < 1:
            raise ValueError(f"patch extents must be >= 1, got {self.size}")
        if self.patches_per_volume < 1:
            raise ValueError("patches_per_volume must be >= 1")
        pos, neg = self.pos_neg_ratio
        if pos < 0 or neg < 0 or pos + neg == 0:
            raise ValueError(f"invalid positive:negative ratio {self.pos_neg_ratio}")

    def split(self) -> tuple[int, int]:
        """Number of (positive, negative) patches for a lesion-bearing volume."""
        pos, neg = self.pos_neg_ratio
        n_pos = int(round(self.patches_per_volume * pos / (pos + neg)))
        return n_pos, self.patches_per_volume - n_pos


@dataclass
class PatchBatch:
    inputs: np.ndarray  # [B, 2, X, Y, Z]; channel 0 = CT, 1 = SUV
    labels: np.ndarray  # [B, 1, X, Y, Z], values in {0, 1}
    positive: np.ndarray  # [B] bool, True for lesion-centred patches
    starts: np.ndarray  # [B, 3] window corners in the padded volume

    def __len__(self) -> int:
        return self.inputs.shape[0]


def concat_channels(ct_patch: np.ndarray, suv_patch: np.ndarray) -> np.ndarray:
    """Stack CT and SUV patches into one ``[2, X, Y, Z]`` array."""
    ct_patch = np.asarray(ct_patch)
    suv_patch = np.asarray(suv_patch)
    if ct_patch.shape != suv_patch.shape:
        raise SamplerError(f"CT patch {ct_patch.shape} and SUV patch {suv_patch.shape} differ")
    return np.stack([ct_patch, suv_patch], axis=0)


def pad_to_patch(a: np.ndarray, size) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Zero-pad symmetrically so every axis is at least ``size``; returns the leading pad."""
    before = []
    widths = []
    for n, p in zip(a.shape, size):
        total = max(0, p - n)
        lo = total // 2
        before.append(lo)
        widths.append((lo, total - lo))
    if any(w != (0, 0) for w in widths):
        a = np.pad(a, widths)
    return a, tuple(before)


def _crop(a: np.ndarray, start, size) -> np.ndarray:
    x, y, z = start
    return a[x : x + size[0], y : y + size[1], z : z + size[2]]


def sample_patches(ct: Volume, suv: Volume, label: Volume, spec: PatchSpec = PatchSpec(), seed=0) -> PatchBatch:
    """Draw ``spec.patches_per_volume`` patches from one preprocessed case.

    Lesion-bearing volumes get an exact positive/negative split. Positive
    patches are centred on a uniformly drawn foreground voxel (window clamped
    to the volume), negatives are rejection-sampled to contain no foreground.
    Lesion-free volumes get uniformly placed patches.
    """
    if not (ct.dims == suv.dims == label.dims):
        raise SamplerError(f"dimension mismatch: ct {ct.dims}, suv {suv.dims}, label {label.dims}")
    rng = np.random.default_rng(seed)
    size = tuple(int(s) for s in spec.size)
    ct_a, _ = pad_to_patch(ct.data, size)
    suv_a, _ = pad_to_patch(suv.data, size)
    lab_a, _ = pad_to_patch(label.data, size)
    fg = lab_a > 0
    dims = np.array(fg.shape)
    hi = dims - np.array(size)  # inclusive upper bound for window starts

    fg_idx = np.flatnonzero(fg)
    starts: list[np.ndarray] = []
    positive: list[bool] = []
    if fg_idx.size:
        n_pos, n_neg = spec.split()
        half = np.array(size) // 2
        for _ in range(n_pos):
            centre = np.array(np.unravel_index(fg_idx[rng.integers(fg_idx.size)], fg.shape))
            starts.append(np.clip(centre - half, 0, hi))
            positive.append(True)
        for _ in range(n_neg):
            best, best_count = None, None
            for _ in range(NEGATIVE_RETRIES):
                cand = np.array([rng.integers(h + 1) for h in hi])
                count = int(np.count_nonzero(_crop(fg, cand, size)))
                if best_count is None or count < best_count:
                    best, best_count = cand, count
                if count == 0:
                    break
            starts.append(best)
            positive.append(False)
    else:
        for _ in range(spec.patches_per_volume):
            starts.append(np.array([rng.integers(h + 1) for h in hi]))
            positive.append(False)

    b = len(starts)
    dtype = np.result_type(ct_a.dtype, suv_a.dtype)
    inputs = np.empty((b, 2) + size, dtype=dtype)
    labels = np.empty((b, 1) + size, dtype=lab_a.dtype)
    for k, s in enumerate(starts):
        inputs[k] = concat_channels(_crop(ct_a, s, size), _crop(suv_a, s, size))
        labels[k, 0] = _crop(lab_a, s, size)
    return PatchBatch(inputs, labels, np.array(positive), np.array(starts, dtype=np.int64))

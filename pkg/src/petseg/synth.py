"""Synthetic PET/CT cases for desk-scale runs.

Each case covers a fixed physical field of view sampled at a random
anisotropic spacing. The SUV image has a soft-tissue background around 1,
one moderately active organ (a hard negative) and 1-3 ellipsoidal lesions
with uptake between 5 and 12. Every fifth case (index % 5 == 4) is
lesion-free.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .cases import Case, save_case
from .volume import Volume

FIELD_OF_VIEW_MM = (128.0, 128.0, 120.0)
SPACING_RANGE_MM = (1.5, 4.0)
LESION_SUV_RANGE = (5.0, 12.0)
LESION_SEMI_AXES_MM = (9.0, 16.0)


def is_lesion_free(index: int) -> bool:
    return index % 5 == 4


def _smooth_field(rng, coords, amplitude, n_terms=3):
    x, y, z = coords
    f = np.zeros(np.broadcast_shapes(x.shape, y.shape, z.shape))
    for _ in range(n_terms):
        k = rng.uniform(0.01, 0.05, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        f += np.sin(k[0] * x + phase[0]) * np.sin(k[1] * y + phase[1]) * np.sin(k[2] * z + phase[2])
    return amplitude * f / n_terms


def _ellipsoid(coords, centre, axes):
    x, y, z = coords
    return ((x - centre[0]) / axes[0]) ** 2 + ((y - centre[1]) / axes[1]) ** 2 + ((z - centre[2]) / axes[2]) ** 2 <= 1.0


def generate_case(index: int, seed: int = 0) -> Case:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    spacing = tuple(float(s) for s in rng.uniform(*SPACING_RANGE_MM, size=3).round(3))
    dims = tuple(max(1, int(round(f / s))) for f, s in zip(FIELD_OF_VIEW_MM, spacing))
    origin = tuple(float(o) for o in rng.uniform(-5.0, 5.0, size=3).round(2))
    axes = [origin[i] + np.arange(dims[i]) * spacing[i] for i in range(3)]
    coords = np.meshgrid(*axes, indexing="ij", sparse=True)
    fov_centre = [origin[i] + 0.5 * FIELD_OF_VIEW_MM[i] for i in range(3)]

    body = _ellipsoid(coords, fov_centre, (58.0, 48.0, 70.0))
    organ_centre = [fov_centre[0] + rng.uniform(-15, 15), fov_centre[1] + rng.uniform(-10, 10), fov_centre[2] + rng.uniform(-20, 20)]
    organ = _ellipsoid(coords, organ_centre, tuple(rng.uniform(14, 22, size=3)))

    ct = np.where(body, 40.0 + _smooth_field(rng, coords, 30.0), -100.0)
    ct = ct + rng.normal(0.0, 12.0, size=dims)
    ct = np.where(organ & body, ct + 25.0, ct)

    suv = np.where(body, 1.0 + _smooth_field(rng, coords, 0.2), 0.05)
    suv = suv * (1.0 + rng.normal(0.0, 0.08, size=dims))
    suv = np.where(organ & body, 2.5 + rng.normal(0.0, 0.15, size=dims), suv)

    mask = np.zeros(dims, dtype=bool)
    if not is_lesion_free(index):
        for _ in range(int(rng.integers(1, 4))):
            semi = rng.uniform(*LESION_SEMI_AXES_MM, size=3)
            centre = [fov_centre[i] + rng.uniform(-1, 1) * (0.5 * FIELD_OF_VIEW_MM[i] - semi[i] - 12.0) for i in range(3)]
            lesion = _ellipsoid(coords, centre, semi)
            uptake = rng.uniform(*LESION_SUV_RANGE)
            texture = uptake * (1.0 + 0.05 * rng.standard_normal(size=dims))
            suv = np.where(lesion, np.maximum(texture, LESION_SUV_RANGE[0]), suv)
            ct = np.where(lesion, ct + 15.0, ct)
            mask |= lesion
    ct = np.clip(ct, -100.0, 250.0)
    suv = np.clip(suv, 0.0, None)
    cid = f"case_{index:03d}"
    return Case(
        cid,
        Volume(ct.astype(np.float32), spacing, origin),
        Volume(suv.astype(np.float32), spacing, origin),
        Volume(mask.astype(np.float32), spacing, origin),
    )


def generate_cases(n_cases: int, seed: int = 0) -> list[Case]:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    return [generate_case(i, seed) for i in range(n_cases)]


def write_cases(n_cases: int, seed: int, out_dir) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for case in generate_cases(n_cases, seed):
        save_case(case, out)
        ids.append(case.case_id)
    return ids

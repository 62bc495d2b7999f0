"""Case bookkeeping: on-disk layout and the resample + normalize preprocessing."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nifti_io import read_volume, write_volume
from .volume import CT_WINDOW, SUV_WINDOW, TARGET_SPACING, Volume, resample, resample_to_grid, window_normalize

SUFFIXES = {"ct": "_ct.nii.gz", "suv": "_suv.nii.gz", "seg": "_seg.nii.gz"}


@dataclass
class Case:
    case_id: str
    ct: Volume
    suv: Volume
    label: Volume | None = None


def case_paths(directory, case_id: str) -> dict[str, Path]:
    d = Path(directory)
    return {k: d / f"{case_id}{s}" for k, s in SUFFIXES.items()}


def discover_cases(directory) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"case directory {d} does not exist")
    ids = sorted(p.name[: -len(SUFFIXES["ct"])] for p in d.glob("*" + SUFFIXES["ct"]))
    return ids


def load_case(directory, case_id: str, with_label: bool = True) -> Case:
    paths = case_paths(directory, case_id)
    label = None
    if with_label and paths["seg"].exists():
        label = read_volume(paths["seg"])
    return Case(case_id, read_volume(paths["ct"]), read_volume(paths["suv"]), label)


def save_case(case: Case, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    paths = case_paths(directory, case.case_id)
    write_volume(case.ct, paths["ct"])
    write_volume(case.suv, paths["suv"])
    if case.label is not None:
        write_volume(case.label, paths["seg"])


def preprocess(case: Case, spacing=TARGET_SPACING) -> Case:
    """Resample to the working spacing, then window CT and SUV onto [0, 1].

    SUV (and the label) are sampled onto the resampled CT grid so all three
    share one grid even when the raw grids differ slightly.
    """
    ct = resample(case.ct, spacing, "trilinear")
    suv = resample_to_grid(case.suv, ct.dims, ct.spacing, ct.origin, "trilinear")
    ct = window_normalize(ct, CT_WINDOW)
    suv = window_normalize(suv, SUV_WINDOW)
    label = None
    if case.label is not None:
        lab = resample_to_grid(case.label, ct.dims, ct.spacing, ct.origin, "nearest")
        label = lab.with_data((lab.data > 0.5).astype(np.float32))
    return Case(case.case_id, ct.with_data(ct.data.astype(np.float32)), suv.with_data(suv.data.astype(np.float32)), label)

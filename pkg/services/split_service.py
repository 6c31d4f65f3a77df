# services/split_service.py

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from services.cube_service import HsiCube
from utils.error_handler import ContractError, ValidationError

SET_NAMES = ("train", "val", "test")

try:
    from services.logging_service import get_run_logger
    _logger_available = True
except ImportError:
    _logger_available = False


def _log_if_available(func_name, *args, **kwargs):
    """Helper to log if logger is available."""
    if _logger_available:
        try:
            getattr(get_run_logger(), func_name)(*args, **kwargs)
        except Exception:
            pass


class SmallClassWarning(UserWarning):
    pass


@dataclass
class SampleSplit:
    """Disjoint train/val/test sets of labeled (row, col) coordinates, each an N x 2 array."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    train_ratio: Optional[float] = None
    val_ratio: Optional[float] = None
    seed: Optional[int] = None

    def subset(self, name: str) -> np.ndarray:
        if name not in SET_NAMES:
            raise ContractError(f"unknown split set '{name}'")
        return getattr(self, name)

    def class_counts(self, cube: HsiCube, name: str) -> Dict[int, int]:
        coords = self.subset(name)
        labels = cube.labels[coords[:, 0], coords[:, 1]] if len(coords) else np.array([], dtype=np.int32)
        return {k: int((labels == k).sum()) for k in range(1, cube.num_classes + 1)}


def _ratio_count(ratio: float, n: int) -> int:
    return max(1, int(math.ceil(round(ratio * n, 9))))


def _allocate(n: int, train_ratio: float, val_ratio: float):
    """(n_train, n_val, n_test) for a class of n samples."""
    if n < 3:
        # train first, then test, then val
        return (1, 0, n - 1) if n > 0 else (0, 0, 0)
    n_train = _ratio_count(train_ratio, n)
    n_val = _ratio_count(val_ratio, n)
    while n_train + n_val > n - 1:
        if n_val > 1:
            n_val -= 1
        else:
            n_train -= 1
    return n_train, n_val, n - n_train - n_val


def stratified_split(cube: HsiCube, train_ratio: float, val_ratio: float, seed: int) -> SampleSplit:
    if not (train_ratio > 0 and val_ratio > 0 and train_ratio + val_ratio < 1):
        raise ContractError(
            f"split ratios must be positive and sum below 1, got {train_ratio} and {val_ratio}",
            error_code="INVALID_RATIO",
        )
    rng = np.random.default_rng(seed)
    parts = {name: [] for name in SET_NAMES}

    for label in np.unique(cube.labels[cube.labels > 0]):
        coords = np.argwhere(cube.labels == label)
        n = len(coords)
        if n < 3:
            message = f"class {int(label)} has only {n} labeled pixel(s); allocating train first, then test"
            warnings.warn(message, SmallClassWarning, stacklevel=2)
            _log_if_available('log_warning', message)
        coords = coords[rng.permutation(n)]
        n_train, n_val, _ = _allocate(n, train_ratio, val_ratio)
        parts["train"].append(coords[:n_train])
        parts["val"].append(coords[n_train:n_train + n_val])
        parts["test"].append(coords[n_train + n_val:])

    def _stack(chunks):
        return np.concatenate(chunks, axis=0).astype(np.int64) if chunks else np.zeros((0, 2), dtype=np.int64)

    split = SampleSplit(
        train=_stack(parts["train"]),
        val=_stack(parts["val"]),
        test=_stack(parts["test"]),
        train_ratio=train_ratio,
        val_ratio=val_ratio,
        seed=seed,
    )
    _log_if_available('log_data_processing', 'Stratified split', int((cube.labels > 0).sum()),
                      len(split.train) + len(split.val) + len(split.test),
                      f'train={len(split.train)} val={len(split.val)} test={len(split.test)} seed={seed}')
    return split


def split_frame(split: SampleSplit) -> pd.DataFrame:
    frames = [
        pd.DataFrame({"row": coords[:, 0], "col": coords[:, 1], "set": name})
        for name, coords in ((n, split.subset(n)) for n in SET_NAMES)
    ]
    frame = pd.concat(frames, ignore_index=True)
    return frame.sort_values(["row", "col"], kind="stable").reset_index(drop=True)


def save_split(split: SampleSplit, path: Path) -> Path:
    """One `row,col,set` line per labeled pixel, row-major."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    split_frame(split).to_csv(path, header=False, index=False, lineterminator="\n")
    _log_if_available('log_file_operation', 'WRITE', str(path), 'split file')
    return path


def check_split_fits(split: SampleSplit, cube: HsiCube) -> SampleSplit:
    """Every coordinate must lie inside the cube on a labeled pixel."""
    for name in SET_NAMES:
        coords = split.subset(name)
        if not len(coords):
            continue
        outside = (coords[:, 0] < 0) | (coords[:, 0] >= cube.height) | (coords[:, 1] < 0) | (coords[:, 1] >= cube.width)
        if outside.any():
            row, col = (int(v) for v in coords[np.argmax(outside)])
            raise ValidationError(
                f"split {name} pixel ({row}, {col}) lies outside the {cube.height}x{cube.width} cube",
                error_code="SPLIT_RANGE",
            )
        unlabeled = cube.labels[coords[:, 0], coords[:, 1]] == 0
        if unlabeled.any():
            row, col = (int(v) for v in coords[np.argmax(unlabeled)])
            raise ValidationError(f"split {name} pixel ({row}, {col}) is unlabeled", error_code="SPLIT_RANGE")
    return split


def load_split(path: Path, cube: Optional[HsiCube] = None) -> SampleSplit:
    """Read a split file; with `cube`, also check every pixel against it."""
    try:
        frame = pd.read_csv(Path(path), header=None, names=["row", "col", "set"],
                            dtype={"row": np.int64, "col": np.int64, "set": str})
    except (ValueError, TypeError, pd.errors.ParserError) as e:
        raise ValidationError(f"malformed split file {path}: {e}", error_code="SPLIT_FORMAT") from e
    if frame.isna().any().any():
        raise ValidationError(f"split file {path} has incomplete lines", error_code="SPLIT_FORMAT")
    unknown = sorted(set(frame["set"]) - set(SET_NAMES))
    if unknown:
        raise ValidationError(f"split file names unknown sets: {unknown}", error_code="SPLIT_FORMAT")
    if frame.duplicated(["row", "col"]).any():
        raise ValidationError("split file lists a pixel more than once", error_code="SPLIT_OVERLAP")
    sets = {
        name: frame.loc[frame["set"] == name, ["row", "col"]].to_numpy(dtype=np.int64).reshape(-1, 2)
        for name in SET_NAMES
    }
    split = SampleSplit(train=sets["train"], val=sets["val"], test=sets["test"])
    return check_split_fits(split, cube) if cube is not None else split

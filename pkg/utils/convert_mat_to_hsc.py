"""
Utility script to convert a public hyperspectral distribution (.mat data cube
plus .mat ground truth) to the `.hsc` cube format.

Usage:
    python utils/convert_mat_to_hsc.py <data.mat> <gt.mat> <output.hsc> [drop_bands] [class_names.txt]

Example:
    python utils/convert_mat_to_hsc.py data/Indian_pines.mat data/Indian_pines_gt.mat data/ip.hsc 104-108,150-163,220
"""

import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy.io as sio

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from services.cube_service import HsiCube, save_cube  # noqa: E402
from utils.error_handler import ConfigurationError, FormatError, SdmambaError  # noqa: E402


def parse_band_spec(spec: Optional[str], total_bands: int) -> List[int]:
    """
    Turn a 1-based, inclusive band list such as "104-108,150-163,220" into
    sorted 0-based indices.
    """
    if not spec:
        return []
    indices = set()
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                first, last = (int(x) for x in part.split("-", 1))
            else:
                first = last = int(part)
        except ValueError as e:
            raise ConfigurationError(f"Invalid band range '{part}'") from e
        if first < 1 or last < first or last > total_bands:
            raise ConfigurationError(f"Band range '{part}' outside 1..{total_bands}")
        indices.update(range(first - 1, last))
    return sorted(indices)


def _pick_array(mat: dict, ndim: int, key: Optional[str], source: Path) -> np.ndarray:
    if key is not None:
        if key not in mat:
            raise ConfigurationError(f"Variable '{key}' not found in {source.name}")
        return np.asarray(mat[key])
    candidates = [k for k, v in mat.items() if not k.startswith("__") and np.ndim(v) == ndim]
    if len(candidates) != 1:
        raise ConfigurationError(
            f"Cannot auto-detect the {ndim}-D variable in {source.name} "
            f"(candidates: {candidates or 'none'}); pass its key explicitly"
        )
    return np.asarray(mat[candidates[0]])


def _load_mat(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"Input file not found: {path}")
    try:
        return sio.loadmat(str(path))
    except (ValueError, NotImplementedError, sio.matlab.MatReadError) as e:
        raise FormatError(f"Cannot read {path.name} as a MATLAB file: {e}", path=str(path)) from e


def read_class_names(path: Path) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def convert_mat_to_cube(
    data_path: Path,
    gt_path: Path,
    drop_bands: Optional[str] = None,
    names_path: Optional[Path] = None,
    data_key: Optional[str] = None,
    gt_key: Optional[str] = None,
) -> HsiCube:
    data = _pick_array(_load_mat(Path(data_path)), 3, data_key, Path(data_path)).astype(np.float32)
    labels = _pick_array(_load_mat(Path(gt_path)), 2, gt_key, Path(gt_path)).astype(np.int32)
    if labels.shape != data.shape[:2]:
        raise ConfigurationError(
            f"Ground truth {labels.shape} does not match cube {data.shape[:2]}"
        )

    dropped = parse_band_spec(drop_bands, data.shape[2])
    if dropped:
        keep = np.setdiff1d(np.arange(data.shape[2]), dropped)
        data = data[:, :, keep]

    class_names = read_class_names(Path(names_path)) if names_path else None
    num_classes = int(labels.max())
    return HsiCube(data=np.ascontiguousarray(data), labels=labels,
                   num_classes=num_classes, class_names=class_names).validate()


def main():
    if len(sys.argv) < 4:
        print("Usage: python convert_mat_to_hsc.py <data.mat> <gt.mat> <output.hsc> [drop_bands] [class_names.txt]")
        print("\nExample:")
        print("  python utils/convert_mat_to_hsc.py Indian_pines.mat Indian_pines_gt.mat ip.hsc 104-108,150-163,220")
        sys.exit(1)

    data_file, gt_file, output_file = (Path(a) for a in sys.argv[1:4])
    drop_bands = sys.argv[4] if len(sys.argv) >= 5 else None
    names_file = Path(sys.argv[5]) if len(sys.argv) >= 6 else None

    print(f"Reading cube from: {data_file}")
    try:
        cube = convert_mat_to_cube(data_file, gt_file, drop_bands, names_file)
    except (SdmambaError, OSError) as e:
        print(f"Error: {e}")
        sys.exit(1)

    save_cube(cube, output_file)
    print(f"Converted cube: {cube.height}x{cube.width}x{cube.bands}, {cube.num_classes} classes")
    print(f"Saved to: {output_file}")


if __name__ == "__main__":
    main()

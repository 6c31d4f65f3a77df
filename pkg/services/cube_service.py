# services/cube_service.py

"""
Hyperspectral cube container, `.hsc` / `.hsl` file formats, normalization,
mirror-padded patch extraction and the synthetic cube generator.

.hsc (little-endian):
    "HSC1" | u32 H | u32 W | u32 B | u32 K | f32 raster H*W*B (band-interleaved
    by pixel) | i32 labels H*W | optional: u32 count + length-prefixed names

.hsl (little-endian):
    "HSL1" | u32 H | u32 W | u32 K | i32 raster H*W
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from services.autograd import Tensor
from utils.binary_io import ByteReader, ByteWriter
from utils.error_handler import ContractError, DimensionError, ValidationError

CUBE_MAGIC = b"HSC1"
LABEL_MAP_MAGIC = b"HSL1"

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


@dataclass
class HsiCube:
    data: np.ndarray                  # H x W x B float32
    labels: np.ndarray                # H x W int32, 0 = unlabeled
    num_classes: int
    class_names: Optional[List[str]] = field(default=None)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def bands(self) -> int:
        return int(self.data.shape[2])

    def labeled_coords(self) -> np.ndarray:
        """(row, col) pairs of every labeled pixel, row-major."""
        return np.argwhere(self.labels > 0)

    def all_coords(self) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)

    def class_name(self, label: int) -> str:
        if self.class_names and 1 <= label <= len(self.class_names):
            return self.class_names[label - 1]
        return f"class_{label}"

    def validate(self) -> "HsiCube":
        if self.data.ndim != 3:
            raise DimensionError("cube raster must be H x W x B", shapes=(self.data.shape,))
        if self.labels.shape != self.data.shape[:2]:
            raise DimensionError("label raster must match the cube's H x W", shapes=(self.labels.shape, self.data.shape[:2]))
        if not np.all(np.isfinite(self.data)):
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise ValidationError(
                f"cube raster holds a non-finite value at pixel ({bad[0]}, {bad[1]}) band {bad[2]}",
                error_code="NON_FINITE",
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}], found [{self.labels.min()}, {self.labels.max()}]",
                error_code="LABEL_RANGE",
            )
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValidationError(
                f"{len(self.class_names)} class names for {self.num_classes} classes",
                error_code="CLASS_NAMES",
            )
        return self


# ---- .hsc ----

def encode_cube(cube: HsiCube) -> bytes:
    writer = ByteWriter()
    writer.magic(CUBE_MAGIC)
    writer.u32_array([cube.height, cube.width, cube.bands, cube.num_classes])
    writer.f32_array(cube.data)
    writer.i32_array(cube.labels)
    if cube.class_names:
        writer.u32(len(cube.class_names))
        for name in cube.class_names:
            writer.text(name)
    return writer.getvalue()


def save_cube(cube: HsiCube, path: Path) -> Path:
    cube.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_cube(cube))
    _log_if_available('log_file_operation', 'WRITE', str(path),
                      f'cube {cube.height}x{cube.width}x{cube.bands}, {cube.num_classes} classes')
    return path


def decode_cube(reader: ByteReader) -> HsiCube:
    reader.expect_magic(CUBE_MAGIC)
    height, width, bands, num_classes = (int(v) for v in reader.u32_array(4, "cube header"))
    data = reader.f32_array(height * width * bands, "cube raster").reshape(height, width, bands)
    labels = reader.i32_array(height * width, "label raster").reshape(height, width)
    class_names = None
    if not reader.at_end():
        count = reader.u32("class name count")
        class_names = [reader.text("class name") for _ in range(count)]
        if not reader.at_end():
            raise reader.fail(f"{reader.remaining} trailing bytes after the names block")
    return HsiCube(data=data, labels=labels, num_classes=num_classes, class_names=class_names).validate()


def load_cube(path: Path) -> HsiCube:
    cube = decode_cube(ByteReader.from_file(Path(path)))
    _log_if_available('log_file_operation', 'READ', str(path),
                      f'cube {cube.height}x{cube.width}x{cube.bands}, {int((cube.labels > 0).sum())} labeled pixels')
    return cube


# ---- .hsl ----

class LabelMap(NamedTuple):
    labels: np.ndarray
    num_classes: int


def save_label_map(labels: np.ndarray, num_classes: int, path: Path) -> Path:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError("label map must be H x W", shapes=(labels.shape,))
    writer = ByteWriter()
    writer.magic(LABEL_MAP_MAGIC)
    writer.u32_array([labels.shape[0], labels.shape[1], num_classes])
    writer.i32_array(labels)
    path = writer.write_to(Path(path))
    _log_if_available('log_file_operation', 'WRITE', str(path), f'label map {labels.shape[0]}x{labels.shape[1]}')
    return path


def load_label_map(path: Path) -> LabelMap:
    reader = ByteReader.from_file(Path(path))
    reader.expect_magic(LABEL_MAP_MAGIC)
    height, width, num_classes = (int(v) for v in reader.u32_array(3, "label map header"))
    labels = reader.i32_array(height * width, "label map raster").reshape(height, width)
    if not reader.at_end():
        raise reader.fail(f"{reader.remaining} trailing bytes after the label raster")
    return LabelMap(labels=labels, num_classes=num_classes)


# ---- preprocessing ----

def normalize(cube: HsiCube) -> HsiCube:
    """Per-band min-max scaling to [0, 1]; constant bands become 0."""
    data = cube.data.astype(np.float64)
    lo = data.min(axis=(0, 1))
    hi = data.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (data - lo) / safe, 0.0)
    return HsiCube(
        data=scaled.astype(np.float32),
        labels=cube.labels,
        num_classes=cube.num_classes,
        class_names=cube.class_names,
    )


def mirror_index(indices: np.ndarray, size: int) -> np.ndarray:
    """Reflect out-of-range indices back into [0, size) without repeating the edge."""
    indices = np.asarray(indices, dtype=np.int64)
    if size == 1:
        return np.zeros_like(indices)
    period = 2 * (size - 1)
    wrapped = np.mod(indices, period)
    return np.where(wrapped > size - 1, period - wrapped, wrapped)


def extract_patch_array(cube: HsiCube, row: int, col: int, patch_size: int) -> np.ndarray:
    if patch_size < 1 or patch_size % 2 == 0:
        raise ContractError(f"patch_size must be odd, got {patch_size}")
    half = patch_size // 2
    offsets = np.arange(-half, half + 1)
    rows = mirror_index(row + offsets, cube.height)
    cols = mirror_index(col + offsets, cube.width)
    window = cube.data[np.ix_(rows, cols)]          # P x P x B
    return np.ascontiguousarray(window.transpose(2, 0, 1))


def extract_patch(cube: HsiCube, row: int, col: int, patch_size: int) -> Tensor:
    """bands x P x P window centered at (row, col), channel first."""
    return Tensor(extract_patch_array(cube, row, col, patch_size))


def extract_batch(cube: HsiCube, coords: Sequence[Tuple[int, int]], patch_size: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return np.stack([extract_patch_array(cube, int(r), int(c), patch_size) for r, c in coords], axis=0)


# ---- synthetic fixture ----

def _signatures(num_classes: int, bands: int, noise_sigma: float) -> np.ndarray:
    band_axis = np.arange(bands, dtype=np.float64)
    centers = (np.arange(num_classes) + 0.5) / num_classes * bands
    width = max(bands / (2.0 * num_classes), 0.5)
    bumps = np.exp(-((band_axis[None, :] - centers[:, None]) ** 2) / (2.0 * width ** 2))

    diffs = bumps[:, None, :] - bumps[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(axis=2))
    min_dist = dist[~np.eye(num_classes, dtype=bool)].min() if num_classes > 1 else 1.0
    # amplitude keeps every pair of class signatures more than 5 sigma apart
    amplitude = max(0.6, 6.0 * noise_sigma / min_dist)
    return 0.2 + amplitude * bumps


def synthesize_cube(
    num_classes: int = 3,
    size: int = 16,
    bands: int = 8,
    noise_sigma: float = 0.05,
    seed: int = 7,
    background: bool = False,
) -> HsiCube:
    """Vertical class stripes with Gaussian-bump spectra plus i.i.d. Gaussian noise."""
    frame = 1 if background else 0
    inner = size - 2 * frame
    if num_classes < 2 or inner < num_classes:
        raise ContractError(f"cannot lay out {num_classes} class stripes in a {size}-pixel cube")
    if bands < 1:
        raise ContractError("synthetic cube needs at least one band")

    rng = np.random.default_rng(seed)
    signatures = _signatures(num_classes, bands, noise_sigma)

    labels = np.zeros((size, size), dtype=np.int32)
    stripe = np.minimum(np.arange(inner) * num_classes // inner, num_classes - 1) + 1
    labels[frame:size - frame, frame:size - frame] = stripe[None, :]

    data = np.full((size, size, bands), 0.1, dtype=np.float64)
    labeled = labels > 0
    data[labeled] = signatures[labels[labeled] - 1]
    if noise_sigma > 0:
        data = data + rng.normal(0.0, noise_sigma, size=data.shape)

    cube = HsiCube(
        data=data.astype(np.float32),
        labels=labels,
        num_classes=num_classes,
        class_names=[f"class_{k}" for k in range(1, num_classes + 1)],
    )
    _log_if_available('log_data_processing', 'Synthesize cube', 0, size * size,
                      f'{num_classes} classes, {bands} bands, sigma={noise_sigma}, seed={seed}')
    return cube.validate()

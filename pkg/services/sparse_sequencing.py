# services/sparse_sequencing.py

"""
Sparse deformable sequencing.

Tokens are ranked by the angle between each token and an anchor token. The
most similar ceil(lambda * N) tokens, in ascending-angle order, form the
sequence fed to a Mamba block; its outputs are scattered back onto the
original token positions as a residual.

Selection is hard: gradients reach the tokens through the gathered values and
the skip path, never through the ranking.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from services.autograd import Tensor, add, argsort, gather_rows, scatter_rows
from services.mac_counter import record_macs
from services.mamba_block import MambaBlockParams, mamba_block_forward
from utils.error_handler import ContractError, DimensionError, IndexOutOfRangeError

SeedLike = Union[int, Sequence[int]]


class Anchor(NamedTuple):
    index: int
    vector: np.ndarray


@dataclass(frozen=True)
class SparseSelection:
    indices: np.ndarray   # ordered, most similar first
    angles: np.ndarray    # radians in [0, pi], one per token
    lam: float
    anchor_index: Optional[int] = None

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @property
    def num_tokens(self) -> int:
        return int(self.angles.size)


def selected_count(lam: float, num_tokens: int) -> int:
    """ceil(lam * N) clamped to [1, N]; rounding guards products like 0.1 * 30."""
    if not (0.0 < lam <= 1.0):
        raise ContractError(f"sparsity ratio must lie in (0, 1], got {lam}", error_code="INVALID_RATIO")
    return max(1, min(num_tokens, int(math.ceil(round(lam * num_tokens, 9)))))


def angular_attention(tokens: Tensor, anchor) -> np.ndarray:
    """Angle in radians between every token row and the anchor vector.

    Computed in float64. Tokens bitwise equal to the anchor get exactly 0 and
    zero-norm tokens get pi/2.
    """
    t = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, dtype=np.float64)
    a = np.asarray(anchor.data if isinstance(anchor, Tensor) else anchor, dtype=np.float64).reshape(-1)
    if t.ndim != 2 or t.shape[1] != a.size:
        raise DimensionError("tokens and anchor widths differ", shapes=(t.shape, a.shape))
    n_tokens, width = t.shape

    token_norms = np.linalg.norm(t, axis=1)
    anchor_norm = np.linalg.norm(a)
    dots = t @ a
    record_macs(2 * n_tokens * width)

    denom = token_norms * anchor_norm
    valid = denom > 0
    cosine = np.zeros(n_tokens, dtype=np.float64)
    cosine[valid] = dots[valid] / denom[valid]
    angles = np.arccos(np.clip(cosine, -1.0, 1.0))
    angles[~valid] = np.pi / 2
    angles[np.all(t == a, axis=1) & (token_norms > 0)] = 0.0
    return angles


def select_sparse(angles, lam: float, anchor_index: Optional[int] = None) -> SparseSelection:
    angles = np.asarray(angles.data if isinstance(angles, Tensor) else angles, dtype=np.float64).reshape(-1)
    count = selected_count(lam, angles.size)
    order = argsort(angles)
    if anchor_index is not None:
        if not (0 <= anchor_index < angles.size):
            raise IndexOutOfRangeError(
                f"anchor index {anchor_index} out of range for {angles.size} tokens",
                index=anchor_index,
                size=angles.size,
            )
        order = np.concatenate([[anchor_index], order[order != anchor_index]])
    return SparseSelection(
        indices=order[:count].astype(np.int64),
        angles=angles,
        lam=float(lam),
        anchor_index=anchor_index,
    )


def spatial_anchor_index(height: int, width: int) -> int:
    return (height // 2) * width + (width // 2)


def spatial_anchor(tokens: Tensor, height: int, width: int) -> Anchor:
    if tokens.shape[0] != height * width:
        raise DimensionError("spatial tokens do not cover an H x W grid", shapes=(tokens.shape, (height * width,)))
    index = spatial_anchor_index(height, width)
    return Anchor(index=index, vector=tokens.data[index])


def spectral_anchor_index(num_channels: int, seed: SeedLike) -> int:
    if num_channels < 1:
        raise ContractError("spectral anchor needs at least one channel")
    return int(np.random.default_rng(seed).integers(num_channels))


def spectral_anchor(tokens: Tensor, rng_seed: SeedLike) -> Anchor:
    index = spectral_anchor_index(tokens.shape[0], rng_seed)
    return Anchor(index=index, vector=tokens.data[index])


def sequence_and_restore(tokens: Tensor, sel: SparseSelection, block: MambaBlockParams) -> Tensor:
    if sel.num_tokens != tokens.shape[0]:
        raise DimensionError("selection was built for a different token count", shapes=((sel.num_tokens,), tokens.shape))
    gathered = gather_rows(tokens, sel.indices)
    processed = mamba_block_forward(block, gathered)
    base = Tensor(np.zeros(tokens.shape))
    return add(tokens, scatter_rows(base, sel.indices, processed))

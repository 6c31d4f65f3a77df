# tests/test_sparse_sequencing.py

import math
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pytest
from scipy import stats

from services import autograd as ag
from services.autograd import Tensor, default_dtype, new_tape, no_grad, parameter
from services.mac_counter import MacCounter
from services.mamba_block import init_mamba_params, mamba_block_forward
from services.sparse_sequencing import (
    angular_attention,
    select_sparse,
    selected_count,
    sequence_and_restore,
    spatial_anchor,
    spatial_anchor_index,
    spectral_anchor_index,
)
from utils.error_handler import ContractError, DimensionError


@pytest.mark.parametrize(
    "lam, n, expected",
    [(0.3, 169, 51), (0.1, 30, 3), (0.3, 256, 77), (1.0, 25, 25), (0.001, 10, 1), (0.5, 1, 1)],
)
def test_selected_count(lam, n, expected):
    assert selected_count(lam, n) == expected


@pytest.mark.parametrize("lam", [0.0, -0.1, 1.5])
def test_selected_count_rejects_invalid_ratio(lam):
    with pytest.raises(ContractError) as exc_info:
        selected_count(lam, 10)
    assert exc_info.value.error_code == "INVALID_RATIO"


def test_angular_attention_special_cases():
    anchor = np.array([1.0, 0.0])
    tokens = np.array([[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    with MacCounter() as counter:
        angles = angular_attention(Tensor(tokens), anchor)
    np.testing.assert_allclose(angles, [0.0, math.pi / 2, math.pi, math.pi / 2, 0.0], atol=1e-12)
    assert angles.dtype == np.float64
    assert angles[4] == 0.0
    assert counter.total() == 2 * 5 * 2


def test_selection_matches_brute_force_oracle():
    rng = np.random.default_rng(11)
    tokens = rng.normal(size=(25, 6))
    anchor = spatial_anchor(Tensor(tokens), 5, 5)
    selection = select_sparse(angular_attention(Tensor(tokens), anchor.vector), 0.3, anchor_index=anchor.index)

    a = tokens[anchor.index].astype(np.float32).astype(np.float64)
    brute = []
    for i, row in enumerate(tokens.astype(np.float32).astype(np.float64)):
        cos = float(np.dot(row, a) / (np.linalg.norm(row) * np.linalg.norm(a)))
        angle = 0.0 if i == anchor.index else math.acos(max(-1.0, min(1.0, cos)))
        brute.append((angle, i))
    brute.sort()
    expected = [anchor.index] + [i for _, i in brute if i != anchor.index][: math.ceil(0.3 * 25) - 1]

    assert selection.size == 8
    assert selection.indices.tolist() == expected
    assert selection.indices[0] == 12


def test_ties_keep_original_order():
    selection = select_sparse(np.array([0.5, 0.1, 0.1, 0.3]), 0.75)
    assert selection.indices.tolist() == [1, 2, 3]


def test_anchor_is_promoted_to_front():
    selection = select_sparse(np.array([0.0, 0.0, 0.2, 0.1]), 0.5, anchor_index=1)
    assert selection.indices.tolist() == [1, 0]


def test_spatial_anchor_is_patch_center():
    assert spatial_anchor_index(13, 13) == 84
    assert spatial_anchor_index(5, 5) == 12


def test_spectral_anchor_is_seeded():
    assert spectral_anchor_index(32, [0, 3, 1]) == spectral_anchor_index(32, [0, 3, 1])
    draws = {spectral_anchor_index(32, [0, step, 0]) for step in range(20)}
    assert all(0 <= d < 32 for d in draws)
    assert len(draws) > 1


def test_sequence_and_restore_keeps_unselected_tokens():
    rng = np.random.default_rng(12)
    with default_dtype(np.float64):
        block = init_mamba_params(3, d_state=2, rng=rng)
        tokens = parameter(rng.normal(size=(6, 3)))
        selection = select_sparse(np.array([0.4, 0.0, 0.9, 0.2, 0.8, 0.3]), 0.5)
        weights = rng.normal(size=(6, 3))
        with new_tape():
            out = sequence_and_restore(tokens, selection, block)
            ag.sum(ag.mul(out, weights)).backward()
        with no_grad():
            processed = mamba_block_forward(block, Tensor(tokens.data[[1, 3, 5]])).data

    assert selection.indices.tolist() == [1, 3, 5]
    for row in (0, 2, 4):
        np.testing.assert_array_equal(out.data[row], tokens.data[row])
        np.testing.assert_array_equal(tokens.grad[row], weights[row])
    np.testing.assert_allclose(out.data[[1, 3, 5]], tokens.data[[1, 3, 5]] + processed, rtol=1e-12)


def test_sequence_and_restore_rejects_foreign_selection():
    block = init_mamba_params(3, d_state=2)
    selection = select_sparse(np.zeros(5), 0.5)
    with pytest.raises(DimensionError):
        sequence_and_restore(Tensor(np.ones((4, 3))), selection, block)


def _naive_angles(tokens, anchor_index):
    anchor = [float(x) for x in tokens[anchor_index]]
    anchor_norm = math.sqrt(sum(x * x for x in anchor))
    angles = []
    for i, row in enumerate(tokens):
        if i == anchor_index:
            angles.append(0.0)
            continue
        row = [float(x) for x in row]
        cos = sum(x * y for x, y in zip(row, anchor)) / (math.sqrt(sum(x * x for x in row)) * anchor_norm)
        angles.append(math.acos(max(-1.0, min(1.0, cos))))
    return angles


def test_selection_agrees_with_naive_ranking_on_small_random_instances():
    rng = np.random.default_rng(2024)
    ratios = [0.05, 0.1, 0.25, 0.3, 0.5, 0.75, 1.0]
    for _ in range(200):
        n = int(rng.integers(1, 13))
        width = int(rng.integers(1, 5))
        lam = ratios[int(rng.integers(len(ratios)))]
        anchor_index = int(rng.integers(n))
        tokens = rng.normal(size=(n, width))

        selection = select_sparse(angular_attention(tokens, tokens[anchor_index]), lam, anchor_index=anchor_index)
        naive = _naive_angles(tokens, anchor_index)
        count = max(1, min(n, math.ceil(round(lam * n, 9))))
        chosen = selection.indices.tolist()

        assert selection.size == count
        assert chosen[0] == anchor_index
        assert len(set(chosen)) == count
        # the rest of the sequence is the next most similar tokens, in ascending order
        rest = [naive[i] for i in chosen[1:]]
        assert all(a <= b + 1e-6 for a, b in zip(rest, rest[1:]))
        left_out = [naive[i] for i in range(n) if i not in chosen]
        if rest and left_out:
            assert max(rest) <= min(left_out) + 1e-6

        ranked = sorted((angle, i) for i, angle in enumerate(naive) if i != anchor_index)
        gaps = [b[0] - a[0] for a, b in zip(ranked, ranked[1:])]
        if all(g > 1e-6 for g in gaps):
            assert chosen == [anchor_index] + [i for _, i in ranked][: count - 1]


def test_selection_ignores_positive_row_scaling():
    rng = np.random.default_rng(31)
    tokens = rng.normal(size=(25, 6))
    scales = rng.uniform(0.1, 10.0, size=(25, 1))
    plain = select_sparse(angular_attention(tokens, tokens[12]), 0.3, anchor_index=12)
    scaled_tokens = tokens * scales
    scaled = select_sparse(angular_attention(scaled_tokens, scaled_tokens[12]), 0.3, anchor_index=12)
    assert plain.indices.tolist() == scaled.indices.tolist()


def test_smaller_ratio_selects_a_prefix_of_larger_ratio():
    rng = np.random.default_rng(32)
    tokens = rng.normal(size=(30, 4))
    angles = angular_attention(tokens, tokens[7])
    ratios = [0.1, 0.2, 0.3, 0.5, 0.8, 1.0]
    selections = [select_sparse(angles, lam, anchor_index=7) for lam in ratios]
    for small, large in zip(selections, selections[1:]):
        assert small.indices.tolist() == large.indices[: small.size].tolist()


def test_full_ratio_with_silent_block_is_identity():
    rng = np.random.default_rng(33)
    block = init_mamba_params(4, d_state=2, rng=rng)
    block.out_proj.data[...] = 0.0
    tokens = Tensor(rng.normal(size=(9, 4)))
    selection = select_sparse(angular_attention(tokens, tokens.data[4]), 1.0, anchor_index=4)
    assert sorted(selection.indices.tolist()) == list(range(9))
    with no_grad():
        out = sequence_and_restore(tokens, selection, block)
    np.testing.assert_array_equal(out.data, tokens.data)


def test_spectral_anchor_draws_are_uniform():
    channels = 8
    draws = [spectral_anchor_index(channels, [0, step, 0]) for step in range(10_000)]
    counts = np.bincount(draws, minlength=channels)
    assert counts.size == channels
    assert stats.chisquare(counts).pvalue > 1e-4


def test_single_channel_anchor_is_always_zero():
    assert {spectral_anchor_index(1, [5, step, 2]) for step in range(50)} == {0}

# tests/test_sdmamba_model.py

import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pytest
from pydantic import ValidationError as PydanticValidationError

from services.autograd import Tensor, default_dtype, new_tape, no_grad
from services.layers import cross_entropy
from services.sdmamba_model import SdmambaConfig, SdmambaModel, expected_parameter_count
from services.sparse_sequencing import selected_count
from utils.error_handler import ContractError, DimensionError

SMALL = dict(patch_size=5, in_bands=4, hidden_dim=6, num_classes=3, d_state=2,
             lambda_spatial=0.5, lambda_spectral=0.5, seed=3)


def _batch(size=2, seed=0, bands=4, patch=5):
    return np.random.default_rng(seed).normal(size=(size, bands, patch, patch))


def test_parameter_count_matches_closed_form():
    for overrides in ({}, {"mamba_conv": False}, {"expand": 1, "d_state": 3}):
        config = SdmambaConfig(**{**SMALL, **overrides})
        assert SdmambaModel(config).parameter_count() == expected_parameter_count(config)


def test_default_configuration_parameter_count():
    config = SdmambaConfig()
    assert config.patch_size == 13 and config.hidden_dim == 256
    assert expected_parameter_count(config) > 0


def test_forward_shapes_and_selection_sizes():
    config = SdmambaConfig(**SMALL)
    model = SdmambaModel(config).eval()
    with no_grad():
        logits = model(Tensor(_batch(3)))
        features = model.forward_features(Tensor(_batch(3)))
    assert logits.shape == (3, 3)
    assert features.shape == (3, 6)
    assert len(model.last_selections) == 3
    spatial, spectral = model.last_selections[0]
    assert spatial.size == selected_count(0.5, 25)
    assert spatial.indices[0] == 12
    assert spectral.size == selected_count(0.5, 6)
    assert spectral.indices[0] == spectral.anchor_index
    np.testing.assert_allclose(model.last_attention.sum(axis=1), 1.0, rtol=1e-5)
    assert model.last_attention.shape == (25, 25)


def test_eval_is_deterministic_and_training_reseeds_spectral_anchor():
    model = SdmambaModel(SdmambaConfig(**SMALL))
    model.eval()
    assert model.spectral_seed(0) == model.config.seed
    with no_grad():
        first = model(Tensor(_batch())).data
        second = model(Tensor(_batch())).data
    np.testing.assert_array_equal(first, second)

    model.train()
    seeds = []
    with no_grad():
        for _ in range(3):
            model(Tensor(_batch()))
            seeds.append(tuple(model.spectral_seed(0)))
    assert len(set(seeds)) == 3
    assert model.forward_count == 3


@pytest.mark.parametrize("training", [False, True])
def test_network_gradients_match_finite_differences(training):
    """Sampled central differences through the whole network, with selections frozen."""
    rng = np.random.default_rng(21)
    targets = np.array([0, 2])
    with default_dtype(np.float64):
        model = SdmambaModel(SdmambaConfig(**SMALL))
        model.training = training
        batch = Tensor(_batch(2, seed=5))
        with no_grad():
            model(batch)
        frozen = list(model.last_selections)

        with new_tape():
            loss = cross_entropy(model.forward(batch, frozen), targets)
            loss.backward()

        def loss_value():
            with no_grad():
                return cross_entropy(model.forward(batch, frozen), targets).item()

        eps = 1e-6
        for name, tensor in model.named_parameters().items():
            for flat in rng.choice(tensor.size, size=min(3, tensor.size), replace=False):
                idx = np.unravel_index(flat, tensor.shape)
                original = tensor.data[idx]
                tensor.data[idx] = original + eps
                plus = loss_value()
                tensor.data[idx] = original - eps
                minus = loss_value()
                tensor.data[idx] = original
                numeric = (plus - minus) / (2 * eps)
                assert tensor.grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7), name


def test_state_dict_round_trip():
    config = SdmambaConfig(**SMALL)
    source = SdmambaModel(config)
    source.train()
    with no_grad():
        source(Tensor(_batch(4)))
    target = SdmambaModel(SdmambaConfig(**{**SMALL, "seed": 99}))
    target.load_state_dict(source.state_dict())
    # buffers come along
    np.testing.assert_array_equal(target.bn_state.running_mean, source.bn_state.running_mean)

    target.config = source.config
    source.eval()
    target.eval()
    with no_grad():
        np.testing.assert_array_equal(source(Tensor(_batch())).data, target(Tensor(_batch())).data)


def test_load_state_dict_rejects_missing_keys():
    model = SdmambaModel(SdmambaConfig(**SMALL))
    state = model.state_dict()
    del state["head.bias"]
    with pytest.raises(ContractError) as exc_info:
        model.load_state_dict(state)
    assert exc_info.value.error_code == "STATE_MISMATCH"
    assert exc_info.value.details["missing"] == ["head.bias"]


def test_wrong_band_count_raises():
    model = SdmambaModel(SdmambaConfig(**SMALL)).eval()
    with pytest.raises(DimensionError):
        model(Tensor(_batch(bands=5)))


@pytest.mark.parametrize(
    "overrides",
    [{"patch_size": 4}, {"patch_size": 1}, {"lambda_spatial": 0.0}, {"lambda_spectral": 1.5},
     {"train_ratio": 0.6, "val_ratio": 0.4}, {"num_classes": 1}, {"stem_kernel": 2}, {"unknown": 1}],
)
def test_invalid_configuration_is_rejected(overrides):
    with pytest.raises(PydanticValidationError):
        SdmambaConfig(**{**SMALL, **overrides})


def test_config_json_round_trip():
    config = SdmambaConfig(**SMALL)
    assert SdmambaConfig.from_json(config.to_json()) == config


def test_fusion_with_uniform_spectral_tokens_is_flat():
    rng = np.random.default_rng(41)
    model = SdmambaModel(SdmambaConfig(**SMALL)).eval()
    spa = Tensor(rng.normal(size=(6, 5, 5)))
    spe = Tensor(np.broadcast_to(rng.normal(size=(6, 1, 1)), (6, 5, 5)))
    with no_grad():
        fused = model.attention_fusion(spa, spe).data
    np.testing.assert_allclose(model.last_attention, 1.0 / 25, rtol=1e-5)
    np.testing.assert_allclose(model.last_attention.sum(axis=1), 1.0, rtol=1e-6)
    tokens = fused.reshape(6, 25).T
    value = spe.data[:, 0, 0] @ model.w_v.data
    np.testing.assert_allclose(tokens, np.broadcast_to(value, tokens.shape), rtol=1e-5, atol=1e-6)


def test_head_reads_only_the_center_position():
    rng = np.random.default_rng(42)
    model = SdmambaModel(SdmambaConfig(**SMALL)).eval()
    fused = rng.normal(size=(6, 5, 5))
    edited = fused.copy()
    edited[:, 0, 0] += 10.0
    edited[:, 4, 1] -= 3.0
    edited[:, 2, 3] *= -1.0
    with no_grad():
        before = model.classify(Tensor(fused)).data
        after = model.classify(Tensor(edited)).data
        edited[:, 2, 2] += 1.0
        moved = model.classify(Tensor(edited)).data
    np.testing.assert_array_equal(before, after)
    assert not np.array_equal(before, moved)


def test_single_channel_spectral_branch_selects_its_only_channel():
    model = SdmambaModel(SdmambaConfig(**{**SMALL, "hidden_dim": 1})).eval()
    with no_grad():
        logits = model(Tensor(_batch(2)))
    assert logits.shape == (2, 3)
    for pair in model.last_selections:
        assert pair.spectral.indices.tolist() == [0]
        assert pair.spectral.anchor_index == 0


def test_full_spatial_ratio_with_silent_block_is_identity():
    rng = np.random.default_rng(43)
    model = SdmambaModel(SdmambaConfig(**{**SMALL, "lambda_spatial": 1.0})).eval()
    model.spatial_block.out_proj.data[...] = 0.0
    y = Tensor(rng.normal(size=(6, 5, 5)))
    with no_grad():
        out = model.sdspam_forward(y)
    assert model._spatial_selection.size == 25
    np.testing.assert_array_equal(out.data, y.data)


def test_frozen_selection_confines_an_unselected_edit_to_its_position():
    rng = np.random.default_rng(44)
    model = SdmambaModel(SdmambaConfig(**SMALL)).eval()
    y = rng.normal(size=(6, 5, 5))
    with no_grad():
        base = model.sdspam_forward(Tensor(y)).data
        selection = model._spatial_selection
        position = next(p for p in range(25) if p not in set(selection.indices.tolist()))
        row, col = divmod(position, 5)
        edited = y.copy()
        edited[:, row, col] += 5.0
        out = model.sdspam_forward(Tensor(edited), selection).data

    changed = np.zeros((5, 5), dtype=bool)
    changed[row, col] = True
    np.testing.assert_array_equal(out[:, ~changed], base[:, ~changed])
    np.testing.assert_array_equal(out[:, row, col], Tensor(edited).data[:, row, col])


def test_replayed_training_step_gives_identical_gradients():
    targets = np.array([1, 0])
    grads = []
    for _ in range(2):
        model = SdmambaModel(SdmambaConfig(**SMALL)).train()
        with new_tape():
            cross_entropy(model(Tensor(_batch(2, seed=8))), targets).backward()
        grads.append({name: t.grad.copy() for name, t in model.named_parameters().items()})
    for name, grad in grads[0].items():
        np.testing.assert_array_equal(grad, grads[1][name], err_msg=name)

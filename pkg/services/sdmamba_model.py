# services/sdmamba_model.py

"""
SDMamba network: Conv-BN-GELU stem, a sparse spatial Mamba branch and a
sparse spectral Mamba branch running on the same stem output, cross-branch
attention fusion, and a center-pixel linear head.
"""

import json
import math
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from services.autograd import (
    Tensor,
    concat_rows,
    gather_rows,
    matmul,
    mul,
    parameter,
    reshape,
    transpose,
)
from services.layers import BatchNormState, batchnorm, conv2d, gelu, linear, softmax
from services.mac_counter import counting_scope
from services.mamba_block import MambaBlockParams, expected_block_parameters, init_mamba_params
from services.sparse_sequencing import (
    SparseSelection,
    angular_attention,
    select_sparse,
    sequence_and_restore,
    spatial_anchor,
    spatial_anchor_index,
    spectral_anchor,
)
from utils.error_handler import ContractError, DimensionError

HEAD_INIT_STD = 0.02


class SdmambaConfig(BaseModel):
    """Every architectural and training hyperparameter of one run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    patch_size: int = 13
    in_bands: int = Field(200, ge=1)
    hidden_dim: int = Field(256, ge=1)
    num_classes: int = Field(16, ge=2)
    lambda_spatial: float = Field(0.3, gt=0.0, le=1.0)
    lambda_spectral: float = Field(0.3, gt=0.0, le=1.0)
    d_state: int = Field(16, ge=1)
    expand: int = Field(2, ge=1)
    d_conv: int = Field(4, ge=1)
    mamba_conv: bool = True
    stem_kernel: int = 3
    seed: int = Field(0, ge=0)
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(100, ge=1)
    train_ratio: float = Field(0.1, gt=0.0, lt=1.0)
    val_ratio: float = Field(0.1, gt=0.0, lt=1.0)
    split_seed: int = Field(0, ge=0)

    @field_validator("patch_size")
    @classmethod
    def _odd_patch(cls, value: int) -> int:
        if value < 3 or value % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {value}")
        return value

    @field_validator("stem_kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError(f"stem_kernel must be odd, got {value}")
        return value

    @model_validator(mode="after")
    def _ratios_leave_test_data(self) -> "SdmambaConfig":
        if self.train_ratio + self.val_ratio >= 1.0:
            raise ValueError("train_ratio + val_ratio must stay below 1")
        return self

    @property
    def num_pixels(self) -> int:
        return self.patch_size * self.patch_size

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SdmambaConfig":
        return cls.model_validate(json.loads(text))


class SampleSelections(NamedTuple):
    spatial: SparseSelection
    spectral: SparseSelection


def expected_parameter_count(config: SdmambaConfig) -> int:
    d, b, k, n_cls = config.hidden_dim, config.in_bands, config.stem_kernel, config.num_classes
    stem = d * b * k * k + d + 2 * d
    spatial = expected_block_parameters(d, config.d_state, config.expand, config.d_conv, config.mamba_conv)
    spectral = expected_block_parameters(
        config.num_pixels, config.d_state, config.expand, config.d_conv, config.mamba_conv
    )
    fusion = 3 * d * d
    head = d * n_cls + n_cls
    return stem + spatial + spectral + fusion + head


class SdmambaModel:
    def __init__(self, config: SdmambaConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, b, k = config.hidden_dim, config.in_bands, config.stem_kernel

        stem_bound = 1.0 / math.sqrt(b * k * k)
        self.stem_weight = parameter(rng.uniform(-stem_bound, stem_bound, size=(d, b, k, k)))
        self.stem_bias = parameter(rng.uniform(-stem_bound, stem_bound, size=d))
        self.bn_gamma = parameter(np.ones(d))
        self.bn_beta = parameter(np.zeros(d))
        self.bn_state = BatchNormState.fresh(d)

        block_kwargs = dict(
            d_state=config.d_state,
            expand=config.expand,
            d_conv=config.d_conv,
            use_conv=config.mamba_conv,
            rng=rng,
        )
        self.spatial_block: MambaBlockParams = init_mamba_params(d, **block_kwargs)
        self.spectral_block: MambaBlockParams = init_mamba_params(config.num_pixels, **block_kwargs)

        fusion_bound = 1.0 / math.sqrt(d)
        self.w_q = parameter(rng.uniform(-fusion_bound, fusion_bound, size=(d, d)))
        self.w_k = parameter(rng.uniform(-fusion_bound, fusion_bound, size=(d, d)))
        self.w_v = parameter(rng.uniform(-fusion_bound, fusion_bound, size=(d, d)))

        self.head_weight = parameter(rng.normal(0.0, HEAD_INIT_STD, size=(d, config.num_classes)))
        self.head_bias = parameter(np.zeros(config.num_classes))

        self.training = True
        self.forward_count = 0
        self.last_selections: List[SampleSelections] = []
        self.last_attention: Optional[np.ndarray] = None

    # ---- mode ----
    def train(self) -> "SdmambaModel":
        self.training = True
        return self

    def eval(self) -> "SdmambaModel":
        self.training = False
        return self

    # ---- parameters ----
    def named_parameters(self) -> Dict[str, Tensor]:
        named = {
            "stem.weight": self.stem_weight,
            "stem.bias": self.stem_bias,
            "stem.bn_gamma": self.bn_gamma,
            "stem.bn_beta": self.bn_beta,
        }
        for prefix, block in (("spatial_block", self.spatial_block), ("spectral_block", self.spectral_block)):
            for name, tensor in block.named_parameters().items():
                named[f"{prefix}.{name}"] = tensor
        named.update({
            "fusion.w_q": self.w_q,
            "fusion.w_k": self.w_k,
            "fusion.w_v": self.w_v,
            "head.weight": self.head_weight,
            "head.bias": self.head_bias,
        })
        return named

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {
            "stem.bn_running_mean": self.bn_state.running_mean,
            "stem.bn_running_var": self.bn_state.running_var,
        }

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and buffer, buffers under a `buffer.` prefix."""
        state = {name: t.data.copy() for name, t in self.named_parameters().items()}
        state.update({f"buffer.{name}": arr.copy() for name, arr in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | {f"buffer.{name}" for name in buffers}
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise ContractError(
                "state does not match the model layout",
                error_code="STATE_MISMATCH",
                details={"missing": missing, "unexpected": unexpected},
            )
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise DimensionError(f"shape mismatch for '{name}'", shapes=(value.shape, tensor.shape))
            tensor.data = value.astype(tensor.data.dtype, copy=True)
        self.bn_state.running_mean = np.asarray(state["buffer.stem.bn_running_mean"], dtype=np.float32).copy()
        self.bn_state.running_var = np.asarray(state["buffer.stem.bn_running_var"], dtype=np.float32).copy()

    # ---- stages ----
    def stem_forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_bands:
            raise DimensionError(
                f"stem expects B x {self.config.in_bands} x H x W input",
                shapes=(x.shape, (x.shape[0] if x.ndim else 0, self.config.in_bands)),
            )
        with counting_scope("stem"):
            y = conv2d(x, self.stem_weight, self.stem_bias, padding=self.config.stem_kernel // 2)
            y = batchnorm(y, self.bn_gamma, self.bn_beta, self.bn_state, training=self.training)
            return gelu(y)

    def spectral_seed(self, sample_index: int = 0):
        """Seed of the spectral anchor draw: fixed at evaluation, fresh per forward pass in training."""
        if self.training:
            return [self.config.seed, self.forward_count, sample_index]
        return self.config.seed

    def sdspam_forward(self, y: Tensor, selection: Optional[SparseSelection] = None) -> Tensor:
        d, h, w = y.shape
        tokens = transpose(reshape(y, (d, h * w)))
        if selection is None:
            with counting_scope("sds_spatial"):
                anchor = spatial_anchor(tokens, h, w)
                angles = angular_attention(tokens, anchor.vector)
            selection = select_sparse(angles, self.config.lambda_spatial, anchor_index=anchor.index)
        with counting_scope("spatial_mamba"):
            out = sequence_and_restore(tokens, selection, self.spatial_block)
        self._spatial_selection = selection
        return reshape(transpose(out), (d, h, w))

    def sdspem_forward(
        self,
        y: Tensor,
        selection: Optional[SparseSelection] = None,
        sample_index: int = 0,
    ) -> Tensor:
        d, h, w = y.shape
        tokens = reshape(y, (d, h * w))
        if selection is None:
            with counting_scope("sds_spectral"):
                anchor = spectral_anchor(tokens, self.spectral_seed(sample_index))
                angles = angular_attention(tokens, anchor.vector)
            selection = select_sparse(angles, self.config.lambda_spectral, anchor_index=anchor.index)
        with counting_scope("spectral_mamba"):
            out = sequence_and_restore(tokens, selection, self.spectral_block)
        self._spectral_selection = selection
        return reshape(out, (d, h, w))

    def attention_fusion(self, spa: Tensor, spe: Tensor) -> Tensor:
        if spa.shape != spe.shape or spa.ndim != 3:
            raise DimensionError("fusion operands must share a D x H x W shape", shapes=(spa.shape, spe.shape))
        d, h, w = spa.shape
        with counting_scope("fusion"):
            spatial_tokens = transpose(reshape(spa, (d, h * w)))
            spectral_tokens = transpose(reshape(spe, (d, h * w)))
            q = matmul(spatial_tokens, self.w_q)
            k = matmul(spectral_tokens, self.w_k)
            v = matmul(spectral_tokens, self.w_v)
            scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
            attn = softmax(scores, axis=1)
            self.last_attention = attn.data
            fused = matmul(attn, v)
        return reshape(transpose(fused), (d, h, w))

    def center_features(self, fused: Tensor) -> Tensor:
        """The 1 x D feature row at the patch center."""
        d, h, w = fused.shape
        tokens = transpose(reshape(fused, (d, h * w)))
        return gather_rows(tokens, [spatial_anchor_index(h, w)])

    def classify(self, fused: Tensor) -> Tensor:
        center = self.center_features(fused)
        with counting_scope("head"):
            logits = linear(center, self.head_weight, self.head_bias)
        return reshape(logits, (self.config.num_classes,))

    # ---- end to end ----
    def _fused_samples(self, batch: Tensor, selections: Optional[Sequence[SampleSelections]]):
        if self.training:
            self.forward_count += 1
        stem_out = self.stem_forward(batch)
        n, d, h, w = stem_out.shape
        if selections is not None and len(selections) != n:
            raise ContractError("one frozen selection pair is needed per sample")
        flat = reshape(stem_out, (n, d * h * w))
        self.last_selections = []
        for i in range(n):
            y = reshape(gather_rows(flat, [i]), (d, h, w))
            frozen = selections[i] if selections is not None else None
            spa = self.sdspam_forward(y, frozen.spatial if frozen else None)
            spe = self.sdspem_forward(y, frozen.spectral if frozen else None, sample_index=i)
            self.last_selections.append(SampleSelections(self._spatial_selection, self._spectral_selection))
            yield self.attention_fusion(spa, spe)

    def forward(self, batch: Tensor, selections: Optional[Sequence[SampleSelections]] = None) -> Tensor:
        """B x bands x H x W patches to B x K logits."""
        k = self.config.num_classes
        rows = [reshape(self.classify(fused), (1, k)) for fused in self._fused_samples(batch, selections)]
        return concat_rows(rows)

    def forward_features(self, batch: Tensor, selections: Optional[Sequence[SampleSelections]] = None) -> Tensor:
        """B x D fused center features, the input of the head."""
        return concat_rows([self.center_features(fused) for fused in self._fused_samples(batch, selections)])

    __call__ = forward

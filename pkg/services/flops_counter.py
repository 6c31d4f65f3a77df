# services/flops_counter.py

"""
Closed-form multiply-accumulate counts per classified sample.

Stage names match the MacCounter scopes used by the model, so analytical and
instrumented counts can be compared stage by stage. One multiply-accumulate is
reported as two FLOPs. Normalization, activations, softmax and elementwise
adds are not counted.
"""

from typing import Dict, NamedTuple, Sequence

import pandas as pd

from services.mamba_block import dt_rank_for
from services.sdmamba_model import SdmambaConfig
from services.sparse_sequencing import selected_count

DEFAULT_SWEEP_LAMBDAS = (0.05, 0.1, 0.3, 0.5, 0.7, 1.0)
STAGES = ("stem", "sds_spatial", "sds_spectral", "spatial_mamba", "spectral_mamba", "fusion", "head")


class FlopCount(NamedTuple):
    sparse_flops: int
    dense_flops: int

    @property
    def sparse_macs(self) -> int:
        return self.sparse_flops // 2

    @property
    def dense_macs(self) -> int:
        return self.dense_flops // 2


def mamba_macs_per_token(d_model: int, d_state: int, expand: int, d_conv: int, use_conv: bool) -> int:
    e = expand * d_model
    r = dt_rank_for(d_model)
    n = d_state
    macs = d_model * 2 * e               # in_proj
    if use_conv:
        macs += e * d_conv               # depthwise causal conv
    macs += e * (r + 2 * n)              # x_proj
    macs += r * e                        # dt_proj
    macs += 3 * e * n + e                # selective scan incl. D skip
    macs += e                            # gate
    macs += e * d_model                  # out_proj
    return macs


def mamba_tokens(config: SdmambaConfig, dense: bool = False) -> Dict[str, int]:
    """Sequence length fed to each Mamba block."""
    n_spatial = config.num_pixels
    n_spectral = config.hidden_dim
    if dense:
        return {"spatial_mamba": n_spatial, "spectral_mamba": n_spectral}
    return {
        "spatial_mamba": selected_count(config.lambda_spatial, n_spatial),
        "spectral_mamba": selected_count(config.lambda_spectral, n_spectral),
    }


def count_macs_by_stage(config: SdmambaConfig, dense: bool = False) -> Dict[str, int]:
    hw = config.num_pixels
    d = config.hidden_dim
    k = config.stem_kernel
    tokens = mamba_tokens(config, dense)
    block = dict(d_state=config.d_state, expand=config.expand, d_conv=config.d_conv, use_conv=config.mamba_conv)
    return {
        "stem": hw * d * config.in_bands * k * k,
        "sds_spatial": 2 * hw * d,
        "sds_spectral": 2 * d * hw,
        "spatial_mamba": tokens["spatial_mamba"] * mamba_macs_per_token(d, **block),
        "spectral_mamba": tokens["spectral_mamba"] * mamba_macs_per_token(hw, **block),
        "fusion": 3 * hw * d * d + 2 * hw * hw * d,
        "head": d * config.num_classes,
    }


def count_flops(config: SdmambaConfig) -> FlopCount:
    sparse = sum(count_macs_by_stage(config, dense=False).values())
    dense = sum(count_macs_by_stage(config, dense=True).values())
    return FlopCount(sparse_flops=2 * sparse, dense_flops=2 * dense)


def flops_sweep(config: SdmambaConfig, lambdas: Sequence[float] = DEFAULT_SWEEP_LAMBDAS) -> pd.DataFrame:
    """One row per sparsity ratio, applied to both branches."""
    rows = []
    for lam in lambdas:
        cfg = SdmambaConfig.model_validate({**config.model_dump(), "lambda_spatial": lam, "lambda_spectral": lam})
        count = count_flops(cfg)
        tokens = mamba_tokens(cfg)
        rows.append({
            "lambda": lam,
            "spatial_tokens": tokens["spatial_mamba"],
            "spectral_tokens": tokens["spectral_mamba"],
            "sparse_macs": count.sparse_macs,
            "dense_macs": count.dense_macs,
            "sparse_flops": count.sparse_flops,
            "dense_flops": count.dense_flops,
            "ratio": count.sparse_flops / count.dense_flops,
        })
    return pd.DataFrame(rows)

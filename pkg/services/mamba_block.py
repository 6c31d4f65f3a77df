# services/mamba_block.py

"""
Selective state-space block.

The block follows the usual selective SSM layout:

    in_proj -> (x, gate)
    x -> causal depthwise conv -> SiLU -> x_proj -> (dt, B, C)
    delta = softplus(dt_proj(dt))
    y = selective_scan(x, delta, B, C) * SiLU(gate)
    out_proj(y)

The scan discretizes A with zero-order hold (exp(delta * A)) and B with an
Euler step (delta * B). It is a single fused tape operation with a
hand-written reverse-time adjoint.
"""

import math
from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np

from services.autograd import (
    Tensor,
    add,
    matmul,
    mul,
    parameter,
    silu,
    slice_cols,
    softplus,
)
from services.layers import causal_depthwise_conv1d
from services.mac_counter import record_macs, record_tokens
from utils.error_handler import ContractError, DimensionError

DT_MIN = 1e-3
DT_MAX = 0.1
DT_FLOOR = 1e-4


def dt_rank_for(d_model: int) -> int:
    return int(math.ceil(d_model / 16))


@dataclass
class MambaBlockParams:
    d_model: int
    d_state: int
    d_inner: int
    dt_rank: int
    d_conv: int
    use_conv: bool
    in_proj: Tensor          # d_model x 2*d_inner
    x_proj: Tensor           # d_inner x (dt_rank + 2*d_state)
    dt_proj_weight: Tensor   # dt_rank x d_inner
    dt_proj_bias: Tensor     # d_inner
    A_log: Tensor            # d_inner x d_state
    D: Tensor                # d_inner
    out_proj: Tensor         # d_inner x d_model
    conv_weight: Optional[Tensor] = None  # d_inner x d_conv
    conv_bias: Optional[Tensor] = None    # d_inner

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                named[f.name] = value
        return named

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


@dataclass
class ScanInputs:
    u: Tensor       # L x d_inner
    delta: Tensor   # L x d_inner, strictly positive
    B_seq: Tensor   # L x d_state
    C_seq: Tensor   # L x d_state


def expected_block_parameters(d_model: int, d_state: int, expand: int, d_conv: int, use_conv: bool) -> int:
    """Closed-form parameter count of one block."""
    e = expand * d_model
    r = dt_rank_for(d_model)
    n = d_state
    conv = (e * d_conv + e) if use_conv else 0
    return d_model * 2 * e + conv + e * (r + 2 * n) + r * e + e + e * n + e + e * d_model


def init_mamba_params(
    d_model: int,
    d_state: int = 16,
    expand: int = 2,
    d_conv: int = 4,
    use_conv: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> MambaBlockParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    d_inner = expand * d_model
    dt_rank = dt_rank_for(d_model)

    def uniform(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    in_proj = uniform(d_model, (d_model, 2 * d_inner))
    conv_weight = uniform(d_conv, (d_inner, d_conv)) if use_conv else None
    conv_bias = uniform(d_conv, (d_inner,)) if use_conv else None
    x_proj = uniform(d_inner, (d_inner, dt_rank + 2 * d_state))
    dt_proj_weight = uniform(dt_rank, (dt_rank, d_inner))

    # softplus(dt_proj_bias) lands in [DT_MIN, DT_MAX], log-uniformly
    dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), size=d_inner))
    dt = np.maximum(dt, DT_FLOOR)
    dt_proj_bias = dt + np.log(-np.expm1(-dt))

    A_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
    D = np.ones(d_inner)
    out_proj = uniform(d_inner, (d_inner, d_model))

    return MambaBlockParams(
        d_model=d_model,
        d_state=d_state,
        d_inner=d_inner,
        dt_rank=dt_rank,
        d_conv=d_conv,
        use_conv=use_conv,
        in_proj=parameter(in_proj),
        x_proj=parameter(x_proj),
        dt_proj_weight=parameter(dt_proj_weight),
        dt_proj_bias=parameter(dt_proj_bias),
        A_log=parameter(A_log),
        D=parameter(D),
        out_proj=parameter(out_proj),
        conv_weight=parameter(conv_weight) if use_conv else None,
        conv_bias=parameter(conv_bias) if use_conv else None,
    )


def _discretize(A_log: np.ndarray, delta: np.ndarray, B_seq: np.ndarray, u: np.ndarray):
    A = -np.exp(A_log)
    dA = np.exp(delta[:, :, None] * A[None, :, :])
    dBu = delta[:, :, None] * B_seq[:, None, :] * u[:, :, None]
    return A, dA, dBu


def _run_recurrence(dA: np.ndarray, dBu: np.ndarray) -> np.ndarray:
    states = np.empty_like(dBu)
    h = np.zeros_like(dBu[0])
    for t in range(dBu.shape[0]):
        h = dA[t] * h + dBu[t]
        states[t] = h
    return states


def scan_hidden_states(params: MambaBlockParams, inputs: ScanInputs) -> np.ndarray:
    """All hidden states h_1..h_L as an L x d_inner x d_state array (no tape)."""
    _, dA, dBu = _discretize(params.A_log.data, inputs.delta.data, inputs.B_seq.data, inputs.u.data)
    return _run_recurrence(dA, dBu)


def selective_scan(params: MambaBlockParams, inputs: ScanInputs) -> Tensor:
    u, delta, B_seq, C_seq = inputs.u, inputs.delta, inputs.B_seq, inputs.C_seq
    A_log, D = params.A_log, params.D
    if u.ndim != 2 or u.shape[0] < 1:
        raise ContractError(f"selective_scan needs a non-empty L x d_inner input, got {list(u.shape)}")
    length, d_inner = u.shape
    d_state = A_log.shape[1]
    if delta.shape != u.shape or A_log.shape[0] != d_inner or D.shape != (d_inner,):
        raise DimensionError("scan operand extents disagree", shapes=(u.shape, delta.shape, A_log.shape, D.shape))
    if B_seq.shape != (length, d_state) or C_seq.shape != (length, d_state):
        raise DimensionError("scan B/C must be L x d_state", shapes=(B_seq.shape, C_seq.shape, (length, d_state)))
    if not np.all(delta.data > 0):
        raise ContractError("selective_scan step sizes must be strictly positive", error_code="NONPOSITIVE_DELTA")

    A, dA, dBu = _discretize(A_log.data, delta.data, B_seq.data, u.data)
    states = _run_recurrence(dA, dBu)
    out = np.einsum("len,ln->le", states, C_seq.data) + D.data * u.data
    record_macs(length * d_inner * d_state * 3 + length * d_inner)

    def _backward(g):
        g_C = np.einsum("le,len->ln", g, states)
        g_D = np.sum(g * u.data, axis=0)
        g_u = g * D.data

        # reverse-time adjoint of h_t = dA_t * h_{t-1} + dBu_t
        g_states = g[:, :, None] * C_seq.data[:, None, :]
        g_h = np.zeros_like(states)
        carry = np.zeros_like(states[0])
        for t in range(length - 1, -1, -1):
            carry = g_states[t] + carry
            g_h[t] = carry
            carry = carry * dA[t]
        prev = np.concatenate([np.zeros_like(states[:1]), states[:-1]], axis=0)
        g_dA = g_h * prev
        g_dBu = g_h

        g_delta = np.sum(g_dA * dA * A[None], axis=2)
        g_A = np.sum(g_dA * dA * delta.data[:, :, None], axis=0)
        g_delta += np.sum(g_dBu * B_seq.data[:, None, :], axis=2) * u.data
        g_B = np.einsum("len,le->ln", g_dBu, delta.data * u.data)
        g_u = g_u + np.sum(g_dBu * B_seq.data[:, None, :], axis=2) * delta.data
        g_A_log = g_A * A
        return g_A_log, g_D, g_u, g_delta, g_B, g_C

    return Tensor._from_op(out, (A_log, D, u, delta, B_seq, C_seq), _backward, "selective_scan")


def mamba_block_forward(params: MambaBlockParams, seq: Tensor) -> Tensor:
    if seq.ndim != 2 or seq.shape[1] != params.d_model:
        raise DimensionError("sequence width does not match block d_model", shapes=(seq.shape, (seq.shape[0], params.d_model)))
    length = seq.shape[0]
    if length < 1:
        raise ContractError("mamba block needs at least one token")
    e, r, n = params.d_inner, params.dt_rank, params.d_state
    record_tokens(length)

    xz = matmul(seq, params.in_proj)
    x = slice_cols(xz, 0, e)
    gate = slice_cols(xz, e, 2 * e)
    if params.use_conv:
        x = causal_depthwise_conv1d(x, params.conv_weight, params.conv_bias)
    x = silu(x)

    x_dbl = matmul(x, params.x_proj)
    dt_in = slice_cols(x_dbl, 0, r)
    B_seq = slice_cols(x_dbl, r, r + n)
    C_seq = slice_cols(x_dbl, r + n, r + 2 * n)
    delta = softplus(add(matmul(dt_in, params.dt_proj_weight), params.dt_proj_bias))

    y = selective_scan(params, ScanInputs(u=x, delta=delta, B_seq=B_seq, C_seq=C_seq))
    y = mul(y, silu(gate))
    record_macs(length * e)
    return matmul(y, params.out_proj)

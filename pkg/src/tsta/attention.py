"""Dense reference, block-sparse and soft-window attention with gradients.

All entry points take ``(B, H, S, d)`` arrays where the sequence is the
tile-major video tokens followed by ``n_text_tokens`` text tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import EmptyRowError, MaskMismatchError, ShapeError, ValidationError
from .grid import GridSpec
from .mask import BlockMask, block_starts, block_sizes, half_up, window_centers

EPS_FLOOR = 1e-12


@dataclass(frozen=True)
class AttentionInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q, k, v = (np.asarray(x) for x in (self.q, self.k, self.v))
        if q.ndim != 4:
            raise ShapeError(f"expected (B, H, S, d) inputs, got shape {q.shape}")
        if not (q.shape == k.shape == v.shape):
            raise ShapeError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
        if q.shape[-1] < 1:
            raise ShapeError("head dimension must be >= 1")
        for name, x in (("q", q), ("k", k), ("v", v)):
            if not np.all(np.isfinite(x)):
                raise ValidationError(f"{name} contains non-finite values")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def shape(self):
        return self.q.shape

    @property
    def seq_len(self) -> int:
        return self.q.shape[2]

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.q.shape[-1])


@dataclass
class AttentionOutput:
    out: np.ndarray
    row_sums: Optional[np.ndarray] = None
    lse: Optional[np.ndarray] = None

    def diagnostics(self) -> dict:
        d = {"shape": list(self.out.shape)}
        if self.row_sums is not None:
            d["row_sum_min"] = float(self.row_sums.min())
            d["row_sum_max"] = float(self.row_sums.max())
        return d


@dataclass(frozen=True)
class SoftWindowParams:
    """Continuous per-axis half-widths ``(r_t, r_h, r_w)`` and temperature."""

    half_widths: tuple[float, float, float]
    temperature: float

    def __post_init__(self):
        r = tuple(float(x) for x in np.asarray(self.half_widths, dtype=np.float64).ravel())
        if len(r) != 3 or not all(math.isfinite(x) and x >= 0 for x in r):
            raise ValidationError(f"half-widths must be three finite values >= 0, got {r}")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        object.__setattr__(self, "half_widths", r)


@dataclass
class AttentionGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dr: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Dense core, shared by the oracle, the soft path and training
# ---------------------------------------------------------------------------


def mask_to_bias(token_mask: np.ndarray, dtype=np.float64) -> np.ndarray:
    """``log M``: 0 where admitted, ``-inf`` elsewhere."""
    bias = np.zeros(token_mask.shape, dtype=dtype)
    bias[~token_mask] = -np.inf
    return bias


def attention_probs(q, k, scale, bias=None):
    """Row-stochastic attention weights ``softmax(q k^T * scale + bias)``."""
    s = q @ np.swapaxes(k, -1, -2)
    s *= scale
    if bias is not None:
        s += bias
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attention_backward_from_probs(q, k, v, probs, d_out, scale):
    """Reverse-mode gradients given cached weights.

    Returns ``(dq, dk, dv, d_logits)`` where ``d_logits`` is the gradient with
    respect to the additive bias, per batch and head.
    """
    dv = np.swapaxes(probs, -1, -2) @ d_out
    dp = d_out @ np.swapaxes(v, -1, -2)
    ds = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv, ds


def _check_token_mask(token_mask, s):
    if token_mask.shape != (s, s):
        raise ShapeError(f"token mask is {token_mask.shape}, expected {(s, s)}")
    if s and not token_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~token_mask.any(axis=1))[0])
        raise EmptyRowError(f"query row {bad} admits no key")


def dense_attention(
    inputs: AttentionInputs,
    token_mask: Optional[np.ndarray] = None,
    return_diagnostics: bool = False,
) -> AttentionOutput:
    """Literal masked softmax attention over all ``S x S`` token pairs."""
    bias = None
    if token_mask is not None:
        token_mask = np.asarray(token_mask, dtype=bool)
        _check_token_mask(token_mask, inputs.seq_len)
        bias = mask_to_bias(token_mask, inputs.q.dtype)
    scale = inputs.q.dtype.type(inputs.scale)
    if not return_diagnostics:
        # scale q (S x d) rather than the scores, normalise after P @ V
        s = (inputs.q * scale) @ np.swapaxes(inputs.k, -1, -2)
        if bias is not None:
            s += bias
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        denom = s.sum(axis=-1, keepdims=True)
        return AttentionOutput((s @ inputs.v) / denom)
    probs = attention_probs(inputs.q, inputs.k, scale, bias)
    out = probs @ inputs.v
    s = inputs.q @ np.swapaxes(inputs.k, -1, -2) * inputs.scale
    if bias is not None:
        s = s + bias
    m = s.max(axis=-1)
    lse = m + np.log(np.exp(s - m[..., None]).sum(axis=-1))
    return AttentionOutput(out, row_sums=probs.sum(axis=-1), lse=lse)


# ---------------------------------------------------------------------------
# Block-sparse path
# ---------------------------------------------------------------------------


def sparse_tile_attention(
    inputs: AttentionInputs,
    block_mask: BlockMask,
    grid: GridSpec,
    n_text_tokens: int = 0,
    backend: Optional[str] = None,
) -> AttentionOutput:
    """Attention that only visits admitted (query block, key block) pairs."""
    b, h, s, d = inputs.shape
    if s != grid.seq_len + n_text_tokens:
        raise ShapeError(
            f"sequence length {s} != {grid.seq_len} video + {n_text_tokens} text tokens"
        )
    n_blocks = grid.n_tiles + n_text_tokens
    if block_mask.bits.shape != (n_blocks, n_blocks):
        raise MaskMismatchError(
            f"mask is {block_mask.bits.shape}, expected {(n_blocks, n_blocks)}"
        )
    counts = block_mask.row_counts()
    if n_blocks and counts.min() == 0:
        raise EmptyRowError(f"query block {int(np.argmin(counts))} admits no key block")
    row_ptr, run_lo, run_hi = block_mask.runs
    starts = block_starts(grid, n_text_tokens)
    flat = [x.reshape(b * h, s, d) for x in (inputs.q, inputs.k, inputs.v)]
    out, lse = _kernels.sparse_forward(*flat, starts, row_ptr, run_lo, run_hi, inputs.scale, backend)
    return AttentionOutput(out.reshape(b, h, s, d), lse=lse.reshape(b, h, s))


# ---------------------------------------------------------------------------
# Soft (trainable) windows
# ---------------------------------------------------------------------------


@dataclass
class SoftWindowBias:
    """Additive tile-level bias ``log(prod_a g_a + eps)`` and what its gradient needs."""

    grid: GridSpec
    n_text_tokens: int
    tile_bias: np.ndarray
    _gates: list
    _dgates: list
    _prod: np.ndarray

    def token_bias(self, dtype=np.float64) -> np.ndarray:
        sizes = block_sizes(self.grid, self.n_text_tokens)
        n = self.grid.n_tiles
        full = np.zeros((n + self.n_text_tokens,) * 2, dtype=dtype)
        full[:n, :n] = self.tile_bias
        return np.repeat(np.repeat(full, sizes, axis=0), sizes, axis=1)

    def grad_half_widths(self, d_token_bias: np.ndarray) -> np.ndarray:
        """Chain a token-level bias gradient ``(S, S)`` through to ``(r_t, r_h, r_w)``."""
        g = self.grid
        sv = g.seq_len
        tpt = g.tokens_per_tile
        d_tile = d_token_bias[:sv, :sv].reshape(g.n_tiles, tpt, g.n_tiles, tpt).sum(axis=(1, 3))
        weight = d_tile / (self._prod + EPS_FLOOR)
        dr = np.empty(3)
        for a in range(3):
            mats = list(self._gates)
            mats[a] = self._dgates[a]
            dr[a] = np.sum(weight * np.kron(np.kron(mats[0], mats[1]), mats[2]))
        return dr


def soft_window_bias(grid: GridSpec, params: SoftWindowParams, n_text_tokens: int = 0) -> SoftWindowBias:
    """Sigmoid distance gates per axis.

    ``g_a = sigmoid((r_a + 1/2 - |c_a - j_a|) / tau)`` where ``c`` is the
    query's window center clamped with the rounded half-width. The half-tile
    margin makes the gate switch midway between the last admitted and first
    excluded tile, so ``tau -> 0`` at ``r = (W - 1) / 2`` reproduces the hard
    window. Clamping is piecewise constant in ``r`` and carries no gradient.
    """
    tau = params.temperature
    gates, dgates = [], []
    for extent, r in zip(grid.tile_extents, params.half_widths):
        centers = window_centers(extent, int(half_up(r)))
        dist = np.abs(centers[:, None] - np.arange(extent)[None, :])
        z = (r + 0.5 - dist) / tau
        g = expit(z)
        gates.append(g)
        dgates.append(g * expit(-z) / tau)
    prod = np.kron(np.kron(gates[0], gates[1]), gates[2])
    return SoftWindowBias(grid, n_text_tokens, np.log(prod + EPS_FLOOR), gates, dgates, prod)


def soft_window_attention(
    inputs: AttentionInputs,
    grid: GridSpec,
    params: SoftWindowParams,
    n_text_tokens: int = 0,
) -> AttentionOutput:
    if inputs.seq_len != grid.seq_len + n_text_tokens:
        raise ShapeError(
            f"sequence length {inputs.seq_len} != {grid.seq_len} video + {n_text_tokens} text tokens"
        )
    bias = soft_window_bias(grid, params, n_text_tokens).token_bias(inputs.q.dtype)
    probs = attention_probs(inputs.q, inputs.k, inputs.q.dtype.type(inputs.scale), bias)
    return AttentionOutput(probs @ inputs.v)


def attention_backward(
    inputs: AttentionInputs,
    d_out: np.ndarray,
    token_mask: Optional[np.ndarray] = None,
    soft: Optional[tuple] = None,
) -> AttentionGrads:
    """Gradients of masked (or soft-window) attention.

    Args:
        inputs: the forward inputs.
        d_out: upstream gradient, same shape as the output.
        token_mask: optional hard ``(S, S)`` mask.
        soft: optional ``(grid, SoftWindowParams, n_text_tokens)``; when given
            the half-width gradient is returned as ``dr``.
    """
    d_out = np.asarray(d_out)
    if d_out.shape != inputs.shape:
        raise ShapeError(f"upstream gradient {d_out.shape} != output {inputs.shape}")
    if token_mask is not None and soft is not None:
        raise ValidationError("pass either a hard mask or soft window params, not both")
    bias = soft_bias = None
    if token_mask is not None:
        token_mask = np.asarray(token_mask, dtype=bool)
        _check_token_mask(token_mask, inputs.seq_len)
        bias = mask_to_bias(token_mask, inputs.q.dtype)
    elif soft is not None:
        grid, params, n_text = soft
        soft_bias = soft_window_bias(grid, params, n_text)
        bias = soft_bias.token_bias(inputs.q.dtype)
    scale = inputs.q.dtype.type(inputs.scale)
    probs = attention_probs(inputs.q, inputs.k, scale, bias)
    dq, dk, dv, ds = attention_backward_from_probs(inputs.q, inputs.k, inputs.v, probs, d_out, scale)
    dr = None
    if soft_bias is not None:
        dr = soft_bias.grad_half_widths(ds.sum(axis=(0, 1)))
    return AttentionGrads(dq, dk, dv, dr)


def flop_count(
    grid: GridSpec,
    block_mask: BlockMask,
    batch: int,
    heads: int,
    head_dim: int,
    n_text_tokens: int = 0,
) -> int:
    """Multiply-add FLOPs (2 per MAC) of ``QK^T`` and ``AV`` over admitted token pairs."""
    sizes = block_sizes(grid, n_text_tokens)
    if block_mask.bits.shape != (sizes.size, sizes.size):
        raise MaskMismatchError(
            f"mask is {block_mask.bits.shape}, expected {(sizes.size, sizes.size)}"
        )
    pairs = int(sizes @ block_mask.bits.astype(np.int64) @ sizes)
    return batch * heads * pairs * 4 * head_dim

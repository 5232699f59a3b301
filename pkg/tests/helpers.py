"""Shared oracles for the test suite."""
import numpy as np

from tsta import AttentionInputs, SoftWindowParams, attention_backward, soft_window_attention
from tsta.attention import attention_probs, mask_to_bias


def rand_qkv(rng, shape, dtype=np.float64):
    return tuple(rng.standard_normal(shape).astype(dtype) for _ in range(3))


def naive_attention(q, k, v, token_mask=None):
    """Per-row loop with explicit exclusion of masked keys; independent of the library."""
    b, h, s, d = q.shape
    out = np.zeros_like(q, dtype=np.float64)
    for bi in range(b):
        for hi in range(h):
            for i in range(s):
                keys = np.arange(s) if token_mask is None else np.flatnonzero(token_mask[i])
                logits = np.array([q[bi, hi, i] @ k[bi, hi, j] for j in keys]) / np.sqrt(d)
                w = np.exp(logits - logits.max())
                w /= w.sum()
                out[bi, hi, i] = w @ v[bi, hi, keys]
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def soft_attention_fd_check(seed, grid, n_text=0, step=1e-4, r_range=(0.6, 1.4), tau=0.5):
    """Analytic vs central-difference gradients of ``sum(w * out)`` for q, k, v and r.

    Returns a dict of relative errors keyed by ``q``, ``k``, ``v``, ``r``.
    """
    rng = np.random.default_rng(seed)
    s = grid.seq_len + n_text
    shape = (1, 1, s, 4)
    q, k, v = rand_qkv(rng, shape)
    w = rng.standard_normal(shape)
    r = rng.uniform(*r_range, size=3)

    def loss(q_, k_, v_, r_):
        out = soft_window_attention(
            AttentionInputs(q_, k_, v_), grid, SoftWindowParams(r_, tau), n_text
        ).out
        return float(np.sum(w * out))

    grads = attention_backward(
        AttentionInputs(q, k, v), w, soft=(grid, SoftWindowParams(r, tau), n_text)
    )
    errs = {}
    for name, arr, g in (("q", q, grads.dq), ("k", k, grads.dk), ("v", v, grads.dv)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            hi = loss(q, k, v, r)
            arr[idx] = orig - step
            lo = loss(q, k, v, r)
            arr[idx] = orig
            num[idx] = (hi - lo) / (2 * step)
        errs[name] = rel_err(g, num)
    num_r = np.zeros(3)
    for a in range(3):
        rp, rm = r.copy(), r.copy()
        rp[a] += step
        rm[a] -= step
        num_r[a] = (loss(q, k, v, rp) - loss(q, k, v, rm)) / (2 * step)
    errs["r"] = rel_err(grads.dr, num_r)
    return errs


def masked_attention_fd_check(seed, token_mask, shape, step=1e-5):
    rng = np.random.default_rng(seed)
    q, k, v = rand_qkv(rng, shape)
    w = rng.standard_normal(shape)
    bias = mask_to_bias(token_mask)
    scale = 1.0 / np.sqrt(shape[-1])

    def loss(q_, k_, v_):
        return float(np.sum(w * (attention_probs(q_, k_, scale, bias) @ v_)))

    grads = attention_backward(AttentionInputs(q, k, v), w, token_mask=token_mask)
    errs = {}
    for name, arr, g in (("q", q, grads.dq), ("k", k, grads.dk), ("v", v, grads.dv)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            hi = loss(q, k, v)
            arr[idx] = orig - step
            lo = loss(q, k, v)
            arr[idx] = orig
            num[idx] = (hi - lo) / (2 * step)
        errs[name] = rel_err(g, num)
    return errs

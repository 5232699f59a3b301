"""Desk-scale DiT-style denoiser with sliding-tile attention, and its training loop.

Every latent grid cell is one token (no patchify). One text token carrying the
condition embedding is appended after the video tokens. Attention runs in one
of four modes:

``sparse``  block-skipping kernel with the hard window for timestep ``t``
``soft``    dense attention plus the differentiable window bias (training)
``masked``  dense attention with the expanded hard mask (oracle)
``dense``   full attention, no mask
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from .attention import (
    AttentionInputs,
    SoftWindowParams,
    attention_backward_from_probs,
    attention_probs,
    mask_to_bias,
    soft_window_bias,
    sparse_tile_attention,
)
from .diffusion import (
    ConditionEmbedding,
    NoiseSchedule,
    make_condition,
    noise_latent,
    null_condition,
)
from .errors import DivergenceError, ShapeError, ValidationError
from .grid import GridSpec
from .io import atomic_write_bytes, atomic_write_text, dump_json
from .mask import (
    WindowSchedule,
    composite_mask,
    expand_to_token_mask,
    half_up,
    make_window_schedule,
)

N_TEXT_TOKENS = 1
MODES = ("sparse", "soft", "masked", "dense")


@dataclass(frozen=True)
class DenoiserConfig:
    grid: GridSpec
    schedule: WindowSchedule
    channels: int = 4
    model_dim: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_cond: int = 16
    mlp_ratio: int = 4
    tau_start: float = 1.0
    tau_end: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "model_dim", "n_heads", "n_layers", "d_cond", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.model_dim % self.n_heads:
            raise ValidationError(
                f"model_dim={self.model_dim} is not divisible by n_heads={self.n_heads}"
            )
        if not 0 < self.tau_end <= self.tau_start:
            raise ValidationError("need 0 < tau_end <= tau_start")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def n_steps(self) -> int:
        return self.schedule.n_steps

    @property
    def latent_shape(self) -> tuple:
        return (*self.grid.shape, self.channels)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "schedule": self.schedule.to_dict(),
            "channels": self.channels,
            "model_dim": self.model_dim,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_cond": self.d_cond,
            "mlp_ratio": self.mlp_ratio,
            "tau_start": self.tau_start,
            "tau_end": self.tau_end,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        data = dict(data)
        grid = GridSpec.from_dict(data.pop("grid"))
        sched = data.pop("schedule")
        if not isinstance(sched, WindowSchedule):
            sched = WindowSchedule.from_dict(sched)
        return cls(grid=grid, schedule=sched, **data)


def desk_config(seed: int = 0, n_steps: int = 50) -> DenoiserConfig:
    """Default CPU-sized configuration: 8x16x16 tokens in 2x4x4 tiles."""
    grid = GridSpec(8, 16, 16, 2, 4, 4)
    schedule = make_window_schedule([(3, 3, 5), (3, 3, 3), (1, 3, 3)], n_steps)
    return DenoiserConfig(grid=grid, schedule=schedule, seed=seed)


def parameter_shapes(cfg: DenoiserConfig) -> dict:
    c, d, dc, hid = cfg.channels, cfg.model_dim, cfg.d_cond, cfg.model_dim * cfg.mlp_ratio
    shapes = {
        "in.W": (c, d),
        "in.b": (d,),
        "time.W": (d, d),
        "time.b": (d,),
        "cond.W": (dc, d),
        "cond.b": (d,),
        "ctx.W": (dc, d),
        "ctx.b": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.Wqkv": (d, 3 * d),
                p + "attn.bqkv": (3 * d,),
                p + "attn.Wo": (d, d),
                p + "attn.bo": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "mlp.W1": (d, hid),
                p + "mlp.b1": (hid,),
                p + "mlp.W2": (hid, d),
                p + "mlp.b2": (d,),
            }
        )
    shapes.update({"out.ln.g": (d,), "out.ln.b": (d,), "out.W": (d, c), "out.b": (c,)})
    return shapes


def parameter_count(cfg: DenoiserConfig) -> int:
    """Closed form for the network weights (half-widths excluded)."""
    c, d, dc, r = cfg.channels, cfg.model_dim, cfg.d_cond, cfg.mlp_ratio
    per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * r * d + r * d) + (r * d * d + d)
    return (c * d + d) + (d * d + d) + 2 * (dc * d + d) + cfg.n_layers * per_layer + 2 * d + d * c + c


@dataclass
class _LayerCache:
    ln1: tuple
    a: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: Optional[np.ndarray]
    o_flat: np.ndarray
    ln2: tuple
    m: np.ndarray
    gelu: tuple
    gu: np.ndarray


class Denoiser:
    """Noise predictor ``eps_theta(z_t, t, z_x)``.

    ``params`` holds the network weights; ``half_widths`` the per-segment
    trainable window half-widths ``(n_segments, 3)``.
    """

    def __init__(self, config: DenoiserConfig, params: dict, half_widths: np.ndarray):
        self.config = config
        self.params = params
        self.half_widths = np.array(half_widths, dtype=np.float64).reshape(
            config.schedule.n_segments, 3
        )
        g = config.grid
        self._pos = L.position_embedding_3d(g.shape, config.model_dim)[g.layout]

    @property
    def grid(self) -> GridSpec:
        return self.config.grid

    @property
    def schedule(self) -> WindowSchedule:
        return self.config.schedule

    def with_schedule(self, schedule: WindowSchedule) -> "Denoiser":
        """Same weights (shared, not copied) under a different window schedule."""
        if schedule.n_segments != self.schedule.n_segments:
            raise ValidationError("replacement schedule must keep the segment count")
        return Denoiser(replace(self.config, schedule=schedule), self.params, self.half_widths)

    def __call__(self, z_t, t, cond):
        return self.forward(z_t, t, cond)

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        z_t: np.ndarray,
        t: int,
        cond: ConditionEmbedding,
        mode: str = "sparse",
        tau: Optional[float] = None,
        window=None,
        backend: Optional[str] = None,
        return_cache: bool = False,
    ):
        cfg, p, g = self.config, self.params, self.config.grid
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != cfg.latent_shape:
            raise ShapeError(f"latent shape {z_t.shape} != expected {cfg.latent_shape}")
        if cond.dim != cfg.d_cond:
            raise ShapeError(f"condition dim {cond.dim} != d_cond {cfg.d_cond}")
        seg = self.schedule.segment_at(t)
        sv = g.seq_len
        s = sv + N_TEXT_TOKENS
        nh, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)

        bias = None
        soft = None
        block_mask = None
        if mode == "soft":
            tau = cfg.tau_end if tau is None else tau
            soft = soft_window_bias(g, SoftWindowParams(self.half_widths[seg], tau), N_TEXT_TOKENS)
            bias = soft.token_bias()
        elif mode in ("sparse", "masked"):
            win = self.schedule.windows[seg] if window is None else tuple(window)
            block_mask = composite_mask(g, win, N_TEXT_TOKENS)
            if mode == "masked":
                bias = mask_to_bias(expand_to_token_mask(block_mask, g, N_TEXT_TOKENS))

        x_tok = g.to_tokens(z_t)
        temb_raw = L.timestep_embedding(t, cfg.model_dim)
        temb = L.linear_forward(temb_raw, p["time.W"], p["time.b"])
        h_in = L.linear_forward(x_tok, p["in.W"], p["in.b"]) + self._pos
        txt = L.linear_forward(cond.z_x, p["cond.W"], p["cond.b"])
        # the condition also shifts every position, alongside the timestep
        ctx = L.linear_forward(cond.z_x, p["ctx.W"], p["ctx.b"])
        x = np.vstack([h_in, txt[None, :]]) + (temb + ctx)

        caches = []
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            a, ln1 = L.layernorm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            qkv = L.linear_forward(a, p[pre + "attn.Wqkv"], p[pre + "attn.bqkv"])
            q, k, v = (
                qkv[:, j * cfg.model_dim : (j + 1) * cfg.model_dim]
                .reshape(s, nh, dh)
                .transpose(1, 0, 2)[None]
                for j in range(3)
            )
            probs = None
            if mode == "sparse":
                o = sparse_tile_attention(
                    AttentionInputs(q, k, v), block_mask, g, N_TEXT_TOKENS, backend
                ).out
            else:
                probs = attention_probs(q, k, scale, bias)
                o = probs @ v
            o_flat = o[0].transpose(1, 0, 2).reshape(s, cfg.model_dim)
            x = x + L.linear_forward(o_flat, p[pre + "attn.Wo"], p[pre + "attn.bo"])
            m, ln2 = L.layernorm_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = L.linear_forward(m, p[pre + "mlp.W1"], p[pre + "mlp.b1"])
            gu, gc = L.gelu_forward(u)
            x = x + L.linear_forward(gu, p[pre + "mlp.W2"], p[pre + "mlp.b2"])
            if return_cache:
                caches.append(_LayerCache(ln1, a, q, k, v, probs, o_flat, ln2, m, gc, gu))

        xf, lnf = L.layernorm_forward(x[:sv], p["out.ln.g"], p["out.ln.b"])
        out_tok = L.linear_forward(xf, p["out.W"], p["out.b"])
        pred = g.from_tokens(out_tok)
        if not return_cache:
            return pred
        cache = {
            "mode": mode,
            "seg": seg,
            "soft": soft,
            "x_tok": x_tok,
            "temb_raw": temb_raw,
            "z_x": cond.z_x,
            "layers": caches,
            "xf": xf,
            "lnf": lnf,
        }
        return pred, cache

    # -- backward ----------------------------------------------------------

    def backward(self, cache: dict, d_pred: np.ndarray):
        """Gradients of a scalar loss given ``d loss / d pred``.

        Returns ``(grads, d_half_widths)``; ``d_half_widths`` is non-zero only
        for the segment used in soft mode.
        """
        if cache["mode"] == "sparse":
            raise ValidationError("sparse mode is inference-only; train with mode='soft'")
        cfg, p, g = self.config, self.params, self.config.grid
        sv = g.seq_len
        s = sv + N_TEXT_TOKENS
        nh, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        grads = {}

        d_tok = g.to_tokens(np.asarray(d_pred))
        dxf, grads["out.W"], grads["out.b"] = L.linear_backward(d_tok, cache["xf"], p["out.W"])
        dxv, grads["out.ln.g"], grads["out.ln.b"] = L.layernorm_backward(dxf, cache["lnf"])
        dx = np.zeros((s, cfg.model_dim))
        dx[:sv] = dxv
        d_bias = np.zeros((s, s)) if cache["soft"] is not None else None

        for i in reversed(range(cfg.n_layers)):
            pre = f"layer{i}."
            c = cache["layers"][i]
            dgu, grads[pre + "mlp.W2"], grads[pre + "mlp.b2"] = L.linear_backward(
                dx, c.gu, p[pre + "mlp.W2"]
            )
            du = L.gelu_backward(dgu, c.gelu)
            dm, grads[pre + "mlp.W1"], grads[pre + "mlp.b1"] = L.linear_backward(
                du, c.m, p[pre + "mlp.W1"]
            )
            dln2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = L.layernorm_backward(dm, c.ln2)
            dx = dx + dln2
            do_flat, grads[pre + "attn.Wo"], grads[pre + "attn.bo"] = L.linear_backward(
                dx, c.o_flat, p[pre + "attn.Wo"]
            )
            do = do_flat.reshape(s, nh, dh).transpose(1, 0, 2)[None]
            dq, dk, dv, ds = attention_backward_from_probs(c.q, c.k, c.v, c.probs, do, scale)
            if d_bias is not None:
                d_bias += ds.sum(axis=(0, 1))
            dqkv = np.concatenate(
                [d[0].transpose(1, 0, 2).reshape(s, cfg.model_dim) for d in (dq, dk, dv)], axis=1
            )
            da, grads[pre + "attn.Wqkv"], grads[pre + "attn.bqkv"] = L.linear_backward(
                dqkv, c.a, p[pre + "attn.Wqkv"]
            )
            dln1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = L.layernorm_backward(da, c.ln1)
            dx = dx + dln1

        dtemb = dx.sum(axis=0)
        grads["time.W"] = np.outer(cache["temb_raw"], dtemb)
        grads["time.b"] = dtemb
        grads["ctx.W"] = np.outer(cache["z_x"], dtemb)
        grads["ctx.b"] = dtemb
        dh_in = dx[:sv]
        grads["in.W"] = cache["x_tok"].T @ dh_in
        grads["in.b"] = dh_in.sum(axis=0)
        dtxt = dx[sv]
        grads["cond.W"] = np.outer(cache["z_x"], dtxt)
        grads["cond.b"] = dtxt

        d_hw = np.zeros_like(self.half_widths)
        if d_bias is not None:
            d_hw[cache["seg"]] = cache["soft"].grad_half_widths(d_bias)
        return grads, d_hw


def init_model(config: DenoiserConfig) -> Denoiser:
    """Seeded init: N(0, 1/fan_in) weights, unit norm gains, small output layer."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name == "out.W":
                std *= 0.1
            params[name] = rng.normal(0.0, std, size=shape)
    return Denoiser(config, params, config.schedule.half_widths_array())


def denoise_step(model: Denoiser, z_t, t, cond, mode: str = "sparse", **kwargs) -> np.ndarray:
    return model.forward(z_t, t, cond, mode=mode, **kwargs)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSample:
    z0: np.ndarray
    cond: ConditionEmbedding
    label: int
    centers: np.ndarray


def label_velocity(label: int, n_labels: int, speed: float = 1.0) -> np.ndarray:
    angle = 2.0 * math.pi * label / n_labels
    return speed * np.array([math.sin(angle), math.cos(angle)])


def label_condition(label: int, d_cond: int, seed: int) -> ConditionEmbedding:
    rng = np.random.default_rng([seed, label, 0xC0])
    return make_condition(rng.standard_normal(d_cond))


def blob_clip(grid: GridSpec, channels: int, centers: np.ndarray, sigma: float) -> np.ndarray:
    hh, ww = np.meshgrid(np.arange(grid.h_len), np.arange(grid.w_len), indexing="ij")
    d2 = (hh[None] - centers[:, 0, None, None]) ** 2 + (ww[None] - centers[:, 1, None, None]) ** 2
    blob = np.exp(-0.5 * d2 / sigma**2)
    weights = np.array([(1.0 if c % 2 == 0 else -1.0) / (1 + c // 2) for c in range(channels)])
    return (2.0 * blob - 1.0)[..., None] * weights


def make_synthetic_dataset(
    seed: int,
    n_labels: int,
    n_per_label: int,
    grid: GridSpec,
    channels: int,
    d_cond: int = 16,
    noise: float = 0.05,
    speed: float = 1.0,
) -> list[SyntheticSample]:
    """Moving Gaussian blobs; each label has its own constant velocity."""
    rng = np.random.default_rng(seed)
    sigma = max(0.75, 0.15 * min(grid.h_len, grid.w_len))
    mid = np.array([(grid.h_len - 1) / 2, (grid.w_len - 1) / 2])
    frames = np.arange(grid.t_len)[:, None]
    samples = []
    for label in range(n_labels):
        vel = label_velocity(label, n_labels, speed)
        centers = mid + (frames - (grid.t_len - 1) / 2) * vel
        clean = blob_clip(grid, channels, centers, sigma)
        cond = label_condition(label, d_cond, seed)
        for _ in range(n_per_label):
            z0 = clean + noise * rng.standard_normal(clean.shape)
            samples.append(SyntheticSample(z0, cond, label, centers.copy()))
    return samples


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def tau_at(step: int, steps: int, tau_start: float, tau_end: float) -> float:
    """Geometric anneal from ``tau_start`` at step 0 to ``tau_end`` at the last step."""
    if steps <= 1:
        return tau_end
    frac = min(step, steps - 1) / (steps - 1)
    return tau_start * (tau_end / tau_start) ** frac


@dataclass
class TrainState:
    step: int
    tau: float
    half_widths: np.ndarray
    schedule: WindowSchedule
    tile_extents: tuple
    losses: list = field(default_factory=list)
    history: list = field(default_factory=list)
    optimizer: Optional[L.Adam] = None
    hw_optimizer: Optional[L.Adam] = None


def train(
    model: Denoiser,
    dataset: list,
    schedule: NoiseSchedule,
    steps: int,
    lr: float = 1e-3,
    tau_plan: Optional[tuple] = None,
    lr_half_width: float = 1e-2,
    batch_size: int = 4,
    cond_dropout: float = 0.1,
    seed: Optional[int] = None,
    log_every: int = 10,
) -> TrainState:
    """Joint Adam updates of weights and per-segment half-widths.

    Each step draws ``batch_size`` clips with independent ``t ~ U{1..T}``
    and noise, runs the soft-window forward at the annealed temperature and
    takes one step on the mean loss. Half-widths are projected to ``>= 0``.
    """
    cfg = model.config
    if schedule.n_steps != cfg.n_steps:
        raise ValidationError(
            f"noise schedule has {schedule.n_steps} steps, window schedule {cfg.n_steps}"
        )
    if not dataset:
        raise ValidationError("dataset is empty")
    tau_start, tau_end = tau_plan if tau_plan is not None else (cfg.tau_start, cfg.tau_end)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    opt = L.Adam(lr)
    hw_opt = L.Adam(lr_half_width)
    hw_holder = {"hw": model.half_widths}
    null = null_condition(cfg.d_cond)
    state = TrainState(
        step=0,
        tau=tau_at(0, steps, tau_start, tau_end),
        half_widths=model.half_widths,
        schedule=cfg.schedule,
        tile_extents=cfg.grid.tile_extents,
        optimizer=opt,
        hw_optimizer=hw_opt,
    )
    window_losses = []
    for step in range(steps):
        tau = tau_at(step, steps, tau_start, tau_end)
        grads = {name: np.zeros_like(w) for name, w in model.params.items()}
        d_hw = np.zeros_like(model.half_widths)
        total = 0.0
        for _ in range(batch_size):
            sample = dataset[int(rng.integers(len(dataset)))]
            t = int(rng.integers(1, schedule.n_steps + 1))
            eps = rng.standard_normal(sample.z0.shape)
            cond = null if rng.random() < cond_dropout else sample.cond
            z_t = noise_latent(sample.z0, eps, schedule.alpha_bars[t - 1])
            pred, cache = model.forward(z_t, t, cond, mode="soft", tau=tau, return_cache=True)
            diff = pred - eps
            total += float(np.mean(diff * diff))
            g, dh = model.backward(cache, 2.0 * diff / (diff.size * batch_size))
            for name in grads:
                grads[name] += g[name]
            d_hw += dh
        loss = total / batch_size
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}")
        opt.step(model.params, grads)
        hw_opt.step(hw_holder, {"hw": d_hw})
        np.maximum(model.half_widths, 0.0, out=model.half_widths)

        state.step = step + 1
        state.tau = tau
        state.losses.append(loss)
        window_losses.append(loss)
        if (step + 1) % log_every == 0 or step + 1 == steps:
            state.history.append(
                {
                    "step": step + 1,
                    "loss": float(np.mean(window_losses)),
                    "tau": tau,
                    "half_widths": model.half_widths.tolist(),
                }
            )
            window_losses = []
    state.schedule = cfg.schedule.with_half_widths(model.half_widths)
    state.half_widths = model.half_widths.copy()
    return state


def _odd_cover(window: int, extent: int) -> int:
    """Clamp an odd window to the smallest odd value covering ``extent`` tiles."""
    cap = extent if extent % 2 else extent + 1
    return min(window, cap)


def freeze_schedule(state: TrainState) -> WindowSchedule:
    """Hard odd windows ``2 * round(r) + 1`` from the trained half-widths."""
    hw = np.asarray(state.half_widths).reshape(-1, 3)
    windows = []
    for row in hw:
        windows.append(
            tuple(_odd_cover(int(2 * half_up(r) + 1), e) for r, e in zip(row, state.tile_extents))
        )
    return WindowSchedule(
        state.schedule.boundaries,
        tuple(windows),
        tuple(tuple(float(x) for x in row) for row in hw),
        float(state.tau),
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "tsta-checkpoint"


def save_checkpoint(model: Denoiser, path, step: int = 0, tau: Optional[float] = None, extra=None):
    """JSON manifest at ``path`` plus raw little-endian float64 blob ``<path>.bin``."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    for name, arr in model.params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": arr.size})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": model.config.to_dict(),
        "step": int(step),
        "tau": None if tau is None else float(tau),
        "half_widths": model.half_widths.tolist(),
        "blob": blob_path.name,
        "dtype": "<f8",
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_text(path, dump_json(manifest))
    return path


def load_checkpoint(path):
    """Returns ``(model, manifest)``."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a checkpoint manifest")
    config = DenoiserConfig.from_dict(manifest["config"])
    flat = np.fromfile(path.with_name(manifest["blob"]), dtype=manifest.get("dtype", "<f8"))
    expected = parameter_shapes(config)
    params = {}
    for e in manifest["params"]:
        if tuple(e["shape"]) != expected.get(e["name"]):
            raise ValidationError(f"parameter {e['name']} has unexpected shape {e['shape']}")
        params[e["name"]] = flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
    if set(params) != set(expected):
        raise ValidationError("checkpoint parameter set does not match its config")
    return Denoiser(config, params, np.asarray(manifest["half_widths"])), manifest


def train_log_csv(state: TrainState) -> str:
    """``step, loss, tau`` then ``r_t, r_h, r_w`` for every segment."""
    n_seg = state.schedule.n_segments
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["step", "loss", "tau"]
    for s in range(n_seg):
        header += [f"r_t_{s}", f"r_h_{s}", f"r_w_{s}"]
    writer.writerow(header)
    for row in state.history:
        flat = [repr(float(x)) for seg in row["half_widths"] for x in seg]
        writer.writerow([row["step"], repr(row["loss"]), repr(row["tau"]), *flat])
    return buf.getvalue()

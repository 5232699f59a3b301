"""PSNR and windowed SSIM for frames and clips."""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def format_metric(x: float):
    """JSON-safe value: infinities become the strings ``"inf"`` / ``"-inf"``."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _frames(x):
    # (H, W) -> 1 frame; (T, H, W) -> T frames; (T, H, W, C) -> T*C planes grouped per frame
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    if x.ndim == 4:
        return np.moveaxis(x, -1, 1)
    raise ShapeError(f"expected 2-D frame or 3/4-D clip, got shape {x.shape}")


def _ssim_plane(x, y, win, c1, c2):
    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    mx = wx.mean(axis=(-1, -2))
    my = wy.mean(axis=(-1, -2))
    vx = (wx * wx).mean(axis=(-1, -2)) - mx * mx
    vy = (wy * wy).mean(axis=(-1, -2)) - my * my
    cxy = (wx * wy).mean(axis=(-1, -2)) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03, max_val: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` positions (uniform weights,
    population moments), averaged over channels, then over frames.

    The window shrinks to the frame size when frames are smaller.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    fa, fb = _frames(a), _frames(b)
    win = min(window, fa.shape[-2], fa.shape[-1])
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    per_frame = [
        np.mean([_ssim_plane(pa, pb, win, c1, c2) for pa, pb in zip(xa, xb)])
        for xa, xb in zip(fa, fb)
    ]
    return float(np.mean(per_frame))

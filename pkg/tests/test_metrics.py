import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsta import ShapeError, psnr, ssim
from tsta.metrics import format_metric


def psnr_oracle(a, b, max_val):
    total = 0.0
    flat_a, flat_b = np.ravel(a), np.ravel(b)
    for x, y in zip(flat_a, flat_b):
        total += (float(x) - float(y)) ** 2
    return 10.0 * math.log10(max_val**2 / (total / flat_a.size))


def ssim_frame_oracle(x, y, win, max_val, k1=0.01, k2=0.03):
    """Explicit double loop over window positions with population statistics."""
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            px = x[i : i + win, j : j + win].ravel()
            py = y[i : i + win, j : j + win].ravel()
            n = px.size
            mx, my = sum(px) / n, sum(py) / n
            vx = sum((a - mx) ** 2 for a in px) / n
            vy = sum((b - my) ** 2 for b in py) / n
            cxy = sum((a - mx) * (b - my) for a, b in zip(px, py)) / n
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def test_identical_inputs_give_infinite_psnr():
    a = np.random.default_rng(0).random((4, 5))
    assert psnr(a, a) == math.inf
    assert format_metric(psnr(a, a)) == "inf"
    assert format_metric(1.5) == 1.5


def test_psnr_zero_db_when_mse_equals_peak():
    a = np.zeros((3, 3))
    assert psnr(a, a + 2.0, max_val=2.0) == 0.0


@given(st.integers(0, 2**31), st.floats(0.5, 10.0))
def test_psnr_matches_oracle(seed, max_val):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 3, 4, 5)) * max_val
    assert abs(psnr(a, b, max_val) - psnr_oracle(a, b, max_val)) <= 1e-9


def test_ssim_identity_and_constants():
    a = np.random.default_rng(1).random((2, 10, 10))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c = np.full((9, 9), 0.3)
    assert ssim(c, c.copy()) == 1.0


def test_ssim_of_negated_zero_mean_frame():
    rng = np.random.default_rng(2)
    # one window covers the frame, so the zero mean holds for every window
    a = rng.standard_normal((8, 8))
    a -= a.mean()
    got = ssim(a, -a, window=8, max_val=1.0)
    assert got < 0
    assert got == pytest.approx(ssim_frame_oracle(a, -a, 8, 1.0), abs=1e-12)


@given(st.integers(0, 2**31), st.integers(3, 8))
def test_ssim_matches_brute_force_frame(seed, win):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 10, 11))
    assert abs(ssim(a, b, window=win) - ssim_frame_oracle(a, b, win, 1.0)) <= 1e-6


def test_ssim_clip_averages_channels_then_frames():
    rng = np.random.default_rng(3)
    a, b = rng.random((2, 3, 9, 9, 2))
    per_frame = [
        np.mean([ssim_frame_oracle(a[t, ..., c], b[t, ..., c], 8, 1.0) for c in range(2)]) for t in range(3)
    ]
    assert ssim(a, b) == pytest.approx(np.mean(per_frame), abs=1e-12)


def test_ssim_window_shrinks_to_frame():
    rng = np.random.default_rng(4)
    a, b = rng.random((2, 4, 6))
    assert ssim(a, b, window=8) == pytest.approx(ssim_frame_oracle(a, b, 4, 1.0), abs=1e-12)


@given(st.integers(0, 2**31))
def test_ssim_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2, 9, 9))
    assert -1.0 <= ssim(a, b, max_val=4.0) <= 1.0


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ShapeError):
        ssim(np.zeros(8), np.zeros(8))

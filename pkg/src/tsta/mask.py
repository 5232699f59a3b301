"""Timestep-scheduled sliding-tile block masks and the cross-modal extension.

Windows are measured in tiles and must be odd so they sit symmetrically around
a center tile. Near the grid boundary the center is clamped inward so every
query tile sees the same number of key tiles.

Text tokens are appended after all video tiles; each text token is its own
block of size one.
"""
from __future__ import annotations

import bisect
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

from .errors import (
    EvenWindowError,
    OutOfRangeError,
    ShapeError,
    ValidationError,
    ZeroWindowError,
)
from .grid import GridSpec

MASK_MAGIC = 0x4D545354  # b"TSTM" read as little-endian u32
MASK_VERSION = 1
_HEADER = struct.Struct("<4I")


def validate_window(window: Sequence[int]) -> tuple[int, int, int]:
    if len(window) != 3:
        raise ValidationError(f"window must have three entries, got {window!r}")
    out = []
    for w in window:
        if int(w) != w:
            raise ValidationError(f"window entries must be integers, got {window!r}")
        w = int(w)
        if w < 1:
            raise ZeroWindowError(f"window entries must be >= 1, got {window!r}")
        if w % 2 == 0:
            raise EvenWindowError(f"window entries must be odd, got {window!r}")
        out.append(w)
    return tuple(out)


def half_up(x):
    """Round half away from zero for non-negative input (``round`` is banker's)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def window_from_half_width(r: float) -> int:
    return int(2 * half_up(r) + 1)


# ---------------------------------------------------------------------------
# Window schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSchedule:
    """Piecewise-constant map from diffusion timestep to tile window.

    ``boundaries`` are cut points over the *sampling step* index
    ``u = T + 1 - t`` (step 1 is the noisiest timestep ``t = T``), so segment 0
    covers the earliest, noisiest part of sampling. Intervals are half-open
    ``[b_s, b_{s+1})``.
    """

    boundaries: tuple[int, ...]
    windows: tuple[tuple[int, int, int], ...]
    soft_half_widths: tuple[tuple[float, float, float], ...]
    temperature: float = 1.0

    def __post_init__(self):
        n = len(self.windows)
        if n < 1:
            raise ValidationError("a schedule needs at least one segment")
        if len(self.boundaries) != n + 1:
            raise ValidationError(
                f"{n} segments need {n + 1} boundaries, got {len(self.boundaries)}"
            )
        if self.boundaries[0] != 1:
            raise ValidationError("first boundary must be 1")
        if any(b1 <= b0 for b0, b1 in zip(self.boundaries, self.boundaries[1:])):
            raise ValidationError(f"boundaries must be strictly increasing: {self.boundaries}")
        for w in self.windows:
            validate_window(w)
        if len(self.soft_half_widths) != n:
            raise ValidationError("one half-width triple per segment is required")
        for r in self.soft_half_widths:
            if len(r) != 3 or not all(math.isfinite(x) and x >= 0 for x in r):
                raise ValidationError(f"half-widths must be three finite values >= 0, got {r!r}")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")

    @property
    def n_segments(self) -> int:
        return len(self.windows)

    @property
    def n_steps(self) -> int:
        return self.boundaries[-1] - 1

    def segment_at(self, t: int) -> int:
        if not 1 <= t <= self.n_steps:
            raise OutOfRangeError(f"timestep {t} outside [1, {self.n_steps}]")
        u = self.n_steps + 1 - t
        return bisect.bisect_right(self.boundaries, u) - 1

    def window_at(self, t: int) -> tuple[int, int, int]:
        return self.windows[self.segment_at(t)]

    def half_widths_array(self) -> np.ndarray:
        return np.array(self.soft_half_widths, dtype=np.float64).reshape(-1, 3)

    def with_half_widths(self, half_widths) -> "WindowSchedule":
        hw = tuple(tuple(float(x) for x in row) for row in np.asarray(half_widths).reshape(-1, 3))
        return WindowSchedule(self.boundaries, self.windows, hw, self.temperature)

    def to_dict(self) -> dict:
        return {
            "n_segments": self.n_segments,
            "n_steps": self.n_steps,
            "boundaries": list(self.boundaries),
            "windows": [list(w) for w in self.windows],
            "soft_half_widths": [list(r) for r in self.soft_half_widths],
            "temperature": self.temperature,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "WindowSchedule":
        windows = [tuple(int(x) for x in w) for w in data["windows"]]
        if "boundaries" in data:
            boundaries = tuple(int(b) for b in data["boundaries"])
        else:
            boundaries = default_boundaries(int(data["n_steps"]), len(windows))
        hw = data.get("soft_half_widths")
        if hw is None:
            hw = [[(x - 1) / 2 for x in w] for w in windows]
        sched = cls(
            boundaries,
            tuple(windows),
            tuple(tuple(float(x) for x in r) for r in hw),
            float(data.get("temperature", 1.0)),
        )
        if "n_segments" in data and int(data["n_segments"]) != sched.n_segments:
            raise ValidationError("n_segments disagrees with the window list")
        return sched

    @classmethod
    def from_json(cls, text: str) -> "WindowSchedule":
        return cls.from_dict(json.loads(text))


def default_boundaries(n_steps: int, n_segments: int) -> tuple[int, ...]:
    """Split ``[1, n_steps]`` into ``n_segments`` near-equal half-open parts."""
    if n_segments < 1 or n_steps < n_segments:
        raise ValidationError(f"cannot split {n_steps} steps into {n_segments} segments")
    return tuple(1 + (k * n_steps) // n_segments for k in range(n_segments + 1))


def make_window_schedule(
    windows,
    n_steps: int,
    boundaries=None,
    soft_half_widths=None,
    temperature: float = 1.0,
) -> WindowSchedule:
    windows = tuple(validate_window(w) for w in windows)
    if boundaries is None:
        boundaries = default_boundaries(n_steps, len(windows))
    boundaries = tuple(int(b) for b in boundaries)
    if boundaries[-1] != n_steps + 1:
        raise ValidationError(f"last boundary must be n_steps + 1 = {n_steps + 1}")
    if soft_half_widths is None:
        soft_half_widths = [[(x - 1) / 2 for x in w] for w in windows]
    hw = tuple(tuple(float(x) for x in r) for r in soft_half_widths)
    return WindowSchedule(boundaries, windows, hw, float(temperature))


def window_at(schedule: WindowSchedule, t: int) -> tuple[int, int, int]:
    return schedule.window_at(t)


# ---------------------------------------------------------------------------
# Block masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Tile-level admissibility matrix (row = query block, column = key block)."""

    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ShapeError(f"mask bits must be 2-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def n_query_blocks(self) -> int:
        return self.bits.shape[0]

    @property
    def n_key_blocks(self) -> int:
        return self.bits.shape[1]

    @property
    def density(self) -> float:
        return mask_density(self)

    def row_counts(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    @cached_property
    def runs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR list of contiguous admitted key-block runs per query block.

        Returns ``(row_ptr, run_lo, run_hi)``; row ``i`` owns runs
        ``row_ptr[i]:row_ptr[i+1]`` and each run spans key blocks
        ``[run_lo, run_hi)``.
        """
        padded = np.zeros((self.n_query_blocks, self.n_key_blocks + 2), dtype=np.int8)
        padded[:, 1:-1] = self.bits
        step = np.diff(padded, axis=1)
        r_lo, lo = np.nonzero(step == 1)
        _, hi = np.nonzero(step == -1)
        row_ptr = np.zeros(self.n_query_blocks + 1, dtype=np.int64)
        np.cumsum(np.bincount(r_lo, minlength=self.n_query_blocks), out=row_ptr[1:])
        return row_ptr, lo.astype(np.int64), hi.astype(np.int64)

    def __eq__(self, other):
        if not isinstance(other, BlockMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = object.__hash__

    def __repr__(self):
        return f"BlockMask({self.n_query_blocks}x{self.n_key_blocks}, density={self.density:.6g})"


def window_centers(extent: int, half: int) -> np.ndarray:
    """Clamped window center per query coordinate along one axis.

    When the window covers the whole axis the center is the axis midpoint.
    """
    q = np.arange(extent, dtype=np.float64)
    if 2 * half + 1 >= extent:
        return np.full(extent, (extent - 1) / 2.0)
    return np.clip(q, half, extent - 1 - half)


def axis_admissibility(extent: int, window: int) -> np.ndarray:
    """``(extent, extent)`` boolean matrix: query coordinate admits key coordinate."""
    half = (window - 1) // 2
    if window >= extent:
        return np.ones((extent, extent), dtype=bool)
    centers = window_centers(extent, half)
    keys = np.arange(extent)
    return np.abs(centers[:, None] - keys[None, :]) <= half


def build_sliding_tile_mask(grid: GridSpec, window) -> BlockMask:
    """Video-by-video tile mask for one window triple.

    Lexicographic tile order makes the 3-D admissibility the Kronecker product
    of the three per-axis matrices. Results are cached and shared.
    """
    return _sliding_tile_mask(grid, validate_window(tuple(window)))


@lru_cache(maxsize=256)
def _sliding_tile_mask(grid: GridSpec, window: tuple[int, int, int]) -> BlockMask:
    a_t, a_h, a_w = (axis_admissibility(e, w) for e, w in zip(grid.tile_extents, window))
    return BlockMask(np.kron(np.kron(a_t, a_h), a_w).astype(bool))


def expected_row_count(grid: GridSpec, window) -> int:
    return int(np.prod([min(w, e) for w, e in zip(window, grid.tile_extents)]))


def build_cross_modal_mask(video_mask: BlockMask, n_text_tokens: int) -> BlockMask:
    """Append ``n_text_tokens`` singleton text blocks.

    Video rows keep their local pattern and see every text token; text rows
    see everything.
    """
    if n_text_tokens < 0:
        raise ValidationError("n_text_tokens must be >= 0")
    if n_text_tokens == 0:
        return video_mask
    nv = video_mask.n_query_blocks
    if video_mask.n_key_blocks != nv:
        raise ShapeError("video mask must be square")
    n = nv + n_text_tokens
    bits = np.ones((n, n), dtype=bool)
    bits[:nv, :nv] = video_mask.bits
    return BlockMask(bits)


def composite_mask(grid: GridSpec, window, n_text_tokens: int = 0) -> BlockMask:
    """Cached video+text mask; at most one entry per schedule segment in practice."""
    return _composite_mask(grid, validate_window(tuple(window)), int(n_text_tokens))


@lru_cache(maxsize=256)
def _composite_mask(grid, window, n_text_tokens):
    return build_cross_modal_mask(_sliding_tile_mask(grid, window), n_text_tokens)


def mask_density(mask: BlockMask) -> float:
    total = mask.bits.size
    if total == 0:
        return 0.0
    return int(np.count_nonzero(mask.bits)) / total


def block_sizes(grid: GridSpec, n_text_tokens: int = 0) -> np.ndarray:
    return np.concatenate(
        [
            np.full(grid.n_tiles, grid.tokens_per_tile, dtype=np.int64),
            np.ones(n_text_tokens, dtype=np.int64),
        ]
    )


def block_starts(grid: GridSpec, n_text_tokens: int = 0) -> np.ndarray:
    sizes = block_sizes(grid, n_text_tokens)
    starts = np.zeros(sizes.size + 1, dtype=np.int64)
    np.cumsum(sizes, out=starts[1:])
    return starts


def _check_mask_dims(mask: BlockMask, grid: GridSpec, n_text_tokens: int):
    n = grid.n_tiles + n_text_tokens
    if mask.bits.shape != (n, n):
        raise ShapeError(
            f"mask is {mask.bits.shape}, expected {(n, n)} for {grid.n_tiles} tiles "
            f"+ {n_text_tokens} text tokens"
        )


def expand_to_token_mask(mask: BlockMask, grid: GridSpec, n_text_tokens: int = 0) -> np.ndarray:
    _check_mask_dims(mask, grid, n_text_tokens)
    sizes = block_sizes(grid, n_text_tokens)
    return np.repeat(np.repeat(mask.bits, sizes, axis=0), sizes, axis=1)


def pool_token_mask(token_mask: np.ndarray, grid: GridSpec, n_text_tokens: int = 0) -> BlockMask:
    """Any-true pooling of a token mask back to blocks."""
    starts = block_starts(grid, n_text_tokens)
    s = starts[-1]
    if token_mask.shape != (s, s):
        raise ShapeError(f"token mask is {token_mask.shape}, expected {(s, s)}")
    rows = np.logical_or.reduceat(token_mask, starts[:-1], axis=0) if s else token_mask
    pooled = np.logical_or.reduceat(rows, starts[:-1], axis=1) if s else rows
    return BlockMask(pooled)


def serialize_mask(mask: BlockMask) -> bytes:
    header = _HEADER.pack(MASK_MAGIC, MASK_VERSION, mask.n_query_blocks, mask.n_key_blocks)
    return header + np.packbits(mask.bits.ravel(), bitorder="little").tobytes()


def deserialize_mask(data: bytes) -> BlockMask:
    if len(data) < _HEADER.size:
        raise ValidationError("mask blob shorter than its header")
    magic, version, nq, nk = _HEADER.unpack_from(data)
    if magic != MASK_MAGIC:
        raise ValidationError(f"bad mask magic 0x{magic:08x}")
    if version != MASK_VERSION:
        raise ValidationError(f"unsupported mask version {version}")
    n_bits = nq * nk
    payload = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if payload.size != (n_bits + 7) // 8:
        raise ValidationError(
            f"mask payload is {payload.size} bytes, expected {(n_bits + 7) // 8}"
        )
    bits = np.unpackbits(payload, count=n_bits, bitorder="little").astype(bool)
    return BlockMask(bits.reshape(nq, nk))


def render_ascii(mask: BlockMask, max_blocks: int = 64) -> str:
    """Top-left ``max_blocks`` square of the block matrix, ``#`` admitted."""
    sub = mask.bits[:max_blocks, :max_blocks]
    return "\n".join("".join("#" if b else "." for b in row) for row in sub)

"""Latent token grid, tile partition and tile-major token layout.

Tokens are laid out tile-major: every token of tile 0 precedes every token of
tile 1. Tiles are ordered lexicographically by (tile_t, tile_h, tile_w) and
tokens inside a tile by their local (t, h, w) offset. All indices are
zero-based.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DivisibilityError, OutOfRangeError, ZeroSizeError

_INPUT_FIELDS = ("t_len", "h_len", "w_len", "t_tile", "h_tile", "w_tile")


@dataclass(frozen=True)
class GridSpec:
    t_len: int
    h_len: int
    w_len: int
    t_tile: int
    h_tile: int
    w_tile: int

    def __post_init__(self):
        for name in _INPUT_FIELDS:
            value = getattr(self, name)
            if int(value) != value:
                raise TypeError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ZeroSizeError(f"{name} must be >= 1, got {value}")
        for axis in ("t", "h", "w"):
            length = getattr(self, f"{axis}_len")
            tile = getattr(self, f"{axis}_tile")
            if length % tile:
                raise DivisibilityError(
                    f"{axis}_len={length} is not a multiple of {axis}_tile={tile}"
                )

    @property
    def nt(self) -> int:
        return self.t_len // self.t_tile

    @property
    def nh(self) -> int:
        return self.h_len // self.h_tile

    @property
    def nw(self) -> int:
        return self.w_len // self.w_tile

    @property
    def tile_extents(self) -> tuple[int, int, int]:
        return (self.nt, self.nh, self.nw)

    @property
    def tile_shape(self) -> tuple[int, int, int]:
        return (self.t_tile, self.h_tile, self.w_tile)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.t_len, self.h_len, self.w_len)

    @property
    def n_tiles(self) -> int:
        return self.nt * self.nh * self.nw

    @property
    def tokens_per_tile(self) -> int:
        return self.t_tile * self.h_tile * self.w_tile

    @property
    def seq_len(self) -> int:
        return self.n_tiles * self.tokens_per_tile

    @cached_property
    def layout(self) -> np.ndarray:
        """``layout[p]`` is the raster (C-order) index of sequence token ``p``."""
        t, h, w = np.indices(self.shape).reshape(3, -1)
        tile = ((t // self.t_tile) * self.nh + h // self.h_tile) * self.nw + w // self.w_tile
        local = ((t % self.t_tile) * self.h_tile + h % self.h_tile) * self.w_tile + w % self.w_tile
        seq = tile * self.tokens_per_tile + local
        perm = np.empty_like(seq)
        perm[seq] = np.arange(seq.size)
        perm.setflags(write=False)
        return perm

    @cached_property
    def inverse_layout(self) -> np.ndarray:
        """``inverse_layout[raster]`` is the sequence position of a raster index."""
        inv = np.empty_like(self.layout)
        inv[self.layout] = np.arange(self.layout.size)
        inv.setflags(write=False)
        return inv

    def to_tokens(self, clip: np.ndarray) -> np.ndarray:
        """Flatten a ``(t_len, h_len, w_len, C)`` clip into tile-major ``(seq_len, C)``."""
        flat = clip.reshape(self.seq_len, -1)
        return flat[self.layout]

    def from_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_tokens`."""
        return tokens[self.inverse_layout].reshape(*self.shape, -1)

    def to_dict(self) -> dict:
        return {name: int(getattr(self, name)) for name in _INPUT_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        missing = [name for name in _INPUT_FIELDS if name not in data]
        if missing:
            raise ZeroSizeError(f"grid object is missing fields {missing}")
        grid = cls(**{name: int(data[name]) for name in _INPUT_FIELDS})
        # derived fields are optional in the file but must agree when present
        for name in ("nt", "nh", "nw", "n_tiles", "tokens_per_tile", "seq_len"):
            if name in data and int(data[name]) != getattr(grid, name):
                raise DivisibilityError(
                    f"stored {name}={data[name]} disagrees with recomputed {getattr(grid, name)}"
                )
        return grid

    @classmethod
    def from_json(cls, text: str) -> "GridSpec":
        return cls.from_dict(json.loads(text))


def make_grid(t_len, h_len, w_len, t_tile, h_tile, w_tile) -> GridSpec:
    return GridSpec(t_len, h_len, w_len, t_tile, h_tile, w_tile)


def _check(value, bound, what):
    if not 0 <= value < bound:
        raise OutOfRangeError(f"{what}={value} outside [0, {bound})")


def tile_idx(grid: GridSpec, p: int) -> int:
    """Tile containing sequence token ``p``."""
    _check(p, grid.seq_len, "token index")
    return p // grid.tokens_per_tile


def tile_coord(grid: GridSpec, i: int) -> tuple[int, int, int]:
    _check(i, grid.n_tiles, "tile index")
    i_t, rest = divmod(i, grid.nh * grid.nw)
    i_h, i_w = divmod(rest, grid.nw)
    return (i_t, i_h, i_w)


def coord_to_tile(grid: GridSpec, tile_t: int, tile_h: int, tile_w: int) -> int:
    _check(tile_t, grid.nt, "tile_t")
    _check(tile_h, grid.nh, "tile_h")
    _check(tile_w, grid.nw, "tile_w")
    return (tile_t * grid.nh + tile_h) * grid.nw + tile_w


def token_to_coord(grid: GridSpec, p: int) -> tuple[int, int, int]:
    """Absolute ``(t, h, w)`` grid coordinates of sequence token ``p``."""
    _check(p, grid.seq_len, "token index")
    i, local = divmod(p, grid.tokens_per_tile)
    i_t, i_h, i_w = tile_coord(grid, i)
    l_t, rest = divmod(local, grid.h_tile * grid.w_tile)
    l_h, l_w = divmod(rest, grid.w_tile)
    return (i_t * grid.t_tile + l_t, i_h * grid.h_tile + l_h, i_w * grid.w_tile + l_w)


def coord_to_token(grid: GridSpec, t: int, h: int, w: int) -> int:
    _check(t, grid.t_len, "t")
    _check(h, grid.h_len, "h")
    _check(w, grid.w_len, "w")
    i = coord_to_tile(grid, t // grid.t_tile, h // grid.h_tile, w // grid.w_tile)
    local = ((t % grid.t_tile) * grid.h_tile + h % grid.h_tile) * grid.w_tile + w % grid.w_tile
    return i * grid.tokens_per_tile + local

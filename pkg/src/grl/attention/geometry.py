"""Stripe and window geometry: partitioning a feature map into token groups.

A partition is fully described by a :class:`Plan` of integer index arrays,
so the batched model path and the list-of-groups path share one source of
truth. Maps are reflect-padded at the bottom/right up to a multiple of the
group extent, cyclically rolled by the shift, then cut into groups.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..tensor import Tensor
from ..tensor.core import DimensionError


@dataclass(frozen=True)
class StripeSpec:
    direction: str = "horizontal"
    width: int = 4
    shift: int = 0

    def __post_init__(self):
        if self.direction not in ("horizontal", "vertical"):
            raise ValueError(f"stripe direction must be horizontal or vertical, got {self.direction!r}")
        if self.width < 1:
            raise ValueError("stripe width must be >= 1")
        if not 0 <= self.shift < self.width:
            raise ValueError(f"stripe shift must lie in [0, {self.width}), got {self.shift}")

    def shifted(self, shift):
        return dataclasses.replace(self, shift=shift)


@dataclass(frozen=True)
class WindowSpec:
    size: int = 8
    shift: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("window size must be >= 1")
        if not 0 <= self.shift < self.size:
            raise ValueError(f"window shift must lie in [0, {self.size}), got {self.shift}")


@dataclass
class TokenGroup:
    """Tokens of one stripe/window.

    ``index_map[t]`` is the flat position (in the padded, unrolled grid of
    extent ``padded_shape``) that token ``t`` was read from.
    """

    tokens: np.ndarray
    index_map: np.ndarray
    padded_shape: tuple
    group_shape: tuple = None


@dataclass(frozen=True)
class Plan:
    h: int
    w: int
    hp: int
    wp: int
    roll: tuple  # (dy, dx)
    group_shape: tuple  # (gh, gw)
    index_map: np.ndarray  # (G, n) padded-grid positions
    gather_idx: np.ndarray  # (G, n) original-map positions (reflect folded)
    merge_idx: np.ndarray  # (h*w,) flat token positions in the (G*n) stack
    labels: np.ndarray  # (G, n) roll-wrap region labels

    @property
    def n_groups(self):
        return self.index_map.shape[0]

    @property
    def group_size(self):
        return self.index_map.shape[1]


def _round_up(n, m):
    return -(-n // m) * m


@lru_cache(maxsize=512)
def make_plan(h, w, geom, long_multiple=1):
    """Index plan for partitioning an ``h x w`` map with ``geom``.

    ``long_multiple`` additionally pads a stripe's long axis (so anchor
    pooling divides it); it is ignored for windows.
    """
    if h < 1 or w < 1:
        raise DimensionError(f"empty map {h}x{w}")
    if isinstance(geom, WindowSpec):
        gh = gw = geom.size
        hp, wp = _round_up(h, gh), _round_up(w, gw)
        dy = dx = geom.shift
    elif isinstance(geom, StripeSpec):
        if geom.direction == "horizontal":
            hp, wp = _round_up(h, geom.width), _round_up(w, long_multiple)
            gh, gw = geom.width, wp
            dy, dx = geom.shift, 0
        else:
            hp, wp = _round_up(h, long_multiple), _round_up(w, geom.width)
            gh, gw = hp, geom.width
            dy, dx = 0, geom.shift
    else:
        raise TypeError(f"unknown geometry {geom!r}")

    src = np.pad(np.arange(h * w).reshape(h, w), ((0, hp - h), (0, wp - w)), mode="reflect")
    rows = (np.arange(hp)[:, None] + dy) % hp
    cols = (np.arange(wp)[None, :] + dx) % wp
    padded_pos = rows * wp + cols  # rolled grid -> padded grid position
    row_wrap = np.arange(hp)[:, None] >= hp - dy if dy else np.zeros((hp, 1), bool)
    col_wrap = np.arange(wp)[None, :] >= wp - dx if dx else np.zeros((1, wp), bool)
    label = (2 * row_wrap + col_wrap).astype(np.int64) * np.ones((hp, wp), np.int64)

    def cut(a):
        return a.reshape(hp // gh, gh, wp // gw, gw).transpose(0, 2, 1, 3).reshape(-1, gh * gw)

    index_map = cut(padded_pos)
    gather_idx = src.reshape(-1)[index_map]
    inv = np.empty(hp * wp, dtype=np.int64)
    inv[index_map.reshape(-1)] = np.arange(hp * wp)
    orig = (np.arange(h)[:, None] * wp + np.arange(w)[None, :]).reshape(-1)
    merge_idx = inv[orig]
    for a in (index_map, gather_idx, merge_idx):
        a.setflags(write=False)
    return Plan(h, w, hp, wp, (dy, dx), (gh, gw), index_map, gather_idx, merge_idx, cut(label))


def partition(fmap, geom, long_multiple=1):
    """Split a ``c x h x w`` map into :class:`TokenGroup` s of ``N_g x c`` tokens."""
    x = np.asarray(fmap.data if isinstance(fmap, Tensor) else fmap)
    if x.ndim != 3:
        raise DimensionError(f"partition expects c x h x w, got {x.shape}")
    c, h, w = x.shape
    plan = make_plan(h, w, geom, long_multiple)
    flat = x.reshape(c, h * w)
    return [
        TokenGroup(flat[:, gi].T.copy(), im.copy(), (plan.hp, plan.wp), plan.group_shape)
        for gi, im in zip(plan.gather_idx, plan.index_map)
    ]


def merge(groups, original_shape):
    """Inverse of :func:`partition`: reassemble, undo the roll, crop the padding."""
    c, h, w = original_shape
    hp, wp = groups[0].padded_shape
    grid = np.zeros((hp * wp, c), dtype=groups[0].tokens.dtype)
    hits = np.zeros(hp * wp, dtype=np.int64)
    for g in groups:
        if g.padded_shape != (hp, wp) or g.tokens.shape != (len(g.index_map), c):
            raise DimensionError("token groups do not come from one partition")
        grid[g.index_map] = g.tokens
        np.add.at(hits, g.index_map, 1)
    if not (hits == 1).all():
        raise RuntimeError("token groups overlap or leave gaps; not a partition")
    return grid.T.reshape(c, hp, wp)[:, :h, :w].copy()


def shift_mask(plan, dtype=np.float64, value=-1e4):
    """Additive ``(G, n, n)`` logit mask separating tokens from different roll regions."""
    lab = plan.labels
    return np.where(lab[:, :, None] != lab[:, None, :], value, 0.0).astype(dtype)


@lru_cache(maxsize=64)
def relative_position_index(size):
    """``(n, n)`` index into a ``(2*size-1)**2`` relative-offset bias table."""
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])
    rel = coords[:, :, None] - coords[:, None, :] + (size - 1)
    idx = rel[0] * (2 * size - 1) + rel[1]
    idx.setflags(write=False)
    return idx

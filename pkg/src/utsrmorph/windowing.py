"""3D window geometry: plain, cyclically shifted and overlapping partitions,
plus relative-position-bias index maps for both attention flavours.

Feature maps are channels-last ``(X, Y, Z, C)`` tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, apply_op

_AXES = "XYZ"


def _triple(v) -> Tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 extents, got {v}")
    return v


@dataclass(frozen=True)
class WindowSpec:
    """Query window ``size`` and overlap factor ``epsilon``.

    The key/value window is ``round((1 + epsilon) * size)`` per axis, with the
    surplus split evenly around the query window (extra voxel on the high side).
    """

    size: Tuple[int, int, int] = (4, 4, 4)
    epsilon: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "size", _triple(self.size))
        if self.epsilon < 0:
            raise ValueError("overlap factor must be >= 0")

    @property
    def overlap_size(self) -> Tuple[int, int, int]:
        return tuple(int(math.floor((1 + self.epsilon) * p + 0.5)) for p in self.size)

    @property
    def padding(self):
        """``((lo, hi), ...)`` zero padding applied before the overlapping unfold."""
        pads = []
        for p, po in zip(self.size, self.overlap_size):
            lo = (po - p) // 2
            pads.append((lo, po - p - lo))
        return tuple(pads)


def _check_divisible(shape, P):
    for axis, (n, p) in enumerate(zip(shape, P)):
        if n % p:
            raise ShapeError(f"axis {_AXES[axis]}: extent {n} is not divisible by window {p}")


def window_partition(x: Tensor, size) -> Tensor:
    """``(X, Y, Z, C)`` -> ``(numWin, Px*Py*Pz, C)``; windows in raster order."""
    P = _triple(size)
    X, Y, Z, C = x.shape
    _check_divisible((X, Y, Z), P)
    nx, ny, nz = X // P[0], Y // P[1], Z // P[2]
    t = T.reshape(x, (nx, P[0], ny, P[1], nz, P[2], C))
    t = T.permute(t, (0, 2, 4, 1, 3, 5, 6))
    return T.reshape(t, (nx * ny * nz, P[0] * P[1] * P[2], C))


def window_reverse(windows: Tensor, size, dims) -> Tensor:
    """Inverse of :func:`window_partition` for a grid of extents ``dims``."""
    P = _triple(size)
    X, Y, Z = dims
    _check_divisible((X, Y, Z), P)
    C = windows.shape[-1]
    nx, ny, nz = X // P[0], Y // P[1], Z // P[2]
    t = T.reshape(windows, (nx, ny, nz, P[0], P[1], P[2], C))
    t = T.permute(t, (0, 3, 1, 4, 2, 5, 6))
    return T.reshape(t, (X, Y, Z, C))


def cyclic_shift(x: Tensor, shift, inverse: bool = False) -> Tensor:
    """Toroidal roll by ``-shift`` (or ``+shift`` to undo) over the spatial axes."""
    s = _triple(shift)
    sign = 1 if inverse else -1
    return T.roll(x, tuple(sign * v for v in s), (0, 1, 2))


def overlapping_partition(x: Tensor, spec: WindowSpec) -> Tensor:
    """Zero-pad, then unfold ``Po``-sized windows at stride ``P``.

    Returns ``(numWin, Pox*Poy*Poz, C)`` with the same window count and order
    as :func:`window_partition`; window ``w`` is centred on query window ``w``.
    """
    P, Po = spec.size, spec.overlap_size
    X, Y, Z, C = x.shape
    _check_divisible((X, Y, Z), P)
    pads = spec.padding
    xp = np.pad(x.data, (pads[0], pads[1], pads[2], (0, 0)))
    nx, ny, nz = X // P[0], Y // P[1], Z // P[2]
    view = np.lib.stride_tricks.sliding_window_view(xp, Po, axis=(0, 1, 2))
    view = view[::P[0], ::P[1], ::P[2]][:nx, :ny, :nz]
    out = np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 6, 3)).reshape(nx * ny * nz, -1, C)

    def back(g):
        gxp = np.zeros_like(xp)
        g = g.reshape(nx, ny, nz, Po[0], Po[1], Po[2], C)
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    gxp[i * P[0]:i * P[0] + Po[0], j * P[1]:j * P[1] + Po[1],
                        k * P[2]:k * P[2] + Po[2]] += g[i, j, k]
        gx = gxp[pads[0][0]:pads[0][0] + X, pads[1][0]:pads[1][0] + Y, pads[2][0]:pads[2][0] + Z]
        return (np.ascontiguousarray(gx),)

    return apply_op(out, (x,), back)


# ------------------------------------------------------------------ bias tables

def table_extent(size, overlap_size=None) -> Tuple[int, int, int]:
    """Bias-table extents: ``P + Po - 1`` per axis (``2P - 1`` when not overlapping)."""
    P = _triple(size)
    Po = P if overlap_size is None else _triple(overlap_size)
    return tuple(p + po - 1 for p, po in zip(P, Po))


def relative_position_index(size, overlap_size=None) -> np.ndarray:
    """Integer map ``(Nq, Nk)`` from (query, key) token pairs into the flattened table.

    Per axis the offset ``q - k + Po - 1`` spans ``0 .. P + Po - 2``; keys are
    indexed in their own (possibly larger) window, which shares its centre
    with the query window.
    """
    P = _triple(size)
    Po = P if overlap_size is None else _triple(overlap_size)
    ext = table_extent(P, Po)
    q = np.stack(np.meshgrid(*[np.arange(p) for p in P], indexing="ij"), -1).reshape(-1, 3)
    k = np.stack(np.meshgrid(*[np.arange(p) for p in Po], indexing="ij"), -1).reshape(-1, 3)
    rel = q[:, None, :] - k[None, :, :] + (np.asarray(Po) - 1)
    return (rel[..., 0] * ext[1] + rel[..., 1]) * ext[2] + rel[..., 2]


@dataclass
class RelPosBiasTable:
    """Learnable table (``(T,)`` or ``(T, heads)``) plus its index map."""

    table: Tensor
    index: np.ndarray

    @classmethod
    def create(cls, size, overlap_size=None, heads=None, rng=None, std=0.02):
        n = int(np.prod(table_extent(size, overlap_size)))
        shape = (n,) if heads is None else (n, heads)
        values = np.zeros(shape) if rng is None else _trunc_normal(rng, shape, std)
        return cls(Tensor(values, requires_grad=True), relative_position_index(size, overlap_size))


def build_bias(table, index: np.ndarray) -> Tensor:
    """Gather the bias matrix: ``(Nq, Nk)`` for a 1-d table, ``(heads, Nq, Nk)`` otherwise."""
    if isinstance(table, RelPosBiasTable):
        table, index = table.table, table.index
    if index.min() < 0 or index.max() >= table.shape[0]:
        raise IndexError(f"bias index map out of range for table of {table.shape[0]} entries")
    gathered = T.take(table, index, axis=0)
    if table.ndim == 1:
        return gathered
    return T.permute(gathered, (2, 0, 1))


def shift_attention_mask(dims, size, shift, masked_value: float = -100.0) -> np.ndarray:
    """Additive ``(numWin, N, N)`` mask separating regions that wrapped across the seam."""
    P, s = _triple(size), _triple(shift)
    regions = np.zeros(tuple(dims), dtype=np.float64)
    label = 0
    slices = [((slice(0, -p), slice(-p, -sh), slice(-sh, None)) if sh else (slice(None),))
              for p, sh in zip(P, s)]
    for a in slices[0]:
        for b in slices[1]:
            for c in slices[2]:
                regions[a, b, c] = label
                label += 1
    win = window_partition(Tensor(regions[..., None]), P).data[..., 0]
    diff = win[:, None, :] != win[:, :, None]
    return np.where(diff, masked_value, 0.0).astype(T.get_dtype())


def _trunc_normal(rng, shape, std):
    v = rng.standard_normal(shape)
    while True:
        bad = np.abs(v) > 2
        if not bad.any():
            return v * std
        v[bad] = rng.standard_normal(int(bad.sum()))

"""Spatial transformation ``m o phi`` with ``phi(p) = p + u(p)``.

Sampling clamps coordinates to the volume border. At exact lattice points the
left cell is used, which keeps gradients deterministic.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from . import tensor as T
from .tensor import ShapeError, Tensor, apply_op
from .volume_io import DisplacementField, LabelMask


def warp_trilinear(moving, field) -> Tensor:
    """Trilinear pull-back of ``(X, Y, Z)`` or ``(X, Y, Z, C)`` data; differentiable in both."""
    moving, field = T.as_tensor(moving), T.as_tensor(field)
    squeeze = moving.ndim == 3
    img = moving.data[..., None] if squeeze else moving.data
    if field.shape != img.shape[:3] + (3,):
        raise ShapeError(f"field {field.shape} does not match moving grid {img.shape[:3]}")
    img = np.ascontiguousarray(img)
    disp = np.ascontiguousarray(field.data, dtype=img.dtype)
    out = np.empty_like(img)
    _kernels.trilinear_forward(img, disp, out)

    def back(g):
        g = np.ascontiguousarray(g.reshape(img.shape))
        gimg = np.zeros_like(img)
        gdisp = np.zeros_like(disp)
        _kernels.trilinear_backward(img, disp, g, gimg, gdisp, moving.requires_grad, field.requires_grad)
        return (gimg.reshape(moving.shape) if moving.requires_grad else None,
                gdisp if field.requires_grad else None)

    return apply_op(out[..., 0] if squeeze else out, (moving, field), back)


def sample_points(values: np.ndarray, points_voxel: np.ndarray) -> np.ndarray:
    """Trilinear (clamped) sample of a ``(X, Y, Z[, C])`` array at ``(n, 3)`` voxel points."""
    arr = values[..., None] if values.ndim == 3 else values
    dims = np.asarray(arr.shape[:3])
    pts = np.clip(np.asarray(points_voxel, dtype=np.float64), 0, dims - 1)
    lo = np.clip(np.floor(pts).astype(int), 0, np.maximum(dims - 2, 0))
    hi = np.minimum(lo + 1, dims - 1)
    f = pts - lo
    out = np.zeros((len(pts), arr.shape[3]))
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = ((f[:, 0] if cx else 1 - f[:, 0]) * (f[:, 1] if cy else 1 - f[:, 1])
                     * (f[:, 2] if cz else 1 - f[:, 2]))
                ix = hi[:, 0] if cx else lo[:, 0]
                iy = hi[:, 1] if cy else lo[:, 1]
                iz = hi[:, 2] if cz else lo[:, 2]
                out += w[:, None] * arr[ix, iy, iz]
    return out[:, 0] if values.ndim == 3 else out


def warp_labels(mask, field) -> np.ndarray:
    """Nearest-neighbour pull-back of an integer label grid (evaluation path)."""
    labels = mask.values if isinstance(mask, LabelMask) else np.asarray(mask)
    u = field.values if isinstance(field, DisplacementField) else np.asarray(getattr(field, "data", field))
    if u.shape != labels.shape + (3,):
        raise ShapeError(f"field {u.shape} does not match mask {labels.shape}")
    grid = np.meshgrid(*[np.arange(n) for n in labels.shape], indexing="ij")
    idx = []
    for axis, n in enumerate(labels.shape):
        q = grid[axis] + u[..., axis].astype(np.float64)
        idx.append(np.clip(np.floor(q + 0.5).astype(np.intp), 0, n - 1))
    out = labels[idx[0], idx[1], idx[2]]
    if isinstance(mask, LabelMask):
        return LabelMask(out, mask.spacing, mask.num_labels)
    return out


def warp_onehot(onehot, field) -> Tensor:
    """Differentiable (training) label warp: trilinear on a ``(X, Y, Z, K)`` one-hot stack."""
    return warp_trilinear(onehot, field)

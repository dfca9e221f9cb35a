"""Training objectives: LNCC, Parzen-window MI, diffusion regularizer, soft Dice.

All terms are built from engine ops, so gradients come from the autodiff graph.
Similarity losses return negated similarities (lower is better).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .warp import warp_trilinear


@dataclass
class LossConfig:
    sim_kind: str = "lncc"  # or "mi"
    lam: float = 1.0
    gamma: float = 1.0
    use_seg: bool = False
    lncc_cube: int = 9
    mi_bins: int = 32
    mi_sigma: Optional[float] = None  # defaults to one bin width

    def __post_init__(self):
        if self.sim_kind not in ("lncc", "mi"):
            raise ValueError(f"sim_kind must be 'lncc' or 'mi', got {self.sim_kind!r}")
        if self.lncc_cube < 3 or self.lncc_cube % 2 == 0:
            raise ValueError(f"lncc_cube must be odd and >= 3, got {self.lncc_cube}")
        if self.mi_bins < 8:
            raise ValueError(f"mi_bins must be >= 8, got {self.mi_bins}")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def lncc_loss(fixed, warped, cube: int = 9, eps: float = 1e-5) -> Tensor:
    """Negative mean squared local correlation over cubes centred at every voxel.

    Cubes are cropped at the border; each uses its own voxel count for the means.
    """
    f, w = T.as_tensor(fixed), T.as_tensor(warped)
    _same_shape(f, w, "lncc")
    if cube < 3 or cube % 2 == 0:
        raise ValueError(f"cube length must be odd and >= 3, got {cube}")
    r = cube // 2
    n = T.box_count(f.shape, r)
    inv_n = Tensor(1.0 / n)
    sf, sw = T.box_sum(f, r), T.box_sum(w, r)
    sff = T.box_sum(T.mul(f, f), r)
    sww = T.box_sum(T.mul(w, w), r)
    sfw = T.box_sum(T.mul(f, w), r)
    cross = T.sub(sfw, T.mul(T.mul(sf, sw), inv_n))
    var_f = T.sub(sff, T.mul(T.mul(sf, sf), inv_n))
    var_w = T.sub(sww, T.mul(T.mul(sw, sw), inv_n))
    cc = T.div(T.mul(cross, cross), T.add(T.mul(var_f, var_w), eps))
    return T.mul(T.reduce_mean(cc), -1.0)


def lncc_bruteforce(fixed: np.ndarray, warped: np.ndarray, cube: int = 9, eps: float = 1e-5) -> float:
    """Reference LNCC: explicit loop over every voxel's cropped cube (float64)."""
    f = np.asarray(fixed, dtype=np.float64)
    w = np.asarray(warped, dtype=np.float64)
    r = cube // 2
    X, Y, Z = f.shape
    total = 0.0
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                sl = (slice(max(0, x - r), x + r + 1), slice(max(0, y - r), y + r + 1),
                      slice(max(0, z - r), z + r + 1))
                a = f[sl] - f[sl].mean()
                b = w[sl] - w[sl].mean()
                total += (a * b).sum() ** 2 / ((a * a).sum() * (b * b).sum() + eps)
    return -total / f.size


def _normalize01(x: Tensor) -> Tensor:
    lo, hi = T.reduce_min(x), T.reduce_max(x)
    if hi.item() <= lo.item():
        return T.sub(x, lo)
    shifted = T.sub(x, T.broadcast_to(lo, x.shape))
    return T.div(shifted, T.broadcast_to(T.sub(hi, lo), x.shape))


def parzen_weights(x: Tensor, bins: int, sigma: float) -> Tensor:
    """``(N, bins)`` Gaussian kernel responses, normalized per sample."""
    centers = np.linspace(0.0, 1.0, bins)
    flat = T.reshape(x, (x.size, 1))
    diff = T.sub(T.broadcast_to(flat, (x.size, bins)), Tensor(np.broadcast_to(centers, (x.size, bins))))
    k = T.exp(T.mul(T.mul(diff, diff), -0.5 / sigma ** 2))
    norm = T.broadcast_to(T.reduce_sum(k, axis=1, keepdims=True), (x.size, bins))
    return T.div(k, norm)


def mutual_information(fixed, warped, bins: int = 32, sigma: Optional[float] = None,
                       eps: float = 1e-10) -> Tensor:
    """Parzen-window MI of two volumes, each min-max normalized to [0, 1]."""
    f, w = T.as_tensor(fixed), T.as_tensor(warped)
    _same_shape(f, w, "mutual information")
    if sigma is None:
        sigma = 1.0 / (bins - 1)
    wf = parzen_weights(_normalize01(f), bins, sigma)
    ww = parzen_weights(_normalize01(w), bins, sigma)
    n = f.size
    joint = T.mul(T.matmul(T.permute(wf, (1, 0)), ww), 1.0 / n)
    pf = T.reduce_sum(joint, axis=1, keepdims=True)
    pw = T.reduce_sum(joint, axis=0, keepdims=True)
    outer = T.matmul(pf, pw)
    ratio = T.div(T.add(joint, eps), T.add(outer, eps))
    return T.reduce_sum(T.mul(joint, T.log(ratio)))


def mi_loss(fixed, warped, bins: int = 32, sigma: Optional[float] = None) -> Tensor:
    return T.mul(mutual_information(fixed, warped, bins, sigma), -1.0)


def diffusion_loss(field) -> Tensor:
    """Mean over the 3 axes of the mean squared forward difference (all channels)."""
    u = T.as_tensor(field)
    terms = []
    for axis in range(3):
        n = u.shape[axis]
        if n < 2:
            continue
        hi = [slice(None)] * u.ndim
        lo = [slice(None)] * u.ndim
        hi[axis], lo[axis] = slice(1, n), slice(0, n - 1)
        d = T.sub(T.getitem(u, tuple(hi)), T.getitem(u, tuple(lo)))
        terms.append(T.reduce_mean(T.mul(d, d)))
    if not terms:
        return T.mul(T.reduce_sum(u), 0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / 3.0)


def dice_seg_loss(fixed_onehot, warped_onehot, eps: float = 1e-5) -> Tensor:
    """``1 - mean_k 2 sum(f_k w_k) / (sum f_k^2 + sum w_k^2)`` over ``(X, Y, Z, K)`` stacks."""
    f, w = T.as_tensor(fixed_onehot), T.as_tensor(warped_onehot)
    _same_shape(f, w, "dice loss")
    if f.ndim != 4 or f.shape[-1] < 1:
        raise ValueError("dice loss needs at least one foreground class in a (X, Y, Z, K) stack")
    K = f.shape[-1]
    axes = (0, 1, 2)
    inter = T.reduce_sum(T.mul(f, w), axis=axes)
    denom = T.add(T.add(T.reduce_sum(T.mul(f, f), axis=axes), T.reduce_sum(T.mul(w, w), axis=axes)), eps)
    return T.sub(1.0, T.mul(T.reduce_sum(T.div(T.mul(inter, 2.0), denom)), 1.0 / K))


def similarity(fixed, warped, cfg: LossConfig) -> Tensor:
    if cfg.sim_kind == "lncc":
        return lncc_loss(fixed, warped, cfg.lncc_cube)
    return mi_loss(fixed, warped, cfg.mi_bins, cfg.mi_sigma)


def total_loss(fixed, moving, field, cfg: LossConfig, fixed_onehot=None, moving_onehot=None):
    """Weighted objective; returns ``(total, parts)`` with ``parts`` holding each term."""
    if cfg.use_seg and (fixed_onehot is None or moving_onehot is None):
        raise ValueError("segmentation loss enabled but masks were not provided")
    fixed, moving, field = T.as_tensor(fixed), T.as_tensor(moving), T.as_tensor(field)
    warped = warp_trilinear(moving, field)
    sim = similarity(fixed, warped, cfg)
    smooth = diffusion_loss(field)
    total = T.add(sim, T.mul(smooth, cfg.lam))
    parts = {"sim": sim, "smooth": smooth}
    if cfg.use_seg:
        seg = dice_seg_loss(fixed_onehot, warp_trilinear(moving_onehot, field))
        total = T.add(total, T.mul(seg, cfg.gamma))
        parts["seg"] = seg
    return total, parts

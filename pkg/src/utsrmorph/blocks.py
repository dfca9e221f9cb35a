"""Attention building blocks.

Blocks are functional: each ``init_*`` returns a flat ``{name: Tensor}`` dict
and the matching ``*_forward`` reads its parameters from such a dict. The
network composes them under dotted prefixes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .windowing import (
    WindowSpec,
    build_bias,
    cyclic_shift,
    overlapping_partition,
    relative_position_index,
    shift_attention_mask,
    table_extent,
    window_partition,
    window_reverse,
    _trunc_normal,
)

Params = Dict[str, Tensor]


def sub_params(params: Params, prefix: str) -> Params:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _param(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


def init_linear(rng, fan_in, fan_out, bias=True, std=0.02, prefix="") -> Params:
    p = {prefix + "w": _param(_trunc_normal(rng, (fan_in, fan_out), std))}
    if bias:
        p[prefix + "b"] = _param(np.zeros(fan_out))
    return p


def init_layer_norm(dim, prefix="") -> Params:
    return {prefix + "g": _param(np.ones(dim)), prefix + "b": _param(np.zeros(dim))}


def ca_hidden_width(dim: int, beta: float) -> int:
    return max(1, int(dim // beta))


@dataclass
class BlockConfig:
    dim: int
    heads: int
    window: Tuple[int, int, int] = (4, 4, 4)
    alpha: float = 0.01
    beta: float = 3.0
    epsilon: float = 0.5
    mlp_ratio: int = 4
    use_ca: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide embedding width {self.dim}")
        if isinstance(self.window, int):
            self.window = (self.window,) * 3


# ------------------------------------------------------------------ init

def init_fab(rng, cfg: BlockConfig) -> Params:
    C = cfg.dim
    p = {}
    p.update(init_layer_norm(C, "norm1."))
    p.update(init_linear(rng, C, 3 * C, prefix="qkv."))
    p.update(init_linear(rng, C, C, prefix="proj."))
    p["rpb"] = _param(_trunc_normal(rng, (int(np.prod(table_extent(cfg.window))), cfg.heads), 0.02))
    if cfg.use_ca:
        hidden = ca_hidden_width(C, cfg.beta)
        p.update(init_linear(rng, C, hidden, std=(1.0 / C) ** 0.5, prefix="ca.compress."))
        p.update(init_linear(rng, hidden, C, std=(1.0 / hidden) ** 0.5, prefix="ca.recover."))
    p.update(init_layer_norm(C, "norm2."))
    p.update(init_linear(rng, C, cfg.mlp_ratio * C, prefix="mlp.fc1."))
    p.update(init_linear(rng, cfg.mlp_ratio * C, C, prefix="mlp.fc2."))
    return p


def init_oab(rng, cfg: BlockConfig) -> Params:
    C = cfg.dim
    spec = WindowSpec(cfg.window, cfg.epsilon)
    p = {}
    p.update(init_layer_norm(C, "norm1."))
    p.update(init_linear(rng, C, 3 * C, prefix="qkv."))
    p.update(init_linear(rng, C, C, prefix="proj."))
    n = int(np.prod(table_extent(spec.size, spec.overlap_size)))
    p["rpb"] = _param(_trunc_normal(rng, (n, cfg.heads), 0.02))
    p.update(init_layer_norm(C, "norm2."))
    p.update(init_linear(rng, C, cfg.mlp_ratio * C, prefix="mlp.fc1."))
    p.update(init_linear(rng, cfg.mlp_ratio * C, C, prefix="mlp.fc2."))
    return p


# ------------------------------------------------------------------ pieces

def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, bias: Optional[Tensor], heads: int,
                         proj_w: Tensor, proj_b: Tensor, mask: Optional[np.ndarray] = None,
                         return_weights: bool = False):
    """Windowed attention on projected tokens.

    ``q`` is ``(nW, Nq, C)``, ``k``/``v`` are ``(nW, Nk, C)``, ``bias`` is
    ``(heads, Nq, Nk)`` and ``mask`` an additive ``(nW, Nq, Nk)`` constant.
    Computes ``softmax(q k^T / sqrt(d) + bias + mask) v`` per head, then the
    output projection.
    """
    nW, Nq, C = q.shape
    Nk = k.shape[1]
    if C % heads:
        raise ShapeError(f"{heads} heads do not divide embedding width {C}")
    d = C // heads
    qh = T.permute(T.reshape(q, (nW, Nq, heads, d)), (0, 2, 1, 3))
    kh = T.permute(T.reshape(k, (nW, Nk, heads, d)), (0, 2, 3, 1))
    vh = T.permute(T.reshape(v, (nW, Nk, heads, d)), (0, 2, 1, 3))
    logits = T.matmul(T.mul(qh, d ** -0.5), kh)
    if bias is not None:
        if bias.shape != (heads, Nq, Nk):
            raise ShapeError(f"bias {bias.shape} does not match attention ({heads}, {Nq}, {Nk})")
        logits = T.add(logits, T.broadcast_to(bias, (nW, heads, Nq, Nk)))
    if mask is not None:
        logits = T.add(logits, T.broadcast_to(Tensor(mask[:, None]), (nW, heads, Nq, Nk)))
    weights = T.softmax(logits, axis=-1)
    out = T.permute(T.matmul(weights, vh), (0, 2, 1, 3))
    out = T.linear(T.reshape(out, (nW, Nq, C)), proj_w, proj_b)
    return (out, weights) if return_weights else out


def channel_attention(x: Tensor, p: Params) -> Tensor:
    """Gate channels by pooled statistics: mean -> compress -> ReLU -> recover -> sigmoid."""
    C = x.shape[-1]
    pooled = T.reshape(T.reduce_mean(x, axis=tuple(range(x.ndim - 1))), (1, C))
    hidden = T.relu(T.linear(pooled, p["ca.compress.w"], p["ca.compress.b"]))
    gate = T.sigmoid(T.linear(hidden, p["ca.recover.w"], p["ca.recover.b"]))
    return T.mul(x, T.broadcast_to(T.reshape(gate, (C,)), x.shape))


def mlp(x: Tensor, p: Params) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p["mlp.fc1.w"], p["mlp.fc1.b"])), p["mlp.fc2.w"], p["mlp.fc2.b"])


def _pad_to_windows(x: Tensor, P):
    X, Y, Z, _ = x.shape
    pads = [(0, (-n) % p) for n, p in zip((X, Y, Z), P)]
    return T.pad(x, pads + [(0, 0)]), (X, Y, Z)


def _crop(x: Tensor, dims):
    if x.shape[:3] == tuple(dims):
        return x
    return T.getitem(x, (slice(0, dims[0]), slice(0, dims[1]), slice(0, dims[2])))


def window_self_attention(h: Tensor, p: Params, cfg: BlockConfig, shifted: bool) -> Tensor:
    """(S)W-MSA over a normalized token grid; grids smaller than a window are zero-padded."""
    P = tuple(cfg.window)
    h, dims = _pad_to_windows(h, P)
    X, Y, Z, C = h.shape
    shift = tuple(w // 2 for w in P) if shifted and min(dims) > min(P) else (0, 0, 0)
    qkv = T.linear(h, p["qkv.w"], p["qkv.b"])
    mask = None
    if any(shift):
        qkv = cyclic_shift(qkv, shift)
        mask = shift_attention_mask((X, Y, Z), P, shift)
    q, k, v = T.split(window_partition(qkv, P), [C, C, C], axis=-1)
    bias = build_bias(p["rpb"], relative_position_index(P))
    out = multi_head_attention(q, k, v, bias, cfg.heads, p["proj.w"], p["proj.b"], mask)
    out = window_reverse(out, P, (X, Y, Z))
    if any(shift):
        out = cyclic_shift(out, shift, inverse=True)
    return _crop(out, dims)


def overlapping_attention(h: Tensor, p: Params, cfg: BlockConfig) -> Tensor:
    """Queries from plain windows, keys/values from zero-padded overlapping windows."""
    spec = WindowSpec(cfg.window, cfg.epsilon)
    P = spec.size
    h, dims = _pad_to_windows(h, P)
    X, Y, Z, C = h.shape
    q, k, v = T.split(T.linear(h, p["qkv.w"], p["qkv.b"]), [C, C, C], axis=-1)
    qw = window_partition(q, P)
    kw = overlapping_partition(k, spec)
    vw = overlapping_partition(v, spec)
    bias = build_bias(p["rpb"], relative_position_index(P, spec.overlap_size))
    out = multi_head_attention(qw, kw, vw, bias, cfg.heads, p["proj.w"], p["proj.b"])
    return _crop(window_reverse(out, P, (X, Y, Z)), dims)


# ------------------------------------------------------------------ blocks

def fab_forward(z: Tensor, p: Params, cfg: BlockConfig, shifted: bool = False) -> Tensor:
    """Fusion attention block on a ``(X, Y, Z, C)`` token grid.

    ``zh = (S)W-MSA(LN(z)) + alpha * CA(LN(z)) + z``; ``out = MLP(LN(zh)) + zh``.
    With ``cfg.use_ca`` off (or ``alpha == 0``) this is a plain shifted-window block.
    """
    h = T.layer_norm(z, p["norm1.g"], p["norm1.b"])
    branch = window_self_attention(h, p, cfg, shifted)
    if cfg.use_ca and cfg.alpha != 0:
        branch = T.add(branch, T.mul(channel_attention(h, p), cfg.alpha))
    zh = T.add(z, branch)
    return T.add(zh, mlp(T.layer_norm(zh, p["norm2.g"], p["norm2.b"]), p))


def oab_forward(z: Tensor, p: Params, cfg: BlockConfig) -> Tensor:
    """Overlapping attention block: ``zh = OA(LN(z)) + z``; ``out = MLP(LN(zh)) + zh``."""
    h = T.layer_norm(z, p["norm1.g"], p["norm1.b"])
    zh = T.add(z, overlapping_attention(h, p, cfg))
    return T.add(zh, mlp(T.layer_norm(zh, p["norm2.g"], p["norm2.b"]), p))


# ------------------------------------------------------------------ embedding / merging

def patchify(x: Tensor, patch: int) -> Tensor:
    """``(X, Y, Z, c)`` -> ``(X/p, Y/p, Z/p, p^3 * c)``, features ordered (dx, dy, dz, c)."""
    X, Y, Z, c = x.shape
    t = T.reshape(x, (X // patch, patch, Y // patch, patch, Z // patch, patch, c))
    t = T.permute(t, (0, 2, 4, 1, 3, 5, 6))
    return T.reshape(t, (X // patch, Y // patch, Z // patch, patch ** 3 * c))


def init_patch_embed(rng, in_chans, dim, patch=4) -> Params:
    return init_linear(rng, patch ** 3 * in_chans, dim, prefix="")


def patch_embed(moving: Tensor, fixed: Tensor, p: Params, patch: int = 4, multiple: int = 32) -> Tensor:
    """Linear embedding of non-overlapping ``patch^3`` cubes of the stacked pair."""
    if moving.shape != fixed.shape:
        raise ShapeError(f"moving {moving.shape} and fixed {fixed.shape} differ")
    for axis, n in enumerate(moving.shape):
        if n % multiple:
            need = (-n) % multiple
            raise ShapeError(f"axis {'XYZ'[axis]}: extent {n} not divisible by {multiple}; "
                             f"pad by {need} voxels")
    pair = T.concat([T.reshape(moving, moving.shape + (1,)), T.reshape(fixed, fixed.shape + (1,))], axis=-1)
    return T.linear(patchify(pair, patch), p["w"], p["b"])


def init_patch_merge(rng, dim) -> Params:
    return init_linear(rng, 8 * dim, 2 * dim, bias=False, prefix="")


def patch_merge(x: Tensor, p: Params) -> Tensor:
    """Concatenate each 2x2x2 neighbourhood (index 4dx+2dy+dz) and map ``8d -> 2d``."""
    X, Y, Z, _ = x.shape
    for axis, n in enumerate((X, Y, Z)):
        if n % 2:
            raise ShapeError(f"patch_merge: axis {'XYZ'[axis]} has odd extent {n}")
    return T.linear(patchify(x, 2), p["w"])

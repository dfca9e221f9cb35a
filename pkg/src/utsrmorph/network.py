"""Four-stage attention encoder, superresolution decoder and displacement head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .blocks import (
    BlockConfig,
    fab_forward,
    init_fab,
    init_linear,
    init_oab,
    init_patch_embed,
    init_patch_merge,
    oab_forward,
    patch_embed,
    patch_merge,
    sub_params,
)
from .tensor import ShapeError, Tensor
from .warp import warp_trilinear

VARIANTS = {
    "S": dict(embed_dim=48, depths=(2, 2, 2, 2), heads=(4, 4, 4, 4)),
    "base": dict(embed_dim=96, depths=(2, 2, 4, 2), heads=(4, 4, 8, 8)),
    "L": dict(embed_dim=128, depths=(2, 2, 18, 2), heads=(4, 4, 8, 16)),
}


@dataclass
class ModelConfig:
    variant: str = "base"
    embed_dim: int = 96
    depths: Tuple[int, ...] = (2, 2, 4, 2)
    heads: Tuple[int, ...] = (4, 4, 8, 8)
    window: int = 4
    patch: int = 4
    alpha: float = 0.01
    beta: float = 3.0
    epsilon: float = 0.5
    oab_heads: int = 4
    reg_head_chan: int = 16
    use_conv_blocks: bool = True
    upsample_mode: str = "sr"  # or "trilinear"
    fab_on: bool = True
    oab_on: bool = True

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        if self.upsample_mode not in ("sr", "trilinear"):
            raise ValueError(f"upsample_mode must be 'sr' or 'trilinear', got {self.upsample_mode!r}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("expected four stages")
        for i, h in enumerate(self.heads):
            if self.stage_dim(i) % h:
                raise ShapeError(f"stage {i + 1}: {h} heads do not divide width {self.stage_dim(i)}")
        if self.oab_on and any(self.stage_dim(i) % self.oab_heads for i in range(4)):
            raise ShapeError(f"{self.oab_heads} OAB heads do not divide every stage width")

    @classmethod
    def from_variant(cls, variant: str = "base", **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return cls(variant=variant, **{**VARIANTS[variant], **overrides})

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2 ** i

    @property
    def dims_multiple(self) -> int:
        return self.patch * 2 ** 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"], d["heads"] = list(self.depths), list(self.heads)
        return d


@dataclass
class FeaturePyramid:
    stages: List[Tensor]  # F1..F4 at /4, /8, /16, /32
    half: Optional[Tensor] = None  # C/2 at /2
    full: Optional[Tensor] = None  # reg_head_chan at /1


def _block_cfg(cfg: ModelConfig, i: int, oab: bool = False) -> BlockConfig:
    return BlockConfig(dim=cfg.stage_dim(i), heads=cfg.oab_heads if oab else cfg.heads[i],
                       window=(cfg.window,) * 3, alpha=cfg.alpha, beta=cfg.beta,
                       epsilon=cfg.epsilon, use_ca=cfg.fab_on)


def decoder_widths(cfg: ModelConfig) -> List[int]:
    """Output widths of the five upsampling steps (/16, /8, /4, /2, /1)."""
    C = cfg.embed_dim
    return [4 * C, 2 * C, C, max(1, C // 2), cfg.reg_head_chan]


def _conv_init(rng, k, cin, cout, prefix, gain=2.0):
    std = (gain / (k ** 3 * cin)) ** 0.5
    return {prefix + "w": Tensor(rng.standard_normal((k, k, k, cin, cout)) * std, requires_grad=True),
            prefix + "b": Tensor(np.zeros(cout), requires_grad=True)}


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Deterministic parameter set for ``cfg``; names are dotted paths."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}

    def put(prefix, block):
        params.update({prefix + k: v for k, v in block.items()})

    put("embed.", init_patch_embed(rng, 2, cfg.embed_dim, cfg.patch))
    for i in range(4):
        if i > 0:
            put(f"stage{i + 1}.merge.", init_patch_merge(rng, cfg.stage_dim(i - 1)))
        for j in range(cfg.depths[i]):
            put(f"stage{i + 1}.fab{j}.", init_fab(rng, _block_cfg(cfg, i)))
        if cfg.oab_on:
            put(f"stage{i + 1}.oab.", init_oab(rng, _block_cfg(cfg, i, oab=True)))
    widths = decoder_widths(cfg)
    skips = [cfg.stage_dim(2), cfg.stage_dim(1), cfg.stage_dim(0)]
    skips += [widths[3], widths[4]] if cfg.use_conv_blocks else [0, 0]
    if cfg.use_conv_blocks:
        put("conv_half.", _conv_init(rng, 3, 2, widths[3], ""))
        put("conv_full.", _conv_init(rng, 3, 2, widths[4], ""))
    cin = cfg.stage_dim(3)
    for lvl, (cout, cskip) in enumerate(zip(widths, skips)):
        pre = f"up{lvl}."
        factor = 8 if cfg.upsample_mode == "sr" else 1
        put(pre + "channel.", init_linear(rng, cin, factor * cout, std=(1.0 / cin) ** 0.5))
        put(pre + "fuse1.", _conv_init(rng, 3, cout + cskip, cout, ""))
        put(pre + "fuse2.", _conv_init(rng, 3, cout, cout, ""))
        cin = cout
    params["head.w"] = Tensor(np.zeros((3, 3, 3, widths[4], 3)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(3), requires_grad=True)
    for name, t in params.items():
        t.name = name
    return params


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(t.size for t in init_params(cfg).values()))


# ------------------------------------------------------------------ encoder

def _instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = T.broadcast_to(T.reduce_mean(x, axis=(0, 1, 2), keepdims=True), x.shape)
    xc = T.sub(x, mu)
    var = T.reduce_mean(T.square(xc), axis=(0, 1, 2), keepdims=True)
    return T.mul(xc, T.broadcast_to(T.power(T.add(var, eps), -0.5), x.shape))


def _conv_block(pair: Tensor, p, stride: int) -> Tensor:
    return T.leaky_relu(_instance_norm(T.conv3d(pair, p["w"], p["b"], stride=stride, padding=1)), 0.2)


def check_input_dims(dims, cfg: ModelConfig):
    m = cfg.dims_multiple
    for axis, n in enumerate(dims):
        if n % m:
            raise ShapeError(f"axis {'XYZ'[axis]}: extent {n} not divisible by {m}; pad by {(-n) % m} voxels")


def encode(moving: Tensor, fixed: Tensor, cfg: ModelConfig, params) -> FeaturePyramid:
    """Patch embedding, then per stage: [merge] -> FABs (alternating shift) -> OAB."""
    moving, fixed = T.as_tensor(moving), T.as_tensor(fixed)
    if moving.shape != fixed.shape:
        raise ShapeError(f"moving {moving.shape} and fixed {fixed.shape} differ")
    check_input_dims(moving.shape, cfg)
    z = patch_embed(moving, fixed, sub_params(params, "embed."), cfg.patch, cfg.dims_multiple)
    stages = []
    for i in range(4):
        if i > 0:
            z = patch_merge(z, sub_params(params, f"stage{i + 1}.merge."))
        bc = _block_cfg(cfg, i)
        for j in range(cfg.depths[i]):
            z = fab_forward(z, sub_params(params, f"stage{i + 1}.fab{j}."), bc, shifted=bool(j % 2))
        if cfg.oab_on:
            z = oab_forward(z, sub_params(params, f"stage{i + 1}.oab."), _block_cfg(cfg, i, oab=True))
        stages.append(z)
    pyramid = FeaturePyramid(stages)
    if cfg.use_conv_blocks:
        pair = T.concat([T.reshape(moving, moving.shape + (1,)), T.reshape(fixed, fixed.shape + (1,))], -1)
        pyramid.half = _conv_block(pair, sub_params(params, "conv_half."), stride=2)
        pyramid.full = _conv_block(pair, sub_params(params, "conv_full."), stride=1)
    return pyramid


# ------------------------------------------------------------------ decoder

def pixel_shuffle(h: Tensor, factor: int = 2) -> Tensor:
    """``(X, Y, Z, l^3 * C)`` -> ``(lX, lY, lZ, C)``; channel ``c*l^3 + (dx*l + dy)*l + dz``
    lands at offset ``(dx, dy, dz)``."""
    X, Y, Z, Cl = h.shape
    l = factor
    if Cl % l ** 3:
        raise ShapeError(f"pixel_shuffle: {Cl} channels not divisible by {l ** 3}")
    C = Cl // l ** 3
    t = T.reshape(h, (X, Y, Z, C, l, l, l))
    t = T.permute(t, (0, 4, 1, 5, 2, 6, 3))
    return T.reshape(t, (l * X, l * Y, l * Z, C))


def sr_upsample(n_next: Tensor, skip: Optional[Tensor], p, mode: str = "sr", factor: int = 2) -> Tensor:
    """Channel conv + pixel shuffle (or trilinear), skip concat, two 3x3x3 fusion convs."""
    if mode == "sr":
        h = pixel_shuffle(T.linear(n_next, p["channel.w"], p["channel.b"]), factor)
    else:
        h = T.upsample_trilinear2x(T.linear(n_next, p["channel.w"], p["channel.b"]))
    if skip is not None:
        if skip.shape[:3] != h.shape[:3]:
            raise ShapeError(f"upsampled extents {h.shape[:3]} do not match skip {skip.shape[:3]}")
        h = T.concat([h, skip], axis=-1)
    h = T.leaky_relu(T.conv3d(h, p["fuse1.w"], p["fuse1.b"], padding=1), 0.2)
    return T.leaky_relu(T.conv3d(h, p["fuse2.w"], p["fuse2.b"], padding=1), 0.2)


def decode(pyramid: FeaturePyramid, cfg: ModelConfig, params) -> Tensor:
    """SR chain /32 -> /1 and the 3-channel displacement head (voxel units)."""
    F1, F2, F3, F4 = pyramid.stages
    skips = [F3, F2, F1, pyramid.half, pyramid.full]
    n = F4
    for lvl, skip in enumerate(skips):
        n = sr_upsample(n, skip, sub_params(params, f"up{lvl}."), cfg.upsample_mode)
    return T.conv3d(n, params["head.w"], params["head.b"], padding=1)


def predict_field(moving, fixed, cfg: ModelConfig, params) -> Tensor:
    return decode(encode(moving, fixed, cfg, params), cfg, params)


def register_pair(moving, fixed, cfg: ModelConfig, params):
    """Return ``(field, warped)`` tensors: field is ``(X, Y, Z, 3)``, warped ``(X, Y, Z)``."""
    moving, fixed = T.as_tensor(moving), T.as_tensor(fixed)
    field = predict_field(moving, fixed, cfg, params)
    return field, warp_trilinear(moving, field)


def shape_table(cfg: ModelConfig, dims) -> Dict[str, tuple]:
    """Declared intermediate shapes for an input of extents ``dims``."""
    X, Y, Z = dims
    table = {}
    for i in range(4):
        s = cfg.patch * 2 ** i
        table[f"F{i + 1}"] = (X // s, Y // s, Z // s, cfg.stage_dim(i))
    widths = decoder_widths(cfg)
    for lvl, w in enumerate(widths):
        s = cfg.patch * 2 ** 3 // 2 ** (lvl + 1)
        table[f"up{lvl}"] = (X // s, Y // s, Z // s, w)
    if cfg.use_conv_blocks:
        table["E_half"] = (X // 2, Y // 2, Z // 2, widths[3])
        table["E_full"] = (X, Y, Z, widths[4])
    table["field"] = (X, Y, Z, 3)
    return table

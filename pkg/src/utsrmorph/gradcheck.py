"""Finite-difference gradient battery over engine ops, blocks, warp and losses.

Ops and blocks are reduced to a scalar with fixed random weights. The
max-over-coordinates relative error is only meaningful where every derivative
clears the finite-difference rounding floor (about ``|f| * 1e-7 / eps`` in
32-bit), which single coordinates of attention blocks and mean-reduced losses
often do not. Such targets are checked on a few coordinates ``a`` of
``x0 + sum_i a_i d_i`` instead. At 64-bit the directions ``d_i`` are plain
Gaussian noise and ops are still checked per coordinate; at 32-bit every check
uses directions that mix the normalized analytic gradient with noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .blocks import (BlockConfig, channel_attention, fab_forward, init_fab, init_oab, mlp, multi_head_attention,
                     oab_forward, patch_merge, patchify)
from .losses import LossConfig, diffusion_loss, dice_seg_loss, lncc_loss, mi_loss, total_loss
from .network import ModelConfig, _instance_norm, init_params, pixel_shuffle, predict_field
from .tensor import Tensor, grad_check
from .warp import warp_trilinear
from .windowing import (WindowSpec, build_bias, cyclic_shift, overlapping_partition, relative_position_index,
                        window_partition, window_reverse)

TOLERANCE = {32: 1e-2, 64: 1e-5}


@dataclass
class CheckResult:
    name: str
    bits: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.name:<28s} {self.bits}-bit rel err {self.error:.3e} (tol {self.tol:.0e})"


Case = Tuple[Callable[[Tensor], Tensor], np.ndarray]


def _weighted(rng, shape):
    w = Tensor(rng.standard_normal(shape))
    return lambda y: T.reduce_sum(T.mul(y, w))


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _fractional(rng, shape, amp=0.8):
    """Displacements whose fractional parts stay in (0.2, 0.8): no lattice crossings."""
    return rng.uniform(0.2, amp, shape) * rng.choice([-1.0, 1.0], shape)


# ------------------------------------------------------------------ op cases

def _unary(op, sample):
    def build(rng):
        x = sample(rng, (3, 4))
        red = _weighted(rng, (3, 4))
        return (lambda t: red(op(t))), x
    return build


def _binary(op, sample_other, left=True):
    def build(rng):
        x = rng.standard_normal((3, 4))
        other = Tensor(sample_other(rng, (3, 4)))
        red = _weighted(rng, (3, 4))
        return (lambda t: red(op(t, other) if left else op(other, t))), x
    return build


def _normal(rng, shape):
    return rng.standard_normal(shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _case_split(rng):
    x = rng.standard_normal((2, 5))
    ra, rb = _weighted(rng, (2, 2)), _weighted(rng, (2, 3))

    def f(t):
        a, b = T.split(t, [2, 3], axis=1)
        return T.add(ra(a), rb(b))
    return f, x


def _case_concat(rng):
    x = rng.standard_normal((2, 3))
    other = Tensor(rng.standard_normal((2, 2)))
    red = _weighted(rng, (2, 5))
    return (lambda t: red(T.concat([t, other], axis=1))), x


def _case_matmul(rng):
    x = rng.standard_normal((2, 3, 4))
    b = Tensor(rng.standard_normal((2, 4, 5)))
    red = _weighted(rng, (2, 3, 5))
    return (lambda t: red(T.matmul(t, b))), x


def _case_matmul_right(rng):
    a = Tensor(rng.standard_normal((3, 4)))
    x = rng.standard_normal((4, 2))
    red = _weighted(rng, (3, 2))
    return (lambda t: red(T.matmul(a, t))), x


def _case_linear(rng):
    x = rng.standard_normal((2, 3, 4))
    w, b = Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal(5))
    red = _weighted(rng, (2, 3, 5))
    return (lambda t: red(T.linear(t, w, b))), x


def _case_linear_weight(rng):
    x = Tensor(rng.standard_normal((6, 4)))
    w = rng.standard_normal((4, 3))
    red = _weighted(rng, (6, 3))
    return (lambda t: red(T.linear(x, t))), w


def _case_layer_norm(rng):
    x = rng.standard_normal((3, 6))
    g, b = Tensor(rng.uniform(0.5, 1.5, 6)), Tensor(rng.standard_normal(6))
    red = _weighted(rng, (3, 6))
    return (lambda t: red(T.layer_norm(t, g, b))), x


def _case_layer_norm_gain(rng):
    x = Tensor(rng.standard_normal((3, 6)))
    b = Tensor(rng.standard_normal(6))
    red = _weighted(rng, (3, 6))
    return (lambda t: red(T.layer_norm(x, t, b))), rng.uniform(0.5, 1.5, 6)


def _case_softmax(rng):
    x = rng.standard_normal((3, 5))
    red = _weighted(rng, (3, 5))
    return (lambda t: red(T.softmax(t, axis=-1))), x


def _case_conv(stride, padding, wrt="x"):
    def build(rng):
        x = rng.standard_normal((5, 4, 5, 2))
        w = rng.standard_normal((3, 3, 3, 2, 3)) * 0.3
        b = Tensor(rng.standard_normal(3))
        shape = T.conv3d(Tensor(x), Tensor(w), b, stride=stride, padding=padding).shape
        red = _weighted(rng, shape)
        if wrt == "x":
            wt = Tensor(w)
            return (lambda t: red(T.conv3d(t, wt, b, stride=stride, padding=padding))), x
        xt = Tensor(x)
        return (lambda t: red(T.conv3d(xt, t, b, stride=stride, padding=padding))), w
    return build


def _case_conv1x1(rng):
    x = rng.standard_normal((3, 2, 3, 4))
    w = Tensor(rng.standard_normal((1, 1, 1, 4, 2)))
    red = _weighted(rng, (3, 2, 3, 2))
    return (lambda t: red(T.conv3d(t, w))), x


def _case_shape(fn, shape):
    def build(rng):
        x = rng.standard_normal(shape)
        red = _weighted(rng, fn(Tensor(x)).shape)
        return (lambda t: red(fn(t))), x
    return build


def _case_extreme(fn):
    def build(rng):
        x = rng.permutation(np.linspace(-1.0, 1.0, 12)).reshape(3, 4)
        return (lambda t: T.mul(fn(t), 1.7)), x
    return build


def _case_box_sum(rng):
    x = rng.standard_normal((5, 4, 6, 2))
    red = _weighted(rng, (5, 4, 6, 2))
    return (lambda t: red(T.box_sum(t, 1))), x


def _case_upsample(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    red = _weighted(rng, (4, 6, 4, 2))
    return (lambda t: red(T.upsample_trilinear2x(t))), x


def _case_take(rng):
    x = rng.standard_normal((4, 3))
    idx = np.array([[0, 3, 3], [1, 1, 2]])
    red = _weighted(rng, (2, 3, 3))
    return (lambda t: red(T.take(t, idx, axis=0))), x


def _case_build_bias(rng):
    index = relative_position_index((2, 2, 2), (3, 3, 3))
    table = rng.standard_normal((int(index.max()) + 1, 2))
    red = _weighted(rng, (2,) + index.shape)
    return (lambda t: red(build_bias(t, index))), table


def _case_overlap(rng):
    spec = WindowSpec((2, 2, 2), 0.5)
    x = rng.standard_normal((4, 2, 4, 2))
    shape = overlapping_partition(Tensor(x), spec).shape
    red = _weighted(rng, shape)
    return (lambda t: red(overlapping_partition(t, spec))), x


def _case_mha(rng):
    q = rng.standard_normal((2, 4, 4))
    k = Tensor(rng.standard_normal((2, 6, 4)))
    v = Tensor(rng.standard_normal((2, 6, 4)))
    bias = Tensor(rng.standard_normal((2, 4, 6)) * 0.1)
    pw, pb = Tensor(rng.standard_normal((4, 4)) * 0.5), Tensor(rng.standard_normal(4))
    red = _weighted(rng, (2, 4, 4))
    return (lambda t: red(multi_head_attention(t, k, v, bias, 2, pw, pb))), q


def _small_block_params(rng, cfg, oab=False):
    p = init_oab(rng, cfg) if oab else init_fab(rng, cfg)
    for name, t in p.items():  # move away from the near-degenerate default init
        if name.endswith(".w") or name == "rpb":
            t.data[...] = rng.standard_normal(t.shape) * (0.3 if name != "rpb" else 0.5)
        elif name.endswith(".b"):
            t.data[...] = rng.standard_normal(t.shape) * 0.1
    return p


def _case_channel_attention(rng):
    cfg = BlockConfig(dim=6, heads=2, window=2, beta=2.0)
    p = _small_block_params(rng, cfg)
    p["ca.compress.b"].data[...] = 0.5 + np.abs(p["ca.compress.b"].data)
    x = rng.standard_normal((2, 2, 2, 6))
    red = _weighted(rng, (2, 2, 2, 6))
    return (lambda t: red(channel_attention(t, p))), x


def _case_mlp(rng):
    cfg = BlockConfig(dim=4, heads=2, window=2)
    p = _small_block_params(rng, cfg)
    x = rng.standard_normal((2, 3, 4))
    red = _weighted(rng, (2, 3, 4))
    return (lambda t: red(mlp(t, p))), x


def _case_instance_norm(rng):
    x = rng.standard_normal((3, 2, 3, 2))
    red = _weighted(rng, (3, 2, 3, 2))
    return (lambda t: red(_instance_norm(t))), x


def _case_warp_image(rng):
    img = rng.standard_normal((4, 5, 3, 2))
    u = Tensor(_fractional(rng, (4, 5, 3, 3), 1.5))
    red = _weighted(rng, (4, 5, 3, 2))
    return (lambda t: red(warp_trilinear(t, u))), img


def _case_warp_field(rng):
    img = Tensor(ndimage.gaussian_filter(rng.standard_normal((5, 5, 5)), 1.0) * 3)
    u = _fractional(rng, (5, 5, 5, 3), 1.5)
    red = _weighted(rng, (5, 5, 5))
    return (lambda t: red(warp_trilinear(img, t))), u


OP_CASES: Dict[str, Callable] = {
    "add": _binary(T.add, _normal),
    "sub": _binary(T.sub, _normal, left=False),
    "mul": _binary(T.mul, _normal),
    "div": _binary(T.div, lambda r, s: _away_from_zero(r, s, 0.5, 2.0)),
    "div_denominator": _binary(T.div, _normal, left=False),
    "exp": _unary(T.exp, _normal),
    "log": _unary(T.log, _positive),
    "sqrt": _unary(T.sqrt, _positive),
    "power": _unary(lambda t: T.power(t, 1.7), _positive),
    "square": _unary(T.square, _normal),
    "sigmoid": _unary(T.sigmoid, _normal),
    "relu": _unary(T.relu, _away_from_zero),
    "leaky_relu": _unary(lambda t: T.leaky_relu(t, 0.2), _away_from_zero),
    "gelu": _unary(T.gelu, _normal),
    "reshape": _case_shape(lambda t: T.reshape(t, (6, 4)), (2, 3, 4)),
    "permute": _case_shape(lambda t: T.permute(t, (2, 0, 1)), (2, 3, 4)),
    "concat": _case_concat,
    "split": _case_split,
    "getitem": _case_shape(lambda t: T.getitem(t, (slice(1, 3), slice(None, None, 2))), (4, 5)),
    "pad": _case_shape(lambda t: T.pad(t, [(1, 0), (2, 1)]), (3, 2)),
    "roll": _case_shape(lambda t: T.roll(t, (1, -2), (0, 1)), (3, 4)),
    "broadcast_to": _case_shape(lambda t: T.broadcast_to(t, (2, 3, 4)), (3, 1)),
    "take": _case_take,
    "reduce_sum": _case_shape(lambda t: T.reduce_sum(t, axis=1), (3, 4)),
    "reduce_mean": _case_shape(lambda t: T.reduce_mean(t, axis=(0, 2), keepdims=True), (2, 3, 4)),
    "reduce_max": _case_extreme(T.reduce_max),
    "reduce_min": _case_extreme(T.reduce_min),
    "matmul": _case_matmul,
    "matmul_right": _case_matmul_right,
    "linear": _case_linear,
    "linear_weight": _case_linear_weight,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "layer_norm_gain": _case_layer_norm_gain,
    "conv3d": _case_conv(1, 1),
    "conv3d_stride2": _case_conv(2, 1),
    "conv3d_weight": _case_conv(1, 1, wrt="w"),
    "conv3d_1x1": _case_conv1x1,
    "box_sum": _case_box_sum,
    "upsample_trilinear2x": _case_upsample,
    "window_partition": _case_shape(lambda t: window_partition(t, 2), (4, 2, 2, 3)),
    "window_reverse": _case_shape(lambda t: window_reverse(t, 2, (4, 2, 2)), (2, 8, 3)),
    "cyclic_shift": _case_shape(lambda t: cyclic_shift(t, 1), (4, 4, 2, 2)),
    "overlapping_partition": _case_overlap,
    "build_bias": _case_build_bias,
    "multi_head_attention": _case_mha,
    "channel_attention": _case_channel_attention,
    "mlp": _case_mlp,
    "patchify": _case_shape(lambda t: patchify(t, 2), (4, 2, 2, 2)),
    "pixel_shuffle": _case_shape(lambda t: pixel_shuffle(t, 2), (2, 1, 2, 16)),
    "instance_norm": _case_instance_norm,
    "warp_trilinear_image": _case_warp_image,
    "warp_trilinear_field": _case_warp_field,
}


# ------------------------------------------------------------------ blocks

def _case_fab(rng, wrt="z"):
    cfg = BlockConfig(dim=8, heads=2, window=2, alpha=0.5, beta=2.0)
    p = _small_block_params(rng, cfg)
    p["ca.compress.b"].data[...] = 0.5 + np.abs(p["ca.compress.b"].data)
    z = rng.standard_normal((4, 4, 4, 8))
    red = _weighted(rng, (4, 4, 4, 8))
    if wrt == "z":
        return (lambda t: red(fab_forward(t, p, cfg, shifted=True))), z
    zt = Tensor(z)

    def f(t):
        q = dict(p)
        q["rpb"] = t
        return red(fab_forward(zt, q, cfg, shifted=True))
    return f, p["rpb"].data.copy()


def _case_oab(rng, wrt="z"):
    cfg = BlockConfig(dim=8, heads=2, window=2, epsilon=0.5, use_ca=False)
    p = _small_block_params(rng, cfg, oab=True)
    z = rng.standard_normal((4, 4, 4, 8))
    red = _weighted(rng, (4, 4, 4, 8))
    if wrt == "z":
        return (lambda t: red(oab_forward(t, p, cfg))), z
    zt = Tensor(z)

    def f(t):
        q = dict(p)
        q["rpb"] = t
        return red(oab_forward(zt, q, cfg))
    return f, p["rpb"].data.copy()


def _case_patch_merge(rng):
    p = {"w": Tensor(rng.standard_normal((16, 4)) * 0.3)}
    x = rng.standard_normal((2, 4, 2, 2))
    red = _weighted(rng, (1, 2, 1, 4))
    return (lambda t: red(patch_merge(t, p))), x


BLOCK_CASES: Dict[str, Callable] = {
    "fab": _case_fab,
    "fab_bias_table": lambda rng: _case_fab(rng, "rpb"),
    "oab": _case_oab,
    "oab_bias_table": lambda rng: _case_oab(rng, "rpb"),
    "patch_merge": _case_patch_merge,
}


# ------------------------------------------------------------------ losses (subspace checks)

def _pair(rng, n=11):
    f = ndimage.gaussian_filter(rng.standard_normal((n, n, n)), 1.5)
    f = (f - f.min()) / np.ptp(f)
    m = np.roll(f, 1, axis=0) + 0.05 * rng.standard_normal(f.shape)
    return f, m


def _separate_extremes(x):
    """Give ``x`` a unique, well separated max and min so min-max normalization is smooth."""
    x = x.copy().reshape(-1)
    lo, hi = x.min(), x.max()
    x[0], x[1] = hi + 0.25, lo - 0.25
    return x.reshape(-1)


def _loss_targets(rng):
    f, m = _pair(rng)
    shape = f.shape
    u = _fractional(rng, shape + (3,))
    fixed, moving = Tensor(f), Tensor(m)
    mi_m = _separate_extremes(m).reshape(shape)
    mi_f = Tensor(_separate_extremes(f).reshape(shape))
    K = 2
    fixed_oh = Tensor(np.stack([f > 0.5, f < 0.3], -1).astype(float))
    moving_oh = Tensor(np.stack([m > 0.5, m < 0.3], -1).astype(float))
    soft = rng.uniform(0.05, 0.95, shape + (K,))
    seg_cfg = LossConfig(sim_kind="lncc", lam=1.0, gamma=1.0, use_seg=True)
    mi_cfg = LossConfig(sim_kind="mi", lam=1.0)
    return {
        "lncc_loss": (lambda w: lncc_loss(fixed, w), m, 1.0),
        "mi_loss": (lambda w: mi_loss(mi_f, w), mi_m, 1.0),
        "diffusion_loss": (diffusion_loss, u, 1.0),
        "dice_seg_loss": (lambda w: dice_seg_loss(fixed_oh, w), soft, 1.0),
        "total_loss": (lambda x: total_loss(fixed, moving, x, LossConfig())[0], u, 0.05),
        "total_loss_seg": (lambda x: total_loss(fixed, moving, x, seg_cfg, fixed_oh, moving_oh)[0], u, 0.05),
        "total_loss_mi": (lambda x: total_loss(mi_f, Tensor(mi_m), x, mi_cfg)[0], u, 0.05),
    }


def subspace_function(loss, base: np.ndarray, rng, directions: int = 4, scale: float = 1.0,
                      guided: bool = False) -> Case:
    """Restrict ``loss`` to ``base + sum_i a_i d_i`` and return ``(f, a0 = 0)``."""
    D = rng.standard_normal((directions,) + base.shape)
    if guided:
        probe = Tensor(base, requires_grad=True)
        T.backward(loss(probe))
        g = probe.grad.astype(np.float64)
        g /= np.sqrt(np.mean(g * g)) + 1e-30
        D[0] = g
        D[1:] = (D[1:] + g) / np.sqrt(2.0)
    D *= scale
    flat = Tensor(D.reshape(directions, -1))
    x0 = Tensor(base)

    def f(a):
        step = T.reshape(T.matmul(T.reshape(a, (1, directions)), flat), base.shape)
        return loss(T.add(x0, step))
    return f, np.zeros(directions)


def _case_network(rng, bits):
    cfg = ModelConfig.from_variant("S", depths=(1, 1, 1, 1), heads=(2, 2, 2, 2), embed_dim=8)
    params = init_params(cfg, seed=int(rng.integers(1 << 30)))
    head = rng.standard_normal(params["head.w"].shape) * 0.05
    f, m = _pair(rng, 32)
    fixed, moving = Tensor(f), Tensor(m)

    def loss(w):
        q = dict(params)
        q["head.w"] = w
        return total_loss(fixed, moving, predict_field(moving, fixed, cfg, q), LossConfig())[0]
    return loss, head


# ------------------------------------------------------------------ driver

def run_battery(bits: int = 32, seed: int = 0, include: Optional[Sequence[str]] = None,
                network: bool = True) -> List[CheckResult]:
    """Run every check at the given precision; ``include`` filters by name.

    64-bit: ops per coordinate, everything else on random subspaces.
    32-bit: every check on a gradient-guided subspace.
    """
    tol = TOLERANCE[bits]
    guided = bits == 32
    results: List[CheckResult] = []
    want = (lambda n: True) if include is None else (lambda n: n in include)

    def seeded(name, *extra):
        return np.random.default_rng([seed, sum(map(ord, name)), len(name), *extra])

    with T.precision(bits):
        for name, build in list(OP_CASES.items()) + list(BLOCK_CASES.items()):
            if not want(name):
                continue
            f, x = build(seeded(name))
            if bits == 64 and name in OP_CASES:
                err = grad_check(f, x)
            else:
                g, a = subspace_function(f, np.asarray(x, dtype=np.float64), seeded(name, 1), guided=guided)
                err = grad_check(g, a)
            results.append(CheckResult(name, bits, err, tol))
        for name, (loss, base, scale) in _loss_targets(seeded("losses")).items():
            if not want(name):
                continue
            f, a = subspace_function(loss, base, seeded(name, 1), scale=scale, guided=guided)
            results.append(CheckResult(name, bits, grad_check(f, a), tol))
        if network and want("network_end_to_end"):
            loss, head = _case_network(seeded("network"), bits)
            f, a = subspace_function(loss, head, seeded("network", 1), directions=3, guided=guided)
            results.append(CheckResult("network_end_to_end", bits, grad_check(f, a), tol))
    return results


def battery_names() -> List[str]:
    return list(OP_CASES) + list(BLOCK_CASES) + list(_loss_targets(np.random.default_rng(0))) + ["network_end_to_end"]

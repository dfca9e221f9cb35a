"""Adam training loop, synthetic subjects and pair sampling."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .losses import LossConfig, total_loss
from .metrics import dice, jacobian_stats
from .network import ModelConfig, init_params, predict_field
from .tensor import Tensor
from .volume_io import DisplacementField, LabelMask, Volume, save_checkpoint, stack_onehot
from .warp import warp_labels, warp_trilinear

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    ``params`` values may be arrays or Tensors; entries whose gradient is None are skipped.
    """
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = p.data if isinstance(p, Tensor) else p
        if g.shape != data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += eps
        data -= (lr / c1) * m / denom


# ------------------------------------------------------------------ synthetic data

@dataclass
class SynthSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    n_subjects: int = 4
    num_labels: int = 3
    radius_range: Tuple[float, float] = (7.0, 12.0)
    amplitude: float = 6.0  # peak displacement of each subject's deformation, voxels
    smoothness: float = 12.0  # Gaussian width of the deformation, voxels
    max_jacobian_norm: float = 0.6

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d % 32 for d in self.dims):
            raise ValueError(f"synthetic dims must be divisible by 32, got {self.dims}")
        if self.max_jacobian_norm >= 1:
            raise ValueError("max_jacobian_norm must stay below 1 to keep deformations invertible")


@dataclass
class Subject:
    volume: Volume
    mask: LabelMask
    field: DisplacementField


def _smooth_noise(rng, dims, sigma):
    return ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")


def _template(spec: SynthSpec, rng):
    dims = spec.dims
    background = _smooth_noise(rng, dims, 6.0)
    background = 0.1 + 0.2 * (background - background.min()) / (np.ptp(background) + 1e-12)
    image = background.copy()
    labels = np.zeros(dims, dtype=np.uint8)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    levels = np.linspace(0.45, 0.95, spec.num_labels)
    rng.shuffle(levels)
    for k in range(1, spec.num_labels + 1):
        radii = rng.uniform(*spec.radius_range, size=3)
        center = [rng.uniform(0.3 * n, 0.7 * n) for n in dims]
        r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
        inside = r2 <= 1.0
        labels[inside] = k
        image[inside] = levels[k - 1] + 0.05 * (background[inside] - 0.2)
    return image.astype(np.float32), labels


def random_smooth_field(rng, spec: SynthSpec) -> np.ndarray:
    """Smooth ``(X, Y, Z, 3)`` displacement with peak ``amplitude`` and bounded gradient."""
    dims = spec.dims
    u = np.stack([_smooth_noise(rng, dims, spec.smoothness) for _ in range(3)], axis=-1)
    if spec.amplitude == 0:
        return np.zeros(dims + (3,), dtype=np.float32)
    u *= spec.amplitude / np.abs(u).max()
    grads = np.stack([np.stack(np.gradient(u[..., c]), -1) for c in range(3)], -2)
    frob = np.sqrt((grads ** 2).sum(axis=(-1, -2))).max()
    if frob > spec.max_jacobian_norm:
        u *= spec.max_jacobian_norm / frob
    return u.astype(np.float32)


def gen_synthetic(spec: SynthSpec, seed: int = 0) -> List[Subject]:
    """Subjects = one random template (smooth background + labelled ellipsoids),
    each deformed by its own smooth random field. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    image, labels = _template(spec, rng)
    subjects = []
    for _ in range(spec.n_subjects):
        u = random_smooth_field(rng, spec)
        with T.precision(32):
            warped = warp_trilinear(Tensor(image), Tensor(u)).data
        subjects.append(Subject(Volume(warped), LabelMask(warp_labels(labels, u), num_labels=spec.num_labels),
                                DisplacementField(u)))
    return subjects


# ------------------------------------------------------------------ pair sampling

class PairSampler:
    """Ordered (moving, fixed) pairs drawn without replacement, reshuffled every cycle."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 2:
            raise ValueError("need at least two subjects to form pairs")
        self.pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        self.rng = rng
        self._queue: List[Tuple[int, int]] = []

    def __next__(self):
        if not self._queue:
            order = self.rng.permutation(len(self.pairs))
            self._queue = [self.pairs[k] for k in order[::-1]]
        return self._queue.pop()

    def __iter__(self):
        return self


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_iterations: int = 300
    seed: int = 0
    checkpoint_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            variant = self.model.get("variant", "base")
            self.model = ModelConfig.from_variant(variant, **{k: v for k, v in self.model.items() if k != "variant"})
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "max_iterations": self.max_iterations,
                "seed": self.seed, "checkpoint_every": self.checkpoint_every,
                "model": self.model.to_dict(), "loss": self.loss.to_dict()}


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_checkpoint: Optional[str]):
        super().__init__(f"non-finite loss at iteration {iteration}; last checkpoint: {last_checkpoint}")
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint


@dataclass
class TraceRow:
    iteration: int
    total: float
    sim: float
    smooth: float
    seg: float


def params_to_numpy(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def params_from_numpy(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def write_trace(rows: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total", "sim", "smooth", "seg"])
        for r in rows:
            w.writerow([r.iteration, repr(r.total), repr(r.sim), repr(r.smooth), repr(r.seg)])


def _onehot(mask: LabelMask, K: int):
    return Tensor(stack_onehot(mask.values, range(1, K + 1)))


def train(cfg: TrainConfig, subjects: Sequence[Subject], out_dir=None, params=None,
          callback=None):
    """Run ``cfg.max_iterations`` Adam steps on randomly ordered subject pairs.

    Returns ``(params, trace)``. With ``out_dir`` set, checkpoints and
    ``loss_trace.csv`` are written there.
    """
    if len(subjects) < 2:
        raise ValueError("training needs at least two subjects")
    if params is None:
        params = init_params(cfg.model, cfg.seed)
    state = AdamState()
    sampler = PairSampler(len(subjects), np.random.default_rng(cfg.seed))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    K = max(s.mask.num_labels for s in subjects)
    trace: List[TraceRow] = []
    last_ckpt = None
    for it in range(1, cfg.max_iterations + 1):
        i, j = next(sampler)
        moving, fixed = subjects[i], subjects[j]
        m, f = Tensor(moving.volume.values), Tensor(fixed.volume.values)
        field_t = predict_field(m, f, cfg.model, params)
        seg_args = {}
        if cfg.loss.use_seg:
            seg_args = dict(fixed_onehot=_onehot(fixed.mask, K), moving_onehot=_onehot(moving.mask, K))
        loss, parts = total_loss(f, m, field_t, cfg.loss, **seg_args)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(it, last_ckpt)
        T.backward(loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, cfg.learning_rate)
        for p in params.values():
            p.grad = None
        row = TraceRow(it, value, parts["sim"].item(), parts["smooth"].item(),
                       parts["seg"].item() if "seg" in parts else 0.0)
        trace.append(row)
        del loss, parts, field_t
        log.info("iter %d total %.6f sim %.6f smooth %.6f", it, row.total, row.sim, row.smooth)
        if callback is not None:
            callback(row)
        if out is not None and (it % cfg.checkpoint_every == 0 or it == cfg.max_iterations):
            last_ckpt = str(out / f"ckpt_{it:06d}")
            save_checkpoint(params_to_numpy(params), last_ckpt, extra=cfg.model.to_dict())
            write_trace(trace, out / "loss_trace.csv")
    return params, trace


def evaluate_pairs(params, model_cfg: ModelConfig, subjects: Sequence[Subject],
                   pairs: Optional[Sequence[Tuple[int, int]]] = None) -> dict:
    """Mean Dice before/after registration and mean fold fraction over ordered pairs."""
    if pairs is None:
        pairs = [(i, j) for i in range(len(subjects)) for j in range(len(subjects)) if i != j]
    before, after, folds = [], [], []
    for i, j in pairs:
        mov, fix = subjects[i], subjects[j]
        u = predict_field(Tensor(mov.volume.values), Tensor(fix.volume.values), model_cfg, params).data
        labels = range(1, max(mov.mask.num_labels, fix.mask.num_labels) + 1)
        before.append(dice(mov.mask.values, fix.mask.values, labels)[1])
        after.append(dice(warp_labels(mov.mask.values, u), fix.mask.values, labels)[1])
        folds.append(jacobian_stats(u).fold_fraction)
    return {"dice_before": float(np.mean(before)), "dice_after": float(np.mean(after)),
            "fold_fraction": float(np.mean(folds)), "pairs": len(pairs)}

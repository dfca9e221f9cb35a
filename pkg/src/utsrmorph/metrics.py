"""Registration evaluation: Dice, HD95, Jacobian statistics, TRE, Wilcoxon rank-sum."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .tensor import ShapeError
from .volume_io import LandmarkSet, mm_to_voxel, voxel_to_mm
from .warp import sample_points


def _labels_of(mask):
    return getattr(mask, "values", mask)


def dice(a, b, labels: Optional[Iterable[int]] = None) -> Tuple[Dict[int, float], float]:
    """Per-label ``2|A&B| / (|A|+|B|)`` and their mean; an empty-empty label scores 1."""
    a, b = np.asarray(_labels_of(a)), np.asarray(_labels_of(b))
    if a.shape != b.shape:
        raise ShapeError(f"dice: mask shapes {a.shape} and {b.shape} differ")
    if labels is None:
        labels = sorted((set(np.unique(a)) | set(np.unique(b))) - {0})
    scores = {}
    for k in labels:
        ak, bk = a == k, b == k
        denom = int(ak.sum()) + int(bk.sum())
        scores[int(k)] = 1.0 if denom == 0 else 2.0 * int((ak & bk).sum()) / denom
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


_FACE = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def hd95(a, b, label: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled directed boundary distances a->b and b->a, in mm."""
    a, b = np.asarray(_labels_of(a)), np.asarray(_labels_of(b))
    if a.shape != b.shape:
        raise ShapeError(f"hd95: mask shapes {a.shape} and {b.shape} differ")
    ba, bb = boundary(a == label), boundary(b == label)
    if not ba.any():
        raise ValueError(f"hd95: label {label} absent from the first mask")
    if not bb.any():
        raise ValueError(f"hd95: label {label} absent from the second mask")
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    pooled = np.concatenate([dist_to_b[ba], dist_to_a[bb]])
    return float(np.percentile(pooled, 95))


@dataclass
class JacobianStats:
    fold_fraction: float
    sdlogj: float
    determinant: np.ndarray

    @property
    def fold_pct(self) -> float:
        return 100.0 * self.fold_fraction


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """``det(I + grad u)`` per voxel; central differences inside, one-sided at borders."""
    u = np.asarray(getattr(u, "values", u), dtype=np.float64)
    X, Y, Z, _ = u.shape
    J = np.zeros((X, Y, Z, 3, 3))
    for c in range(3):
        for axis in range(3):
            if u.shape[axis] > 1:
                J[..., c, axis] = np.gradient(u[..., c], axis=axis)
    J += np.eye(3)
    return np.linalg.det(J)


def jacobian_stats(u) -> JacobianStats:
    det = jacobian_determinant(u)
    positive = det > 0
    fold = float(1.0 - positive.mean())
    sd = float(np.std(np.log(det[positive]))) if positive.any() else 0.0
    return JacobianStats(fold, sd, det)


def map_landmarks(points_mm: np.ndarray, u, spacing) -> np.ndarray:
    """Apply ``phi(p) = p + u(p)`` to points in mm (``u`` sampled trilinearly, voxel units)."""
    u = np.asarray(getattr(u, "values", u))
    pv = mm_to_voxel(points_mm, spacing)
    return voxel_to_mm(pv + sample_points(u, pv), spacing)


def tre(reference: LandmarkSet, registered: LandmarkSet):
    """Per-landmark Euclidean error (mm) plus mean and sample standard deviation."""
    ref, reg = reference.as_dict(), registered.as_dict()
    if set(ref) != set(reg):
        only_ref = sorted(set(ref) - set(reg))
        only_reg = sorted(set(reg) - set(ref))
        raise ValueError(f"landmark names differ: only in first {only_ref}, only in second {only_reg}")
    errors = {n: float(np.linalg.norm(ref[n] - reg[n])) for n in reference.names}
    vals = np.array(list(errors.values()))
    sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return errors, float(vals.mean()), sd


# ------------------------------------------------------------------ Wilcoxon rank-sum

def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass
class RankSumResult:
    statistic: float  # rank sum of the first sample
    z: float          # standardized statistic (continuity corrected, tie-corrected variance)
    p_value: float
    method: str


def wilcoxon_rank_sum(x: Sequence[float], y: Sequence[float], method: str = "auto") -> RankSumResult:
    """Two-sided rank-sum test with midranks for ties.

    ``method="auto"`` enumerates all rank assignments when ``n + m <= 10`` and
    otherwise uses the normal approximation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ValueError("rank-sum test needs two non-empty samples")
    ranks = _midranks(np.concatenate([x, y]))
    w = float(ranks[:n].sum())
    N = n + m
    mean = n * (N + 1) / 2.0
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(((counts ** 3) - counts).sum())
    var = n * m / 12.0 * ((N + 1) - tie / (N * (N - 1))) if N > 1 else 0.0
    dev = w - mean
    if var > 0:
        corrected = max(abs(dev) - 0.5, 0.0)
        z = math.copysign(corrected / math.sqrt(var), dev) if dev else 0.0
    else:
        z = 0.0
    if method == "auto":
        method = "exact" if N <= 10 else "normal"
    if method == "exact":
        obs = abs(dev)
        hits = total = 0
        for combo in itertools.combinations(range(N), n):
            total += 1
            if abs(ranks[list(combo)].sum() - mean) >= obs - 1e-9:
                hits += 1
        p = hits / total
    elif method == "normal":
        p = 1.0 if var <= 0 else min(1.0, 2.0 * _normal_sf(abs(z)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return RankSumResult(w, z, p, method)


def evaluation_report(fixed_mask=None, warped_mask=None, field=None, labels=None, spacing=(1.0, 1.0, 1.0),
                      fixed_landmarks=None, moving_landmarks=None) -> dict:
    """Metrics as a JSON-ready dict (keys: dsc, dsc_mean, hd95, fold_pct, sdlogj, tre_mean, tre_sd)."""
    report: dict = {}
    if fixed_mask is not None and warped_mask is not None:
        scores, mean = dice(warped_mask, fixed_mask, labels)
        report["dsc"] = {str(k): v for k, v in scores.items()}
        report["dsc_mean"] = mean
        hd = {}
        for k in scores:
            try:
                hd[str(k)] = hd95(warped_mask, fixed_mask, k, spacing)
            except ValueError:
                hd[str(k)] = None
        valid = [v for v in hd.values() if v is not None]
        report["hd95"] = {"per_label": hd, "mean": float(np.mean(valid)) if valid else None}
    if field is not None:
        js = jacobian_stats(field)
        report["fold_pct"] = js.fold_pct
        report["sdlogj"] = js.sdlogj
    if fixed_landmarks is not None and moving_landmarks is not None and field is not None:
        mapped = LandmarkSet(list(fixed_landmarks.names),
                             map_landmarks(fixed_landmarks.positions, field, spacing))
        per, mean, sd = tre(moving_landmarks, mapped)
        report["tre"] = per
        report["tre_mean"] = mean
        report["tre_sd"] = sd
    return report

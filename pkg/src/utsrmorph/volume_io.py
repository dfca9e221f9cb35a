"""Volumes, displacement fields, label masks, landmarks and checkpoints on disk.

Grids are a JSON sidecar ``<name>.json`` plus a little-endian ``<name>.raw``.
The raw element for channel ``c`` at voxel ``(x, y, z)`` sits at linear index
``((c*Z + z)*Y + y)*X + x``. In memory every grid is a numpy array indexed
``[x, y, z, c]`` (channels last), which is the raw layout transposed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    """A file on disk does not match its declared layout."""


@dataclass
class Volume:
    values: np.ndarray  # (X, Y, Z) float32
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"volume must be 3-d with positive extents, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("volume contains non-finite values")
        _check_spacing(self.spacing)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.values.shape


@dataclass
class DisplacementField:
    """Per-voxel displacement ``u(p)`` in voxel units; ``phi(p) = p + u(p)``."""

    values: np.ndarray  # (X, Y, Z, 3) float32
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4 or self.values.shape[3] != 3:
            raise ValueError(f"displacement field must be (X, Y, Z, 3), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("displacement field contains non-finite values")
        _check_spacing(self.spacing)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.values.shape[:3]


@dataclass
class LabelMask:
    values: np.ndarray  # (X, Y, Z) uint8, 0 = background
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_labels: int = field(default=-1)

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 3:
            raise ValueError(f"label mask must be 3-d, got {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise ValueError("labels must fit in an unsigned byte")
        self.values = raw.astype(np.uint8)
        top = int(self.values.max()) if self.values.size else 0
        if self.num_labels < 0:
            self.num_labels = top
        elif top > self.num_labels:
            raise ValueError(f"label {top} outside declared set 0..{self.num_labels}")
        _check_spacing(self.spacing)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.values.shape


@dataclass
class LandmarkSet:
    names: List[str]
    positions: np.ndarray  # (n, 3) millimeters

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.names) != len(self.positions):
            raise ValueError("landmark names and positions differ in length")
        dupes = sorted({n for n in self.names if self.names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate landmark names: {', '.join(dupes)}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("landmark positions must be finite")

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {n: p for n, p in zip(self.names, self.positions)}

    def check_inside(self, dims, spacing):
        upper = (np.asarray(dims) - 1) * np.asarray(spacing)
        bad = [n for n, p in zip(self.names, self.positions) if np.any(p < 0) or np.any(p > upper)]
        if bad:
            raise ValueError(f"landmarks outside the volume: {', '.join(bad)}")


def _check_spacing(spacing):
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")


def voxel_to_mm(p_voxel, spacing) -> np.ndarray:
    _check_spacing(spacing)
    return np.asarray(p_voxel, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)


def mm_to_voxel(p_mm, spacing) -> np.ndarray:
    _check_spacing(spacing)
    return np.asarray(p_mm, dtype=np.float64) / np.asarray(spacing, dtype=np.float64)


# ------------------------------------------------------------------ raw grids

def _paths(path) -> Tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".raw")


def write_grid(array: np.ndarray, spacing, path, dtype: str) -> None:
    """Write a ``(X, Y, Z[, C])`` array as sidecar + raw."""
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}")
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[..., None]
    X, Y, Z, C = arr.shape
    header = {"dims": [X, Y, Z], "spacing": [float(s) for s in spacing], "channels": C, "dtype": dtype}
    meta, raw = _paths(path)
    meta.parent.mkdir(parents=True, exist_ok=True)
    meta.write_text(json.dumps(header, indent=1) + "\n")
    raw.write_bytes(np.ascontiguousarray(arr.transpose(3, 2, 1, 0)).astype(_DTYPES[dtype]).tobytes())


def read_grid(path):
    """Return ``(array[x, y, z, c], spacing, dtype)``."""
    meta, raw = _paths(path)
    try:
        header = json.loads(meta.read_text())
        dims = [int(v) for v in header["dims"]]
        spacing = tuple(float(v) for v in header["spacing"])
        channels = int(header["channels"])
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{meta}: malformed header ({exc})") from exc
    if dtype not in _DTYPES:
        raise FormatError(f"{meta}: unknown dtype {dtype!r}")
    if len(dims) != 3 or min(dims) < 1 or channels < 1:
        raise FormatError(f"{meta}: invalid dims {dims} / channels {channels}")
    blob = raw.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * channels * _DTYPES[dtype].itemsize
    if len(blob) != expected:
        raise FormatError(f"{raw}: expected {expected} bytes, found {len(blob)}")
    X, Y, Z = dims
    arr = np.frombuffer(blob, dtype=_DTYPES[dtype]).reshape(channels, Z, Y, X).transpose(3, 2, 1, 0)
    return np.ascontiguousarray(arr), spacing, dtype


def write_volume(v: Volume, path) -> None:
    write_grid(v.values, v.spacing, path, "f32")


def read_volume(path) -> Volume:
    arr, spacing, dtype = read_grid(path)
    if dtype != "f32" or arr.shape[3] != 1:
        raise FormatError(f"{path}: expected a 1-channel f32 volume, got {arr.shape[3]}-channel {dtype}")
    return Volume(arr[..., 0], spacing)


def write_field(u: DisplacementField, path) -> None:
    write_grid(u.values, u.spacing, path, "f32")


def read_field(path) -> DisplacementField:
    arr, spacing, dtype = read_grid(path)
    if dtype != "f32" or arr.shape[3] != 3:
        raise FormatError(f"{path}: expected a 3-channel f32 field, got {arr.shape[3]}-channel {dtype}")
    return DisplacementField(arr, spacing)


def write_mask(m: LabelMask, path) -> None:
    write_grid(m.values, m.spacing, path, "u8")


def read_mask(path) -> LabelMask:
    arr, spacing, dtype = read_grid(path)
    if dtype != "u8" or arr.shape[3] != 1:
        raise FormatError(f"{path}: expected a 1-channel u8 mask, got {arr.shape[3]}-channel {dtype}")
    return LabelMask(arr[..., 0], spacing)


# ------------------------------------------------------------------ landmarks

_LANDMARK_HEADER = ["name", "x_mm", "y_mm", "z_mm"]


def write_landmarks(lm: LandmarkSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LANDMARK_HEADER)
        for name, (x, y, z) in zip(lm.names, lm.positions):
            writer.writerow([name, repr(float(x)), repr(float(y)), repr(float(z))])


def read_landmarks(path) -> LandmarkSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != _LANDMARK_HEADER:
        raise FormatError(f"{path}: header must be {','.join(_LANDMARK_HEADER)}")
    names, positions = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            positions.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        names.append(row[0])
    return LandmarkSet(names, np.array(positions).reshape(-1, 3))


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(params: Dict[str, np.ndarray], path, extra: dict = None) -> None:
    """Write ``<path>.json`` (name, shape, byte offset per parameter) and ``<path>.bin``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"dtype": "f32", "total_bytes": offset, "parameters": entries}
    if extra:
        manifest["config"] = extra
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(params, config_or_None)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise FormatError(f"{path.with_suffix('.bin')}: expected {manifest['total_bytes']} bytes, "
                          f"found {len(blob)}")
    params = {}
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 4 * count
        if end > len(blob):
            raise FormatError(f"{path}: parameter {entry['name']} runs past the blob end")
        params[entry["name"]] = np.frombuffer(blob[entry["offset"]:end], dtype="<f4").reshape(shape).copy()
    return params, manifest.get("config")


def stack_onehot(mask: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """``(X, Y, Z)`` labels -> ``(X, Y, Z, K)`` float32 one-hot for the given labels."""
    return np.stack([(mask == k) for k in labels], axis=-1).astype(np.float32)

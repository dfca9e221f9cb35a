"""``utsrmorph`` command line: gen-synth, train, register, eval, gradcheck, plot.

Diagnostics go to stderr, data only to files. Exit status is 0 on success,
1 on runtime errors and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import tensor as T
from .losses import LossConfig
from .metrics import evaluation_report, jacobian_determinant
from .network import ModelConfig, register_pair
from .trainer import SynthSpec, Subject, TrainConfig, gen_synthetic, params_from_numpy, train
from .volume_io import (DisplacementField, FormatError, LabelMask, Volume, load_checkpoint, read_field,
                        read_landmarks, read_mask, read_volume, write_field, write_mask, write_volume)

log = logging.getLogger("utsrmorph")

DATASET_INDEX = "dataset.json"


class CliError(Exception):
    pass


# ------------------------------------------------------------------ config handling

def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"{path}: no such file")
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})")


def build_train_config(raw: dict, args) -> TrainConfig:
    """One JSON document ``{train..., model: {...}, loss: {...}}``; flags override fields."""
    raw = dict(raw)
    model = dict(raw.pop("model", {}))
    loss = dict(raw.pop("loss", {}))
    if "lambda" in loss:
        loss["lam"] = loss.pop("lambda")
    overrides = {"learning_rate": args.lr, "max_iterations": args.iterations, "seed": args.seed,
                 "checkpoint_every": args.checkpoint_every}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.variant is not None:
        model["variant"] = args.variant
    if args.upsample_mode is not None:
        model["upsample_mode"] = args.upsample_mode
    if args.sim is not None:
        loss["sim_kind"] = args.sim
    if args.lam is not None:
        loss["lam"] = args.lam
    unknown = set(raw) - {"learning_rate", "max_iterations", "seed", "checkpoint_every"}
    if unknown:
        raise CliError(f"unknown training keys: {sorted(unknown)}")
    variant = model.pop("variant", "base")
    try:
        return TrainConfig(model=ModelConfig.from_variant(variant, **model), loss=LossConfig(**loss), **raw)
    except TypeError as exc:
        raise CliError(f"invalid configuration: {exc}")


def _model_from_checkpoint(path):
    arrays, cfg = load_checkpoint(path)
    if cfg is None:
        raise CliError(f"{path}: checkpoint carries no model configuration")
    cfg = dict(cfg)
    variant = cfg.pop("variant", "base")
    return params_from_numpy(arrays), ModelConfig.from_variant(variant, **cfg)


# ------------------------------------------------------------------ dataset on disk

def write_dataset(subjects: List[Subject], out: Path, spec: SynthSpec, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(subjects):
        stem = f"subject_{i:03d}"
        write_volume(s.volume, out / f"{stem}_image")
        write_mask(s.mask, out / f"{stem}_labels")
        write_field(s.field, out / f"{stem}_deformation")
        names.append(stem)
    index = {"seed": seed, "num_labels": spec.num_labels, "dims": list(spec.dims), "subjects": names}
    (out / DATASET_INDEX).write_text(json.dumps(index, indent=1) + "\n")


def read_dataset(root: Path) -> List[Subject]:
    index = _load_json(root / DATASET_INDEX)
    subjects = []
    for stem in index["subjects"]:
        vol = read_volume(root / f"{stem}_image")
        mask = read_mask(root / f"{stem}_labels")
        mask.num_labels = max(mask.num_labels, int(index.get("num_labels", 0)))
        field_path = root / f"{stem}_deformation"
        field = read_field(field_path) if field_path.with_suffix(".json").exists() else \
            DisplacementField(np.zeros(vol.dims + (3,), np.float32))
        subjects.append(Subject(vol, mask, field))
    return subjects


# ------------------------------------------------------------------ commands

def cmd_gen_synth(args) -> int:
    raw = _load_json(args.spec) if args.spec else {}
    try:
        spec = SynthSpec(**raw)
    except TypeError as exc:
        raise CliError(f"invalid synthetic spec: {exc}")
    subjects = gen_synthetic(spec, args.seed)
    write_dataset(subjects, Path(args.out), spec, args.seed)
    log.info("wrote %d subjects to %s", len(subjects), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = build_train_config(_load_json(args.config) if args.config else {}, args)
    subjects = read_dataset(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    train(cfg, subjects, out_dir=out)
    log.info("training finished; checkpoints in %s", out)
    return 0


def cmd_register(args) -> int:
    params, cfg = _model_from_checkpoint(args.ckpt)
    moving, fixed = read_volume(args.moving), read_volume(args.fixed)
    field, warped = register_pair(T.Tensor(moving.values), T.Tensor(fixed.values), cfg, params)
    write_field(DisplacementField(field.data, fixed.spacing), args.out_field)
    write_volume(Volume(warped.data, fixed.spacing), args.out_warped)
    return 0


def cmd_eval(args) -> int:
    fixed = read_volume(args.fixed)
    warped = read_volume(args.warped)
    if fixed.dims != warped.dims:
        raise CliError(f"fixed {fixed.dims} and warped {warped.dims} extents differ")
    field = read_field(args.field) if args.field else None
    fixed_mask = read_mask(args.fixed_mask) if args.fixed_mask else None
    warped_mask = read_mask(args.warped_mask) if args.warped_mask else None
    if (fixed_mask is None) != (warped_mask is None):
        raise CliError("--fixed-mask and --warped-mask must be given together")
    lm_f = read_landmarks(args.landmarks_fixed) if args.landmarks_fixed else None
    lm_m = read_landmarks(args.landmarks_moving) if args.landmarks_moving else None
    if (lm_f is None) != (lm_m is None):
        raise CliError("--landmarks-fixed and --landmarks-moving must be given together")
    if lm_f is not None and field is None:
        raise CliError("landmark error needs --field")
    labels = None
    if fixed_mask is not None:
        top = max(fixed_mask.num_labels, warped_mask.num_labels)
        labels = range(1, top + 1)
    report = evaluation_report(fixed_mask, warped_mask, field, labels, fixed.spacing, lm_f, lm_m)
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_battery
    failed = 0
    for bits in args.precision:
        for result in run_battery(bits, seed=args.seed, network=not args.skip_network):
            print(result.line(), file=sys.stderr)
            failed += not result.passed
    print(f"{failed} failure(s)", file=sys.stderr)
    return 1 if failed else 0


def field_to_rgb(u_slice: np.ndarray, amplitude: Optional[float] = None) -> np.ndarray:
    """Map ``(H, W, 3)`` displacements linearly from ``[-a, a]`` to ``[0, 255]``; ``a = max |u|``."""
    a = float(np.abs(u_slice).max()) if amplitude is None else float(amplitude)
    if a == 0:
        scaled = np.full(u_slice.shape, 127.5)
    else:
        scaled = (u_slice / a + 1.0) * 127.5
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def jacobian_to_gray(det_slice: np.ndarray) -> np.ndarray:
    """Positive determinants scaled by the slice maximum to ``[1, 255]``; ``det <= 0`` is black."""
    out = np.zeros(det_slice.shape, dtype=np.uint8)
    pos = det_slice > 0
    if pos.any():
        top = float(det_slice[pos].max())
        out[pos] = np.clip(np.floor(det_slice[pos] / top * 254.0 + 0.5) + 1, 1, 255).astype(np.uint8)
    return out


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, np.uint8).tobytes())


def _slice(arr: np.ndarray, axis: str, k: int) -> np.ndarray:
    a = "xyz".index(axis)
    if not 0 <= k < arr.shape[a]:
        raise CliError(f"slice {k} outside 0..{arr.shape[a] - 1} on axis {axis}")
    s = np.take(arr, k, axis=a)
    return np.swapaxes(s, 0, 1)  # rows run along the second remaining axis


def cmd_plot(args) -> int:
    u = read_field(args.field).values
    base = Path(args.out)
    stem = base.with_suffix("") if base.suffix in (".ppm", ".pgm") else base
    rgb = field_to_rgb(_slice(u, args.axis, args.slice))
    det = _slice(jacobian_determinant(u), args.axis, args.slice)
    write_ppm(stem.with_suffix(".ppm"), rgb)
    write_pgm(stem.with_name(stem.name + "_jacobian").with_suffix(".pgm"), jacobian_to_gray(det))
    return 0


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="utsrmorph", description="Deformable registration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-synth", help="write a synthetic subject set")
    g.add_argument("--spec", help="JSON synthetic spec (defaults apply when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train on a subject directory")
    t.add_argument("--config", help="JSON config with train keys plus model/loss sections")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--variant", choices=["S", "base", "L"])
    t.add_argument("--upsample-mode", choices=["sr", "trilinear"])
    t.add_argument("--sim", choices=["lncc", "mi"])
    t.add_argument("--lam", type=float)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="predict a field and warp the moving volume")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--out-field", required=True)
    r.add_argument("--out-warped", required=True)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", help="metrics report as JSON")
    e.add_argument("--fixed", required=True)
    e.add_argument("--warped", required=True)
    e.add_argument("--field")
    e.add_argument("--fixed-mask")
    e.add_argument("--warped-mask")
    e.add_argument("--landmarks-fixed")
    e.add_argument("--landmarks-moving")
    e.add_argument("--out", help="report path (stdout when omitted)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--precision", type=int, nargs="+", choices=[32, 64], default=[32, 64])
    c.add_argument("--skip-network", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="PPM of a field slice and PGM of its Jacobian determinant")
    pl.add_argument("--field", required=True)
    pl.add_argument("--axis", choices=["x", "y", "z"], default="z")
    pl.add_argument("--slice", type=int, required=True)
    pl.add_argument("--out", required=True, help="output stem; writes <out>.ppm and <out>_jacobian.pgm")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, FormatError, ValueError, OSError) as exc:
        print(f"utsrmorph {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Time the compiled and numpy kernel backends on representative shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, backend) with the best wall time and the
speedup of the compiled core over the fallback.
"""
import argparse
import timeit

import numpy as np

from utsrmorph import _kernels


def _conv_case(rng, n=16, c=16, k=3):
    xp = rng.standard_normal((n + 2, n + 2, n + 2, c)).astype(np.float32)
    col = np.empty((n * n * n, k ** 3 * c), np.float32)
    gxp = np.zeros_like(xp)
    return xp, col, gxp, n, k


def _warp_case(rng, n=48, c=1):
    img = rng.standard_normal((n, n, n, c)).astype(np.float32)
    disp = (3 * rng.standard_normal((n, n, n, 3))).astype(np.float32)
    return img, disp


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    xp, col, gxp, n, k = _conv_case(rng)
    img, disp = _warp_case(rng)
    out = np.empty_like(img)
    gimg, gdisp = np.zeros_like(img), np.zeros_like(disp)
    gout = rng.standard_normal(img.shape).astype(np.float32)

    jobs = {
        "im2col 16^3x16 k3": lambda m: m.im2col(xp, k, 1, 0, n, n, n, col),
        "col2im 16^3x16 k3": lambda m: m.col2im(col, k, 1, 0, n, n, n, gxp),
        "trilinear fwd 48^3": lambda m: m.trilinear_forward(img, disp, out),
        "trilinear bwd 48^3": lambda m: m.trilinear_backward(img, disp, gout, gimg, gdisp, True, True),
    }
    impls = _kernels.implementations()
    if "cython" not in impls:
        print("compiled core not built; timing the numpy fallback only")
    print(f"{'kernel':<22s} {'backend':<8s} {'best ms':>9s} {'speedup':>8s}")
    for name, job in jobs.items():
        times = {}
        for backend, mod in impls.items():
            times[backend] = min(timeit.repeat(lambda: job(mod), number=1, repeat=args.repeat)) * 1e3
        for backend, ms in times.items():
            speed = f"{times['python'] / ms:7.1f}x" if backend == "cython" else ""
            print(f"{name:<22s} {backend:<8s} {ms:9.2f} {speed:>8s}")


if __name__ == "__main__":
    main()

"""Pure-numpy versions of the compiled kernels (same signatures, same semantics)."""
import numpy as np


def im2col(xp, k, stride, x0, x1, yo, zo, col):
    C = xp.shape[3]
    view = col.reshape(x1 - x0, yo, zo, k * k * k, C)
    t = 0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                view[:, :, :, t, :] = xp[
                    x0 * stride + i: (x1 - 1) * stride + i + 1: stride,
                    j: (yo - 1) * stride + j + 1: stride,
                    l: (zo - 1) * stride + l + 1: stride,
                ]
                t += 1


def col2im(col, k, stride, x0, x1, yo, zo, gxp):
    C = gxp.shape[3]
    view = col.reshape(x1 - x0, yo, zo, k * k * k, C)
    t = 0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gxp[
                    x0 * stride + i: (x1 - 1) * stride + i + 1: stride,
                    j: (yo - 1) * stride + j + 1: stride,
                    l: (zo - 1) * stride + l + 1: stride,
                ] += view[:, :, :, t, :]
                t += 1


def _cells(disp, shape):
    """Per-axis lower corner, fractional offset and clamp derivative."""
    dtype = disp.dtype
    out = []
    for axis, n in enumerate(shape):
        base = np.arange(n, dtype=dtype).reshape([-1 if a == axis else 1 for a in range(3)])
        q = base + disp[..., axis]
        inside = ((q >= 0) & (q <= n - 1)).astype(dtype)
        q = np.clip(q, 0, n - 1)
        if n == 1:
            i0 = np.zeros(q.shape, dtype=np.intp)
            out.append((i0, i0, np.zeros_like(q), np.zeros_like(q)))
            continue
        i0 = np.clip(np.ceil(q).astype(np.intp) - 1, 0, n - 2)
        frac = q - i0.astype(dtype)
        out.append((i0, i0 + 1, frac, inside))
    return out


def trilinear_forward(img, disp, out):
    (ix, jx, fx, _), (iy, jy, fy, _), (iz, jz, fz, _) = _cells(disp, img.shape[:3])
    ex, ey, ez = 1 - fx, 1 - fy, 1 - fz
    corners = (
        (ix, iy, iz, ex * ey * ez), (ix, iy, jz, ex * ey * fz),
        (ix, jy, iz, ex * fy * ez), (ix, jy, jz, ex * fy * fz),
        (jx, iy, iz, fx * ey * ez), (jx, iy, jz, fx * ey * fz),
        (jx, jy, iz, fx * fy * ez), (jx, jy, jz, fx * fy * fz),
    )
    acc = None
    for a, b, c, w in corners:
        term = w[..., None] * img[a, b, c]
        acc = term if acc is None else acc + term
    out[...] = acc


def trilinear_backward(img, disp, gout, gimg, gdisp, want_img, want_disp):
    X, Y, Z, C = img.shape
    (ix, jx, fx, dx), (iy, jy, fy, dy), (iz, jz, fz, dz) = _cells(disp, (X, Y, Z))
    ex, ey, ez = 1 - fx, 1 - fy, 1 - fz
    if want_img:
        corners = (
            (ix, iy, iz, ex * ey * ez), (ix, iy, jz, ex * ey * fz),
            (ix, jy, iz, ex * fy * ez), (ix, jy, jz, ex * fy * fz),
            (jx, iy, iz, fx * ey * ez), (jx, iy, jz, fx * ey * fz),
            (jx, jy, iz, fx * fy * ez), (jx, jy, jz, fx * fy * fz),
        )
        lin = np.concatenate([((a * Y + b) * Z + c).ravel() for a, b, c, _ in corners])
        flat = gimg.reshape(-1, C)
        for ch in range(C):
            g = gout[..., ch]
            weights = np.concatenate([(w * g).ravel() for _, _, _, w in corners])
            flat[:, ch] += np.bincount(lin, weights=weights, minlength=X * Y * Z).astype(gimg.dtype)
    if want_disp:
        v = {}
        for kx, ax in (("0", ix), ("1", jx)):
            for ky, ay in (("0", iy), ("1", jy)):
                for kz, az in (("0", iz), ("1", jz)):
                    v[kx + ky + kz] = img[ax, ay, az]
        g = gout
        sx = (ey * ez)[..., None] * (v["100"] - v["000"]) + (ey * fz)[..., None] * (v["101"] - v["001"]) \
            + (fy * ez)[..., None] * (v["110"] - v["010"]) + (fy * fz)[..., None] * (v["111"] - v["011"])
        sy = (ex * ez)[..., None] * (v["010"] - v["000"]) + (ex * fz)[..., None] * (v["011"] - v["001"]) \
            + (fx * ez)[..., None] * (v["110"] - v["100"]) + (fx * fz)[..., None] * (v["111"] - v["101"])
        sz = (ex * ey)[..., None] * (v["001"] - v["000"]) + (ex * fy)[..., None] * (v["011"] - v["010"]) \
            + (fx * ey)[..., None] * (v["101"] - v["100"]) + (fx * fy)[..., None] * (v["111"] - v["110"])
        gdisp[..., 0] = (g * sx).sum(-1) * dx
        gdisp[..., 1] = (g * sy).sum(-1) * dy
        gdisp[..., 2] = (g * sz).sum(-1) * dz

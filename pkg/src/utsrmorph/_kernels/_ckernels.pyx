# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution lowering and trilinear sampling.

Every routine here has a numpy twin in :mod:`utsrmorph._kernels._pykernels`
with identical semantics; :mod:`utsrmorph._kernels` picks one at import.
"""
from libc.math cimport ceil

ctypedef fused real:
    float
    double


cdef inline void _cell(real q, Py_ssize_t n, Py_ssize_t* i0, real* frac,
                       real* dq) noexcept nogil:
    # clamp-to-border, left cell at integer coordinates
    cdef Py_ssize_t i
    dq[0] = 1
    if q < 0:
        q = 0
        dq[0] = 0
    elif q > n - 1:
        q = n - 1
        dq[0] = 0
    if n == 1:
        i0[0] = 0
        frac[0] = 0
        dq[0] = 0
        return
    i = <Py_ssize_t>ceil(q) - 1
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    i0[0] = i
    frac[0] = q - i


def im2col(real[:, :, :, ::1] xp, int k, int stride, int x0, int x1,
           int yo, int zo, real[:, ::1] col):
    cdef Py_ssize_t C = xp.shape[3]
    cdef Py_ssize_t ox, oy, oz, i, j, l, c, row = 0, base
    with nogil:
        for ox in range(x0, x1):
            for oy in range(yo):
                for oz in range(zo):
                    base = 0
                    for i in range(k):
                        for j in range(k):
                            for l in range(k):
                                for c in range(C):
                                    col[row, base + c] = xp[ox * stride + i, oy * stride + j,
                                                            oz * stride + l, c]
                                base = base + C
                    row = row + 1


def col2im(real[:, ::1] col, int k, int stride, int x0, int x1, int yo, int zo,
           real[:, :, :, ::1] gxp):
    cdef Py_ssize_t C = gxp.shape[3]
    cdef Py_ssize_t ox, oy, oz, i, j, l, c, row = 0, base
    with nogil:
        for ox in range(x0, x1):
            for oy in range(yo):
                for oz in range(zo):
                    base = 0
                    for i in range(k):
                        for j in range(k):
                            for l in range(k):
                                for c in range(C):
                                    gxp[ox * stride + i, oy * stride + j,
                                        oz * stride + l, c] += col[row, base + c]
                                base = base + C
                    row = row + 1


def trilinear_forward(real[:, :, :, ::1] img, real[:, :, :, ::1] disp,
                      real[:, :, :, ::1] out):
    cdef Py_ssize_t X = img.shape[0], Y = img.shape[1], Z = img.shape[2]
    cdef Py_ssize_t C = img.shape[3]
    cdef Py_ssize_t x, y, z, c, ix, iy, iz
    cdef real fx, fy, fz, gx, gy, gz, w000, w001, w010, w011, w100, w101, w110, w111
    with nogil:
        for x in range(X):
            for y in range(Y):
                for z in range(Z):
                    _cell(x + disp[x, y, z, 0], X, &ix, &fx, &gx)
                    _cell(y + disp[x, y, z, 1], Y, &iy, &fy, &gy)
                    _cell(z + disp[x, y, z, 2], Z, &iz, &fz, &gz)
                    w000 = (1 - fx) * (1 - fy) * (1 - fz)
                    w001 = (1 - fx) * (1 - fy) * fz
                    w010 = (1 - fx) * fy * (1 - fz)
                    w011 = (1 - fx) * fy * fz
                    w100 = fx * (1 - fy) * (1 - fz)
                    w101 = fx * (1 - fy) * fz
                    w110 = fx * fy * (1 - fz)
                    w111 = fx * fy * fz
                    for c in range(C):
                        out[x, y, z, c] = (
                            w000 * img[ix, iy, iz, c]
                            + w001 * img[ix, iy, iz + (Z > 1), c]
                            + w010 * img[ix, iy + (Y > 1), iz, c]
                            + w011 * img[ix, iy + (Y > 1), iz + (Z > 1), c]
                            + w100 * img[ix + (X > 1), iy, iz, c]
                            + w101 * img[ix + (X > 1), iy, iz + (Z > 1), c]
                            + w110 * img[ix + (X > 1), iy + (Y > 1), iz, c]
                            + w111 * img[ix + (X > 1), iy + (Y > 1), iz + (Z > 1), c]
                        )


def trilinear_backward(real[:, :, :, ::1] img, real[:, :, :, ::1] disp,
                       real[:, :, :, ::1] gout, real[:, :, :, ::1] gimg,
                       real[:, :, :, ::1] gdisp, bint want_img, bint want_disp):
    cdef Py_ssize_t X = img.shape[0], Y = img.shape[1], Z = img.shape[2]
    cdef Py_ssize_t C = img.shape[3]
    cdef Py_ssize_t x, y, z, c, ix, iy, iz, jx, jy, jz
    cdef real fx, fy, fz, gx, gy, gz, g
    cdef real v000, v001, v010, v011, v100, v101, v110, v111
    cdef real sx, sy, sz
    with nogil:
        for x in range(X):
            for y in range(Y):
                for z in range(Z):
                    _cell(x + disp[x, y, z, 0], X, &ix, &fx, &gx)
                    _cell(y + disp[x, y, z, 1], Y, &iy, &fy, &gy)
                    _cell(z + disp[x, y, z, 2], Z, &iz, &fz, &gz)
                    jx = ix + (X > 1)
                    jy = iy + (Y > 1)
                    jz = iz + (Z > 1)
                    sx = 0
                    sy = 0
                    sz = 0
                    for c in range(C):
                        g = gout[x, y, z, c]
                        if want_img:
                            gimg[ix, iy, iz, c] += (1 - fx) * (1 - fy) * (1 - fz) * g
                            gimg[ix, iy, jz, c] += (1 - fx) * (1 - fy) * fz * g
                            gimg[ix, jy, iz, c] += (1 - fx) * fy * (1 - fz) * g
                            gimg[ix, jy, jz, c] += (1 - fx) * fy * fz * g
                            gimg[jx, iy, iz, c] += fx * (1 - fy) * (1 - fz) * g
                            gimg[jx, iy, jz, c] += fx * (1 - fy) * fz * g
                            gimg[jx, jy, iz, c] += fx * fy * (1 - fz) * g
                            gimg[jx, jy, jz, c] += fx * fy * fz * g
                        if want_disp:
                            v000 = img[ix, iy, iz, c]
                            v001 = img[ix, iy, jz, c]
                            v010 = img[ix, jy, iz, c]
                            v011 = img[ix, jy, jz, c]
                            v100 = img[jx, iy, iz, c]
                            v101 = img[jx, iy, jz, c]
                            v110 = img[jx, jy, iz, c]
                            v111 = img[jx, jy, jz, c]
                            sx += g * ((1 - fy) * (1 - fz) * (v100 - v000)
                                       + (1 - fy) * fz * (v101 - v001)
                                       + fy * (1 - fz) * (v110 - v010)
                                       + fy * fz * (v111 - v011))
                            sy += g * ((1 - fx) * (1 - fz) * (v010 - v000)
                                       + (1 - fx) * fz * (v011 - v001)
                                       + fx * (1 - fz) * (v110 - v100)
                                       + fx * fz * (v111 - v101))
                            sz += g * ((1 - fx) * (1 - fy) * (v001 - v000)
                                       + (1 - fx) * fy * (v011 - v010)
                                       + fx * (1 - fy) * (v101 - v100)
                                       + fx * fy * (v111 - v110))
                    if want_disp:
                        gdisp[x, y, z, 0] = sx * gx
                        gdisp[x, y, z, 1] = sy * gy
                        gdisp[x, y, z, 2] = sz * gz

"""Compiled direct-loop convolution kernels.

The engine's reference path is im2col + GEMM in plain numpy; when numba
is importable these hand-written loop kernels take over for the shapes
the model actually uses (3x3 at stride 1/2, larger odd kernels at
stride 1), cutting the 9x patch-matrix traffic that dominates on a
single core. Stride-2 kernels split inputs into parity phases so every
inner loop runs at unit stride and vectorizes. Each path is
deterministic run-to-run; 1x1 kernels stay on the GEMM path, which is
already a plain matrix product.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ----------------------------------------------------------------------
# stride-1 kernels
# ----------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _fwd_s1_k3(xp, w, bias, ho, wo, relu=False):
    b, c, hp, wp = xp.shape
    o = w.shape[0]
    out = np.empty((b, o, ho, wo), np.float32)
    for n in range(b):
        for oc in range(o):
            acc = np.full((ho, wo), bias[oc], np.float32)
            for ic in range(c):
                w00 = w[oc, ic, 0, 0]; w01 = w[oc, ic, 0, 1]; w02 = w[oc, ic, 0, 2]
                w10 = w[oc, ic, 1, 0]; w11 = w[oc, ic, 1, 1]; w12 = w[oc, ic, 1, 2]
                w20 = w[oc, ic, 2, 0]; w21 = w[oc, ic, 2, 1]; w22 = w[oc, ic, 2, 2]
                plane = xp[n, ic]
                for i in range(ho):
                    r0 = plane[i]; r1 = plane[i + 1]; r2 = plane[i + 2]
                    arow = acc[i]
                    for j in range(wo):
                        arow[j] += (w00 * r0[j] + w01 * r0[j + 1] + w02 * r0[j + 2]
                                    + w10 * r1[j] + w11 * r1[j + 1] + w12 * r1[j + 2]
                                    + w20 * r2[j] + w21 * r2[j + 1] + w22 * r2[j + 2])
            if relu:
                for i in range(ho):
                    arow = acc[i]
                    for j in range(wo):
                        if arow[j] < 0.0:
                            arow[j] = 0.0
            out[n, oc] = acc
    return out


@njit(cache=True, fastmath=True)
def _fwd_s1_generic(xp, w, bias, ho, wo, relu=False):
    b, c, hp, wp = xp.shape
    o, _, k, _ = w.shape
    out = np.empty((b, o, ho, wo), np.float32)
    for n in range(b):
        for oc in range(o):
            acc = np.full((ho, wo), bias[oc], np.float32)
            for ic in range(c):
                plane = xp[n, ic]
                for ki in range(k):
                    for kj in range(k):
                        wv = w[oc, ic, ki, kj]
                        for i in range(ho):
                            row = plane[i + ki]
                            arow = acc[i]
                            for j in range(wo):
                                arow[j] += wv * row[j + kj]
            if relu:
                for i in range(ho):
                    arow = acc[i]
                    for j in range(wo):
                        if arow[j] < 0.0:
                            arow[j] = 0.0
            out[n, oc] = acc
    return out


@njit(cache=True, fastmath=True)
def _wgrad_s1_k3(xp, g):
    b, c, hp, wp = xp.shape
    o, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    gw = np.zeros((o, c, 3, 3), np.float32)
    for n in range(b):
        for oc in range(o):
            gplane = g[n, oc]
            for ic in range(c):
                plane = xp[n, ic]
                a00 = np.float32(0.0); a01 = np.float32(0.0); a02 = np.float32(0.0)
                a10 = np.float32(0.0); a11 = np.float32(0.0); a12 = np.float32(0.0)
                a20 = np.float32(0.0); a21 = np.float32(0.0); a22 = np.float32(0.0)
                for i in range(ho):
                    s = gplane[i]
                    r0 = plane[i]; r1 = plane[i + 1]; r2 = plane[i + 2]
                    for j in range(wo):
                        sv = s[j]
                        a00 += sv * r0[j]; a01 += sv * r0[j + 1]; a02 += sv * r0[j + 2]
                        a10 += sv * r1[j]; a11 += sv * r1[j + 1]; a12 += sv * r1[j + 2]
                        a20 += sv * r2[j]; a21 += sv * r2[j + 1]; a22 += sv * r2[j + 2]
                gw[oc, ic, 0, 0] += a00; gw[oc, ic, 0, 1] += a01; gw[oc, ic, 0, 2] += a02
                gw[oc, ic, 1, 0] += a10; gw[oc, ic, 1, 1] += a11; gw[oc, ic, 1, 2] += a12
                gw[oc, ic, 2, 0] += a20; gw[oc, ic, 2, 1] += a21; gw[oc, ic, 2, 2] += a22
    return gw


@njit(cache=True, fastmath=True)
def _wgrad_s1_generic(xp, g, k):
    b, c, hp, wp = xp.shape
    o, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    gw = np.zeros((o, c, k, k), np.float32)
    for n in range(b):
        for oc in range(o):
            gplane = g[n, oc]
            for ic in range(c):
                plane = xp[n, ic]
                for ki in range(k):
                    for kj in range(k):
                        acc = np.float32(0.0)
                        for i in range(ho):
                            s = gplane[i]
                            row = plane[i + ki]
                            for j in range(wo):
                                acc += s[j] * row[j + kj]
                        gw[oc, ic, ki, kj] += acc
    return gw


# ----------------------------------------------------------------------
# stride-2 kernels (parity-phase form: unit-stride inner loops)
# ----------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _phase_split(xp):
    b, c, hp, wp = xp.shape
    he = (hp + 1) // 2
    we = (wp + 1) // 2
    phases = np.zeros((2, 2, b, c, he, we), np.float32)
    for pi in range(2):
        for pj in range(2):
            for n in range(b):
                for ic in range(c):
                    for i in range(pi, hp, 2):
                        src = xp[n, ic, i]
                        dst = phases[pi, pj, n, ic, (i - pi) // 2]
                        for j in range(pj, wp, 2):
                            dst[(j - pj) // 2] = src[j]
    return phases


@njit(cache=True, fastmath=True)
def _fwd_s2_k3(phases, w, bias, ho, wo, relu=False):
    b, c = phases.shape[2], phases.shape[3]
    o = w.shape[0]
    out = np.empty((b, o, ho, wo), np.float32)
    for n in range(b):
        for oc in range(o):
            acc = np.full((ho, wo), bias[oc], np.float32)
            for ic in range(c):
                w00 = w[oc, ic, 0, 0]; w01 = w[oc, ic, 0, 1]; w02 = w[oc, ic, 0, 2]
                w10 = w[oc, ic, 1, 0]; w11 = w[oc, ic, 1, 1]; w12 = w[oc, ic, 1, 2]
                w20 = w[oc, ic, 2, 0]; w21 = w[oc, ic, 2, 1]; w22 = w[oc, ic, 2, 2]
                ee = phases[0, 0, n, ic]; eo = phases[0, 1, n, ic]
                oe = phases[1, 0, n, ic]; oo = phases[1, 1, n, ic]
                for i in range(ho):
                    # rows 2i, 2i+1, 2i+2; cols 2j, 2j+1, 2j+2
                    e0 = ee[i]; o0 = eo[i]          # row 2i: even/odd cols
                    e1 = oe[i]; o1 = oo[i]          # row 2i+1
                    e2 = ee[i + 1]; o2 = eo[i + 1]  # row 2i+2
                    arow = acc[i]
                    for j in range(wo):
                        arow[j] += (w00 * e0[j] + w01 * o0[j] + w02 * e0[j + 1]
                                    + w10 * e1[j] + w11 * o1[j] + w12 * e1[j + 1]
                                    + w20 * e2[j] + w21 * o2[j] + w22 * e2[j + 1])
            if relu:
                for i in range(ho):
                    arow = acc[i]
                    for j in range(wo):
                        if arow[j] < 0.0:
                            arow[j] = 0.0
            out[n, oc] = acc
    return out


@njit(cache=True, fastmath=True)
def _wgrad_s2_k3(phases, g):
    b, c = phases.shape[2], phases.shape[3]
    o, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    gw = np.zeros((o, c, 3, 3), np.float32)
    for n in range(b):
        for oc in range(o):
            gplane = g[n, oc]
            for ic in range(c):
                ee = phases[0, 0, n, ic]; eo = phases[0, 1, n, ic]
                oe = phases[1, 0, n, ic]; oo = phases[1, 1, n, ic]
                a00 = np.float32(0.0); a01 = np.float32(0.0); a02 = np.float32(0.0)
                a10 = np.float32(0.0); a11 = np.float32(0.0); a12 = np.float32(0.0)
                a20 = np.float32(0.0); a21 = np.float32(0.0); a22 = np.float32(0.0)
                for i in range(ho):
                    s = gplane[i]
                    e0 = ee[i]; o0 = eo[i]
                    e1 = oe[i]; o1 = oo[i]
                    e2 = ee[i + 1]; o2 = eo[i + 1]
                    for j in range(wo):
                        sv = s[j]
                        a00 += sv * e0[j]; a01 += sv * o0[j]; a02 += sv * e0[j + 1]
                        a10 += sv * e1[j]; a11 += sv * o1[j]; a12 += sv * e1[j + 1]
                        a20 += sv * e2[j]; a21 += sv * o2[j]; a22 += sv * e2[j + 1]
                gw[oc, ic, 0, 0] += a00; gw[oc, ic, 0, 1] += a01; gw[oc, ic, 0, 2] += a02
                gw[oc, ic, 1, 0] += a10; gw[oc, ic, 1, 1] += a11; gw[oc, ic, 1, 2] += a12
                gw[oc, ic, 2, 0] += a20; gw[oc, ic, 2, 1] += a21; gw[oc, ic, 2, 2] += a22
    return gw


@njit(cache=True, fastmath=True)
def _igrad_s2_k3(g, w, hp, wp):
    """Scatter into parity-phase buffers (unit stride), then interleave."""
    b, o, ho, wo = g.shape
    c = w.shape[1]
    he = (hp + 1) // 2
    we = (wp + 1) // 2
    phases = np.zeros((2, 2, b, c, he, we), np.float32)
    for n in range(b):
        for ic in range(c):
            for oc in range(o):
                w00 = w[oc, ic, 0, 0]; w01 = w[oc, ic, 0, 1]; w02 = w[oc, ic, 0, 2]
                w10 = w[oc, ic, 1, 0]; w11 = w[oc, ic, 1, 1]; w12 = w[oc, ic, 1, 2]
                w20 = w[oc, ic, 2, 0]; w21 = w[oc, ic, 2, 1]; w22 = w[oc, ic, 2, 2]
                ee = phases[0, 0, n, ic]; eo = phases[0, 1, n, ic]
                oe = phases[1, 0, n, ic]; oo = phases[1, 1, n, ic]
                for i in range(ho):
                    s = g[n, oc, i]
                    e0 = ee[i]; o0 = eo[i]
                    e1 = oe[i]; o1 = oo[i]
                    e2 = ee[i + 1]; o2 = eo[i + 1]
                    for j in range(wo):
                        sv = s[j]
                        e0[j] += w00 * sv; o0[j] += w01 * sv; e0[j + 1] += w02 * sv
                        e1[j] += w10 * sv; o1[j] += w11 * sv; e1[j + 1] += w12 * sv
                        e2[j] += w20 * sv; o2[j] += w21 * sv; e2[j + 1] += w22 * sv
    gxp = np.empty((b, c, hp, wp), np.float32)
    for n in range(b):
        for ic in range(c):
            for i in range(hp):
                dst = gxp[n, ic, i]
                src_e = phases[i % 2, 0, n, ic, i // 2]
                src_o = phases[i % 2, 1, n, ic, i // 2]
                for j in range(0, wp - 1, 2):
                    dst[j] = src_e[j // 2]
                    dst[j + 1] = src_o[j // 2]
                if wp % 2 == 1:
                    dst[wp - 1] = src_e[(wp - 1) // 2]
    return gxp


@njit(cache=True, fastmath=True)
def _chan_pool_pair(x):
    """Stacked (mean; max) over the channel axis plus the argmax plane."""
    b, c, h, w = x.shape
    out = np.empty((b, 2, h, w), np.float32)
    arg = np.zeros((b, h, w), np.int32)
    inv = np.float32(1.0 / c)
    for n in range(b):
        avg = out[n, 0]
        mx = out[n, 1]
        am = arg[n]
        for i in range(h):
            row0 = x[n, 0, i]
            arow = avg[i]
            mrow = mx[i]
            for j in range(w):
                arow[j] = row0[j]
                mrow[j] = row0[j]
            for ic in range(1, c):
                row = x[n, ic, i]
                for j in range(w):
                    arow[j] += row[j]
                    if row[j] > mrow[j]:
                        mrow[j] = row[j]
                        am[i, j] = ic
            for j in range(w):
                arow[j] *= inv
    return out, arg


@njit(cache=True, fastmath=True)
def _pad2d(x, top, bottom, left, right):
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + top + bottom, w + left + right), np.float32)
    for n in range(b):
        for ic in range(c):
            for i in range(h):
                dst = out[n, ic, i + top]
                src = x[n, ic, i]
                for j in range(w):
                    dst[j + left] = src[j]
    return out


@njit(cache=True, fastmath=True)
def _bilinear_rotate(img, cos_t, sin_t):
    h, w = img.shape
    out = np.empty((h, w), np.float32)
    cy = (h - 1) * np.float32(0.5)
    cx = (w - 1) * np.float32(0.5)
    for y in range(h):
        dy = np.float32(y) - cy
        for x in range(w):
            dx = np.float32(x) - cx
            sy = cos_t * dy + sin_t * dx + cy
            sx = -sin_t * dy + cos_t * dx + cx
            y0 = int(np.floor(sy)); x0 = int(np.floor(sx))
            wy = sy - y0; wx = sx - x0
            acc = np.float32(0.0)
            for oy in range(2):
                yy = y0 + oy
                if 0 <= yy < h:
                    fy = (1.0 - wy) if oy == 0 else wy
                    for ox in range(2):
                        xx = x0 + ox
                        if 0 <= xx < w:
                            fx = (1.0 - wx) if ox == 0 else wx
                            acc += np.float32(fy * fx) * img[yy, xx]
            out[y, x] = acc
    return out


@njit(cache=True, fastmath=True)
def _bilinear_resize(img, out_h, out_w):
    h, w = img.shape
    out = np.empty((out_h, out_w), np.float32)
    sy_scale = np.float32(h - 1) / np.float32(out_h - 1) if out_h > 1 else np.float32(0.0)
    sx_scale = np.float32(w - 1) / np.float32(out_w - 1) if out_w > 1 else np.float32(0.0)
    for y in range(out_h):
        sy = np.float32(y) * sy_scale
        y0 = int(np.floor(sy))
        if y0 >= h - 1:
            y0 = h - 2 if h > 1 else 0
        wy = sy - y0
        for x in range(out_w):
            sx = np.float32(x) * sx_scale
            x0 = int(np.floor(sx))
            if x0 >= w - 1:
                x0 = w - 2 if w > 1 else 0
            wx = sx - x0
            y1 = y0 + 1 if h > 1 else y0
            x1 = x0 + 1 if w > 1 else x0
            top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
            bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
            out[y, x] = top * (1.0 - wy) + bot * wy
    return out


@njit(cache=True, fastmath=True)
def _blur_separable(img, kernel):
    h, w = img.shape
    radius = kernel.size // 2
    tmp = np.empty((h, w), np.float32)
    out = np.empty((h, w), np.float32)
    for y in range(h):
        for x in range(w):
            acc = np.float32(0.0)
            for t in range(-radius, radius + 1):
                yy = y + t
                if yy < 0:
                    yy = 0
                elif yy >= h:
                    yy = h - 1
                acc += kernel[t + radius] * img[yy, x]
            tmp[y, x] = acc
    for y in range(h):
        for x in range(w):
            acc = np.float32(0.0)
            for t in range(-radius, radius + 1):
                xx = x + t
                if xx < 0:
                    xx = 0
                elif xx >= w:
                    xx = w - 1
                acc += kernel[t + radius] * tmp[y, xx]
            out[y, x] = acc
    return out


def warmup() -> None:
    """Trigger JIT compilation on tiny shapes (cached across processes)."""
    if not HAVE_NUMBA:
        return
    x = np.zeros((1, 1, 6, 6), np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    b = np.zeros(1, np.float32)
    out = _fwd_s1_k3(x, w, b, 4, 4)
    _fwd_s1_k3(x, w, b, 4, 4, True)
    _fwd_s1_generic(x, w, b, 4, 4)
    _fwd_s1_generic(x, w, b, 4, 4, True)
    _wgrad_s1_k3(x, out)
    _wgrad_s1_generic(x, out, 3)
    ph = _phase_split(x)
    out2 = _fwd_s2_k3(ph, w, b, 2, 2)
    _fwd_s2_k3(ph, w, b, 2, 2, True)
    _wgrad_s2_k3(ph, out2)
    _igrad_s2_k3(out2, w, 6, 6)
    _chan_pool_pair(x)
    _pad2d(x, 1, 2, 1, 2)
    img = np.zeros((4, 4), np.float32)
    _bilinear_rotate(img, np.float32(1.0), np.float32(0.0))
    _bilinear_resize(img, 3, 3)
    _blur_separable(img, np.ones(3, np.float32) / np.float32(3.0))

"""Compiled inner loops for slide rendering, crop features and photometric augmentation."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# --- value noise / slide rendering --------------------------------------------------------


@njit(cache=True, inline="always")
def _fade(t):
    return t * t * (3.0 - 2.0 * t)


@njit(cache=True, inline="always")
def _lerp(a, b, t):
    return a + (b - a) * t


@njit(cache=True)
def value_noise_block(lattice, spacing, x0, y0, width, height):
    out = np.empty((height, width), dtype=np.float64)
    for r in range(height):
        y = y0 + r
        iy = y // spacing
        ty = _fade((y % spacing) / spacing)
        for c in range(width):
            x = x0 + c
            ix = x // spacing
            tx = _fade((x % spacing) / spacing)
            top = _lerp(lattice[iy, ix], lattice[iy, ix + 1], tx)
            bot = _lerp(lattice[iy + 1, ix], lattice[iy + 1, ix + 1], tx)
            out[r, c] = _lerp(top, bot, ty)
    return out


@njit(cache=True)
def compose_block(out, fine, fine_s, stain, stain_s, nodule, contrast, x0, y0, lut):
    """out[r, c] = lut[q(T)] with T = fine + stain - contrast * nodule at pixel (x0+c, y0+r)."""
    height, width = out.shape[0], out.shape[1]
    has_nodule = nodule.shape[0] > 0
    for r in range(height):
        y = y0 + r
        fy = y // fine_s
        fty = _fade((y % fine_s) / fine_s)
        sy = y // stain_s
        sty = _fade((y % stain_s) / stain_s)
        for c in range(width):
            x = x0 + c
            fx = x // fine_s
            ftx = _fade((x % fine_s) / fine_s)
            v = _lerp(_lerp(fine[fy, fx], fine[fy, fx + 1], ftx),
                      _lerp(fine[fy + 1, fx], fine[fy + 1, fx + 1], ftx), fty)
            sx = x // stain_s
            stx = _fade((x % stain_s) / stain_s)
            v += _lerp(_lerp(stain[sy, sx], stain[sy, sx + 1], stx),
                       _lerp(stain[sy + 1, sx], stain[sy + 1, sx + 1], stx), sty)
            if has_nodule:
                v -= contrast * nodule[r, c]
            q = int(math.floor(v * 16.0 + 4096.5))
            if q < 0:
                q = 0
            elif q > 8191:
                q = 8191
            out[r, c, 0] = lut[q, 0]
            out[r, c, 1] = lut[q, 1]
            out[r, c, 2] = lut[q, 2]


# --- crop features ------------------------------------------------------------------------


@njit(cache=True)
def luma_int(data):
    """1000 * (0.299 R + 0.587 G + 0.114 B), exactly, as int64."""
    h, w = data.shape[0], data.shape[1]
    out = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            out[y, x] = 299 * np.int64(data[y, x, 0]) + 587 * np.int64(data[y, x, 1]) \
                + 114 * np.int64(data[y, x, 2])
    return out


@njit(cache=True, inline="always")
def _deriv2(a, i, n):
    # twice np.gradient's derivative along a line: central inside, one-sided at the ends
    if n < 2:
        return 0
    if i == 0:
        return 2 * (a[1] - a[0])
    if i == n - 1:
        return 2 * (a[n - 1] - a[n - 2])
    return a[i + 1] - a[i - 1]


@njit(cache=True)
def gradient_histogram(luma, bins, top):
    """Counts of ``(|2 dx| + |2 dy|) * bins // top`` clipped to the last bin."""
    h, w = luma.shape
    counts = np.zeros(bins, dtype=np.int64)
    for y in range(h):
        row = luma[y]
        for x in range(w):
            col = luma[:, x]
            mag = abs(_deriv2(row, x, w)) + abs(_deriv2(col, y, h))
            b = mag * bins // top
            if b > bins - 1:
                b = bins - 1
            counts[b] += 1
    return counts


@njit(cache=True)
def local_variance_total(luma, wh, ww):
    """Exact sum over all ``wh x ww`` windows of ``m * sum(L^2) - sum(L)^2`` (``m = wh * ww``).

    Returned as ``(hi, lo, count)`` with total ``= hi * 2**32 + lo`` so it cannot overflow.
    """
    h, w = luma.shape
    m = wh * ww
    rs1 = np.zeros((h, w - ww + 1), dtype=np.int64)
    rs2 = np.zeros((h, w - ww + 1), dtype=np.int64)
    for y in range(h):
        s1 = 0
        s2 = 0
        for x in range(ww):
            v = luma[y, x]
            s1 += v
            s2 += v * v
        rs1[y, 0] = s1
        rs2[y, 0] = s2
        for x in range(1, w - ww + 1):
            a = luma[y, x - 1]
            b = luma[y, x + ww - 1]
            s1 += b - a
            s2 += b * b - a * a
            rs1[y, x] = s1
            rs2[y, x] = s2
    hi = np.int64(0)
    lo = np.int64(0)
    nx = w - ww + 1
    for x in range(nx):
        s1 = 0
        s2 = 0
        for y in range(wh):
            s1 += rs1[y, x]
            s2 += rs2[y, x]
        for y in range(h - wh + 1):
            if y > 0:
                s1 += rs1[y + wh - 1, x] - rs1[y - 1, x]
                s2 += rs2[y + wh - 1, x] - rs2[y - 1, x]
            num = m * s2 - s1 * s1
            hi += num >> 32
            lo += num & 0xFFFFFFFF
    return hi, lo, (h - wh + 1) * nx


# --- colour -------------------------------------------------------------------------------


@njit(cache=True, inline="always")
def rgb_to_hsv_px(r, g, b):
    v = max(r, g, b)
    c = v - min(r, g, b)
    s = c / v if v > 0 else 0.0
    if c == 0:
        h = 0.0
    elif v == r:
        h = 60.0 * (((g - b) / c) % 6.0)
    elif v == g:
        h = 60.0 * ((b - r) / c + 2.0)
    else:
        h = 60.0 * ((r - g) / c + 4.0)
    return h % 360.0, s, v


@njit(cache=True, inline="always")
def _hsv_channel(n, h, s, v):
    k = (n + h / 60.0) % 6.0
    return v - v * s * max(0.0, min(k, 4.0 - k, 1.0))


@njit(cache=True, inline="always")
def hsv_to_rgb_px(h, s, v):
    return _hsv_channel(5.0, h, s, v), _hsv_channel(3.0, h, s, v), _hsv_channel(1.0, h, s, v)


@njit(cache=True)
def rgb_to_hsv_array(rgb):
    out = np.empty(rgb.shape, dtype=np.float64)
    flat_in = rgb.reshape(-1, 3)
    flat = out.reshape(-1, 3)
    for i in range(flat_in.shape[0]):
        flat[i, 0], flat[i, 1], flat[i, 2] = rgb_to_hsv_px(
            float(flat_in[i, 0]), float(flat_in[i, 1]), float(flat_in[i, 2]))
    return out


@njit(cache=True)
def hsv_to_rgb_array(hsv):
    out = np.empty(hsv.shape, dtype=np.float64)
    flat_in = hsv.reshape(-1, 3)
    flat = out.reshape(-1, 3)
    for i in range(flat_in.shape[0]):
        flat[i, 0], flat[i, 1], flat[i, 2] = hsv_to_rgb_px(flat_in[i, 0], flat_in[i, 1],
                                                           flat_in[i, 2])
    return out


@njit(cache=True, inline="always")
def _clamp(v):
    return min(max(v, 0.0), 255.0)


@njit(cache=True)
def photometric(data, brightness, contrast, saturation, hue_shift):
    """Brightness, contrast, saturation, hue in that order; clamp after each; round halves up.

    Identity factors are skipped so they leave samples untouched.
    """
    h, w = data.shape[0], data.shape[1]
    x = np.empty((h, w, 3), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for k in range(3):
                v = float(data[i, j, k])
                if brightness != 1.0:
                    v = _clamp(v * brightness)
                x[i, j, k] = v
    if contrast != 1.0:
        acc = 0.0
        for i in range(h):
            for j in range(w):
                acc += 0.299 * x[i, j, 0] + 0.587 * x[i, j, 1] + 0.114 * x[i, j, 2]
        mean = acc / (h * w)
        for i in range(h):
            for j in range(w):
                for k in range(3):
                    x[i, j, k] = _clamp(mean + contrast * (x[i, j, k] - mean))
    out = np.empty((h, w, 3), dtype=np.uint8)
    do_hsv = saturation != 1.0 or hue_shift != 0.0
    for i in range(h):
        for j in range(w):
            r, g, b = x[i, j, 0], x[i, j, 1], x[i, j, 2]
            if do_hsv:
                hh, ss, vv = rgb_to_hsv_px(r, g, b)
                if saturation != 1.0:
                    ss = min(max(ss * saturation, 0.0), 1.0)
                if hue_shift != 0.0:
                    hh = (hh + hue_shift) % 360.0
                r, g, b = hsv_to_rgb_px(hh, ss, vv)
            out[i, j, 0] = np.uint8(math.floor(_clamp(r) + 0.5))
            out[i, j, 1] = np.uint8(math.floor(_clamp(g) + 0.5))
            out[i, j, 2] = np.uint8(math.floor(_clamp(b) + 0.5))
    return out


# --- area downsampling --------------------------------------------------------------------


@njit(cache=True)
def box_rows(data, i0, w0, i1, w1, dst):
    """Integer-weighted row reduction of ``(h, w, 3)`` uint8 to ``(dst, w, 3)`` int64.

    Source row ``j`` contributes ``w0[j]`` to output row ``i0[j]`` and ``w1[j]`` to ``i1[j]``.
    """
    h, w = data.shape[0], data.shape[1]
    out = np.zeros((dst, w, 3), dtype=np.int64)
    for j in range(h):
        a, wa, b, wb = i0[j], w0[j], i1[j], w1[j]
        for x in range(w):
            for c in range(3):
                v = np.int64(data[j, x, c])
                out[a, x, c] += wa * v
                if wb:
                    out[b, x, c] += wb * v
    return out


@njit(cache=True)
def box_cols_round(rows, i0, w0, i1, w1, dst, den):
    """Column reduction of :func:`box_rows` output, then ``round(sum / den)`` half up."""
    h, w = rows.shape[0], rows.shape[1]
    out = np.empty((h, dst, 3), dtype=np.uint8)
    for y in range(h):
        tmp = np.zeros((dst, 3), dtype=np.int64)
        for x in range(w):
            a, wa, b, wb = i0[x], w0[x], i1[x], w1[x]
            for c in range(3):
                v = rows[y, x, c]
                tmp[a, c] += wa * v
                if wb:
                    tmp[b, c] += wb * v
        for i in range(dst):
            for c in range(3):
                out[y, i, c] = (2 * tmp[i, c] + den) // (2 * den)
    return out


# --- rank statistics ----------------------------------------------------------------------


@njit(cache=True)
def mw2u(pos, neg):
    """``2 * U`` for positive vs negative scores (ties count one half, hence the factor 2)."""
    p = np.sort(pos)
    q = np.sort(neg)
    nq = q.shape[0]
    lt = 0
    le = 0
    total = 0
    for v in p:
        while lt < nq and q[lt] < v:
            lt += 1
        if le < lt:
            le = lt
        while le < nq and q[le] <= v:
            le += 1
        total += lt + le
    return total


@njit(cache=True)
def _split_2u(y, s):
    n_pos = 0
    for i in range(y.shape[0]):
        n_pos += y[i]
    pos = np.empty(n_pos, dtype=np.float64)
    neg = np.empty(y.shape[0] - n_pos, dtype=np.float64)
    a = 0
    b = 0
    for i in range(y.shape[0]):
        if y[i] == 1:
            pos[a] = s[i]
            a += 1
        else:
            neg[b] = s[i]
            b += 1
    return mw2u(pos, neg), n_pos


@njit(cache=True)
def bootstrap_auc(y, s, idx):
    """AUC of every resample row ``idx[b]`` (rows must contain both classes)."""
    B, m = idx.shape
    out = np.empty(B, dtype=np.float64)
    yy = np.empty(m, dtype=np.int64)
    ss = np.empty(m, dtype=np.float64)
    for b in range(B):
        for j in range(m):
            yy[j] = y[idx[b, j]]
            ss[j] = s[idx[b, j]]
        u2, n_pos = _split_2u(yy, ss)
        out[b] = u2 / (2.0 * n_pos * (m - n_pos))
    return out


@njit(cache=True)
def permutation_hits(y, a, b, swap, unit_of, observed):
    """How many swap rows give ``|2U(a*) - 2U(b*)| >= observed``."""
    R = swap.shape[0]
    n = y.shape[0]
    pa = np.empty(n, dtype=np.float64)
    pb = np.empty(n, dtype=np.float64)
    hits = 0
    for r in range(R):
        for i in range(n):
            if swap[r, unit_of[i]]:
                pa[i] = b[i]
                pb[i] = a[i]
            else:
                pa[i] = a[i]
                pb[i] = b[i]
        ua, _ = _split_2u(y, pa)
        ub, _ = _split_2u(y, pb)
        if abs(ua - ub) >= observed:
            hits += 1
    return hits

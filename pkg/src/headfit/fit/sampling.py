"""Catmull-Rom bicubic sampling of normal maps with analytic gradients."""

import numpy as np

NORM_EPS = 1e-12
_FALLBACK = np.array([0.0, 0.0, 1.0])


def catmull_rom_weights(t):
    """Weights and their derivatives for taps at offsets -1, 0, 1, 2.

    ``t`` is the fractional position in ``[0, 1)``; returns two (M, 4) arrays.
    """
    t = np.asarray(t, dtype=np.float64)[:, None]
    t2, t3 = t * t, t * t * t
    w = np.concatenate([
        (-t3 + 2 * t2 - t) / 2,
        (3 * t3 - 5 * t2 + 2) / 2,
        (-3 * t3 + 4 * t2 + t) / 2,
        (t3 - t2) / 2,
    ], axis=1)
    dw = np.concatenate([
        (-3 * t2 + 4 * t - 1) / 2,
        (9 * t2 - 10 * t) / 2,
        (-9 * t2 + 8 * t + 1) / 2,
        (3 * t2 - 2 * t) / 2,
    ], axis=1)
    return w, dw


def sample_normals(nmap, points, derivatives=False):
    """Bicubic normals and bilinear mask weights at continuous pixel positions.

    ``points`` is (M, 2) in (u, v).  Returns ``normals`` (M, 3) unit vectors
    and ``weights`` (M,) in [0, 1]; with ``derivatives`` also ``dN/da``
    (M, 3, 2) and ``dw/da`` (M, 2).  Zero-weight samples get an arbitrary
    unit vector and zero derivatives.
    """
    a = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = len(a)
    h, w = nmap.height, nmap.width
    u, v = a[:, 0], a[:, 1]
    finite = np.isfinite(u) & np.isfinite(v)
    inside = finite & (u >= 0) & (u <= w) & (v >= 0) & (v <= h)
    # pixel centres sit at integer grid positions
    gx = np.where(inside, u - 0.5, 0.0)
    gy = np.where(inside, v - 0.5, 0.0)

    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    tx, ty = gx - ix, gy - iy
    wx, dwx = catmull_rom_weights(tx)
    wy, dwy = catmull_rom_weights(ty)
    taps = np.arange(-1, 3)
    cols = np.clip(ix[:, None] + taps, 0, w - 1)
    rows = np.clip(iy[:, None] + taps, 0, h - 1)
    patch = nmap.normals[rows[:, :, None], cols[:, None, :]]  # (M, 4, 4, 3)

    c = np.einsum("mj,mi,mjik->mk", wy, wx, patch)
    cn = np.linalg.norm(c, axis=1)

    # bilinear mask weight
    bx = np.floor(gx).astype(np.int64)
    by = np.floor(gy).astype(np.int64)
    fx, fy = gx - bx, gy - by
    x0, x1 = np.clip(bx, 0, w - 1), np.clip(bx + 1, 0, w - 1)
    y0, y1 = np.clip(by, 0, h - 1), np.clip(by + 1, 0, h - 1)
    mk = nmap.mask.astype(np.float64)
    m00, m01, m10, m11 = mk[y0, x0], mk[y0, x1], mk[y1, x0], mk[y1, x1]
    weight = ((1 - fy) * ((1 - fx) * m00 + fx * m01) + fy * ((1 - fx) * m10 + fx * m11))

    valid = inside & (cn > NORM_EPS) & (weight > 0)
    weight = np.where(valid, weight, 0.0)
    safe = np.where(valid, cn, 1.0)
    normals = np.where(valid[:, None], c / safe[:, None], _FALLBACK)
    if not derivatives:
        return normals, weight

    dc_du = np.einsum("mj,mi,mjik->mk", wy, dwx, patch)
    dc_dv = np.einsum("mj,mi,mjik->mk", dwy, wx, patch)
    dc = np.stack([dc_du, dc_dv], axis=2)  # (M, 3, 2)
    proj = (np.eye(3) - normals[:, :, None] * normals[:, None, :]) / safe[:, None, None]
    dN = np.where(valid[:, None, None], proj @ dc, 0.0)
    dw_du = (1 - fy) * (m01 - m00) + fy * (m11 - m10)
    dw_dv = (1 - fx) * (m10 - m00) + fx * (m11 - m01)
    dw = np.where(valid[:, None], np.stack([dw_du, dw_dv], axis=1), 0.0)
    return normals, weight, dN, dw


def sample_normal_bicubic(nmap, a):
    """Single-point convenience wrapper: ``(unit normal, validity weight)``."""
    n, wt = sample_normals(nmap, np.asarray(a, dtype=np.float64)[None, :])
    return n[0], float(wt[0])

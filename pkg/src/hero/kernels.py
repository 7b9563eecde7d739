"""Hot numeric kernels: ray casting, pairwise collision tests, Adam update.

Each kernel has a numba implementation (``*_nb``) and a vectorised numpy
implementation (``*_np``).  The public names dispatch on ``HERO_NUMBA``.
Both paths are deterministic; they agree to floating point rounding.
"""
import math

import numpy as np

from hero._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# ray casting against vehicle discs


@njit
def _lidar_nb(xs, ys, ego, heading, n_rays, radius, r_max):
    out = np.empty(n_rays)
    px = xs[ego]
    py = ys[ego]
    r2 = radius * radius
    for k in range(n_rays):
        ang = heading + 2.0 * math.pi * k / n_rays
        dx = math.cos(ang)
        dy = math.sin(ang)
        best = r_max
        for j in range(xs.shape[0]):
            if j == ego:
                continue
            rx = xs[j] - px
            ry = ys[j] - py
            b = rx * dx + ry * dy
            c = rx * rx + ry * ry - r2
            if c <= 0.0:
                best = 0.0
                break
            disc = b * b - c
            if disc < 0.0:
                continue
            t = b - math.sqrt(disc)
            if t >= 0.0 and t < best:
                best = t
        out[k] = best
    return out


def _lidar_np(xs, ys, ego, heading, n_rays, radius, r_max):
    ang = heading + 2.0 * np.pi * np.arange(n_rays) / n_rays
    dx = np.cos(ang)[:, None]
    dy = np.sin(ang)[:, None]
    others = np.arange(xs.shape[0]) != ego
    rx = (xs[others] - xs[ego])[None, :]
    ry = (ys[others] - ys[ego])[None, :]
    if rx.shape[1] == 0:
        return np.full(n_rays, float(r_max))
    b = rx * dx + ry * dy
    c = rx * rx + ry * ry - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = b - np.sqrt(disc)
    hit = (disc >= 0.0) & (t >= 0.0)
    t = np.where(hit, t, r_max)
    best = np.minimum(t.min(axis=1), r_max)
    inside = (c <= 0.0).any(axis=1)
    return np.where(inside, 0.0, best)


# --------------------------------------------------------------------------
# pairwise collisions


@njit
def _collisions_nb(xs, ys, lateral_gap, longitudinal_gap):
    n = xs.shape[0]
    out = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(i + 1, n):
            if abs(ys[i] - ys[j]) < lateral_gap and abs(xs[i] - xs[j]) < longitudinal_gap:
                out[i, j] = True
                out[j, i] = True
    return out


def _collisions_np(xs, ys, lateral_gap, longitudinal_gap):
    hit = (np.abs(ys[:, None] - ys[None, :]) < lateral_gap) & (
        np.abs(xs[:, None] - xs[None, :]) < longitudinal_gap
    )
    np.fill_diagonal(hit, False)
    return hit


# --------------------------------------------------------------------------
# Adam, in place on flat views


@njit
def _adam_nb(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi)
        p[i] = p[i] - lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)


def _adam_np(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


if USE_NUMBA:
    lidar_scan_kernel = _lidar_nb
    collision_matrix = _collisions_nb
    adam_kernel = _adam_nb
else:
    lidar_scan_kernel = _lidar_np
    collision_matrix = _collisions_np
    adam_kernel = _adam_np

IMPLEMENTATIONS = {
    "numba": {"lidar": _lidar_nb, "collisions": _collisions_nb, "adam": _adam_nb},
    "numpy": {"lidar": _lidar_np, "collisions": _collisions_np, "adam": _adam_np},
}

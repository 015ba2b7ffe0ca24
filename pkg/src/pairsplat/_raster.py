"""Per-pixel compositing kernels (numba).

Inputs are the depth-sorted, kept, visible splats only.  Pixel ``(x, y)`` is
sampled at ``(x + 0.5, y + 0.5)``.  Gradient buffers are accumulated per image
row and reduced in row order, so the parallel and serial variants produce
bit-identical results.
"""

import numpy as np
from numba import njit, prange

ALPHA_MAX = 0.99
T_EPS = 1e-4
# exp(-30) ~ 9e-14: splats are skipped below this weight
POWER_CUTOFF = -30.0

# per-splat gradient layout in the row buffers
N_GRAD = 9  # mean x, mean y, conic a, conic b, conic c, opacity, r, g, b


@njit(cache=True)
def _row_splats(py, bbox):
    """Depth-ordered indices of splats whose vertical extent covers row ``py``."""
    hits = np.empty(bbox.shape[0], dtype=np.int64)
    n = 0
    for k in range(bbox.shape[0]):
        if bbox[k, 2] <= py <= bbox[k, 3]:
            hits[n] = k
            n += 1
    return hits[:n]


@njit(cache=True, fastmath=False)
def _shade_row(y, means, conics, opac, colors, bbox, width, bg, t_eps, out, trans):
    py = y + 0.5
    rows = _row_splats(py, bbox)
    for x in range(width):
        px = x + 0.5
        t = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for k in rows:
            if px < bbox[k, 0] or px > bbox[k, 1]:
                continue
            dx = px - means[k, 0]
            dy = py - means[k, 1]
            power = -0.5 * (conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy
                            + conics[k, 2] * dy * dy)
            if power < POWER_CUTOFF:
                continue
            alpha = opac[k] * np.exp(power)
            if alpha > ALPHA_MAX:
                alpha = ALPHA_MAX
            w = alpha * t
            c0 += colors[k, 0] * w
            c1 += colors[k, 1] * w
            c2 += colors[k, 2] * w
            t *= 1.0 - alpha
            if t < t_eps:
                break
        out[y, x, 0] = c0 + t * bg[0]
        out[y, x, 1] = c1 + t * bg[1]
        out[y, x, 2] = c2 + t * bg[2]
        trans[y, x] = t


@njit(cache=True)
def forward_serial(means, conics, opac, colors, bbox, height, width, bg, t_eps):
    out = np.empty((height, width, 3))
    trans = np.empty((height, width))
    for y in range(height):
        _shade_row(y, means, conics, opac, colors, bbox, width, bg, t_eps, out, trans)
    return out, trans


@njit(cache=True, parallel=True)
def forward_parallel(means, conics, opac, colors, bbox, height, width, bg, t_eps):
    out = np.empty((height, width, 3))
    trans = np.empty((height, width))
    for y in prange(height):
        _shade_row(y, means, conics, opac, colors, bbox, width, bg, t_eps, out, trans)
    return out, trans


@njit(cache=True, fastmath=False)
def _adjoint_row(y, means, conics, opac, colors, bbox, width, bg, t_eps, upstream, acc):
    k_count = means.shape[0]
    py = y + 0.5
    rows = _row_splats(py, bbox)
    idx = np.empty(k_count, dtype=np.int64)
    alphas = np.empty(k_count)
    gauss = np.empty(k_count)
    ts = np.empty(k_count)
    for x in range(width):
        g0 = upstream[y, x, 0]
        g1 = upstream[y, x, 1]
        g2 = upstream[y, x, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        px = x + 0.5
        # replay the forward traversal, remembering every contributing splat
        t = 1.0
        n = 0
        for k in rows:
            if px < bbox[k, 0] or px > bbox[k, 1]:
                continue
            dx = px - means[k, 0]
            dy = py - means[k, 1]
            power = -0.5 * (conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy
                            + conics[k, 2] * dy * dy)
            if power < POWER_CUTOFF:
                continue
            gk = np.exp(power)
            alpha = opac[k] * gk
            if alpha > ALPHA_MAX:
                alpha = ALPHA_MAX
            idx[n] = k
            alphas[n] = alpha
            gauss[n] = gk
            ts[n] = t
            n += 1
            t *= 1.0 - alpha
            if t < t_eps:
                break
        # suffix sums of later contributions, starting from the background term
        s0 = t * bg[0]
        s1 = t * bg[1]
        s2 = t * bg[2]
        for j in range(n - 1, -1, -1):
            k = idx[j]
            alpha = alphas[j]
            tk = ts[j]
            w = alpha * tk
            acc[y, k, 6] += g0 * w
            acc[y, k, 7] += g1 * w
            acc[y, k, 8] += g2 * w
            inv = 1.0 / (1.0 - alpha)
            d_alpha = (g0 * (tk * colors[k, 0] - s0 * inv)
                       + g1 * (tk * colors[k, 1] - s1 * inv)
                       + g2 * (tk * colors[k, 2] - s2 * inv))
            s0 += colors[k, 0] * w
            s1 += colors[k, 1] * w
            s2 += colors[k, 2] * w
            if opac[k] * gauss[j] > ALPHA_MAX:
                continue  # clipped: alpha is locally constant
            acc[y, k, 5] += d_alpha * gauss[j]
            d_power = d_alpha * alpha
            dx = px - means[k, 0]
            dy = py - means[k, 1]
            acc[y, k, 0] += d_power * (conics[k, 0] * dx + conics[k, 1] * dy)
            acc[y, k, 1] += d_power * (conics[k, 1] * dx + conics[k, 2] * dy)
            acc[y, k, 2] += -0.5 * d_power * dx * dx
            acc[y, k, 3] += -d_power * dx * dy
            acc[y, k, 4] += -0.5 * d_power * dy * dy


@njit(cache=True)
def backward_serial(means, conics, opac, colors, bbox, height, width, bg, t_eps, upstream):
    acc = np.zeros((height, means.shape[0], N_GRAD))
    for y in range(height):
        _adjoint_row(y, means, conics, opac, colors, bbox, width, bg, t_eps, upstream, acc)
    return acc


@njit(cache=True, parallel=True)
def backward_parallel(means, conics, opac, colors, bbox, height, width, bg, t_eps, upstream):
    acc = np.zeros((height, means.shape[0], N_GRAD))
    for y in prange(height):
        _adjoint_row(y, means, conics, opac, colors, bbox, width, bg, t_eps, upstream, acc)
    return acc


def reduce_rows(acc: np.ndarray) -> np.ndarray:
    """Sum row buffers in fixed row order."""
    out = np.zeros(acc.shape[1:])
    for row in acc:
        out += row
    return out

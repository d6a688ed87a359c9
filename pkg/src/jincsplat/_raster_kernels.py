"""Compiled tile loops for the forward and backward rasterizer passes.

Each primitive is described by one row of ``params`` (layout in ``P_*``).
Work is split by tile; a tile owns its pixels and its slice of the
(tile, primitive) pair list, so no two threads ever write the same memory
and results do not depend on scheduling.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .special import jinc2_core, jinc2_dsq_core

# parameter row layout
P_OPACITY = 0
P_COLOR = 1  # 3 entries
P_OMEGA = 4
P_F0 = 5
P_NU = 6
P_TAG = 7
P_M = 8  # Jinc: whitened camera offset m (3)
P_B = 11  # Jinc: B = M R_c^T K^-1, row-major (9)
P_W = 20  # Jinc: M = S^-1 R^T, row-major (9)
P_MEAN = 8  # 2D kinds: projected mean (2)
P_CONIC = 10  # 2D kinds: inverse 2D covariance (a, b, c)
N_PARAMS = 29

# gradient row layout
G_COLOR = 0
G_OPACITY = 3
G_OMEGA = 4
G_POS = 5  # Jinc: mu (3); 2D kinds: mean (2)
G_SHAPE = 8  # Jinc: Sigma (xx, xy, xz, yy, yz, zz); 2D kinds: conic (a, b, c)
N_GRADS = 14

TAG_GAUSSIAN = 1
TAG_STUDENT = 3
TAG_JINC = 4
TAG_MOD_GAUSSIAN = 5
TAG_MOD_STUDENT = 6


@numba.njit(cache=True, inline="always")
def _jinc_alpha2(params, p, px, py):
    n0 = params[p, P_B + 0] * px + params[p, P_B + 1] * py + params[p, P_B + 2]
    n1 = params[p, P_B + 3] * px + params[p, P_B + 4] * py + params[p, P_B + 5]
    n2 = params[p, P_B + 6] * px + params[p, P_B + 7] * py + params[p, P_B + 8]
    m0 = params[p, P_M]
    m1 = params[p, P_M + 1]
    m2 = params[p, P_M + 2]
    c0 = m1 * n2 - m2 * n1
    c1 = m2 * n0 - m0 * n2
    c2 = m0 * n1 - m1 * n0
    nn = n0 * n0 + n1 * n1 + n2 * n2
    return (c0 * c0 + c1 * c1 + c2 * c2) / nn, n0, n1, n2, nn


@numba.njit(cache=True, inline="always")
def _response(params, p, px, py):
    """Peak-normalised kernel response of one primitive at one pixel centre."""
    tag = int(params[p, P_TAG])
    if tag == TAG_JINC:
        a2, _, _, _, _ = _jinc_alpha2(params, p, px, py)
        return jinc2_core(math.sqrt(a2))
    dx = px - params[p, P_MEAN]
    dy = py - params[p, P_MEAN + 1]
    r2 = params[p, P_CONIC] * dx * dx + 2.0 * params[p, P_CONIC + 1] * dx * dy + params[p, P_CONIC + 2] * dy * dy
    if r2 < 0.0:
        r2 = 0.0
    if tag == TAG_GAUSSIAN or tag == TAG_MOD_GAUSSIAN:
        base = math.exp(-0.5 * r2)
    else:
        nu = params[p, P_NU]
        base = (1.0 + r2 / nu) ** (-0.5 * (nu + 1.0))
    if tag == TAG_MOD_GAUSSIAN or tag == TAG_MOD_STUDENT:
        om = params[p, P_OMEGA]
        return base * (om + (1.0 - om) * math.cos(params[p, P_F0] * math.sqrt(r2)))
    return base


@numba.njit(cache=True)
def _response_grad(params, p, px, py, d_resp, out):
    """Accumulate d_resp * d(response)/d(geometry, omega) into ``out``."""
    tag = int(params[p, P_TAG])
    if tag == TAG_JINC:
        a2, n0, n1, n2, nn = _jinc_alpha2(params, p, px, py)
        d_a2 = d_resp * jinc2_dsq_core(math.sqrt(a2))
        m0 = params[p, P_M]
        m1 = params[p, P_M + 1]
        m2 = params[p, P_M + 2]
        beta = (m0 * n0 + m1 * n1 + m2 * n2) / nn
        v0 = m0 - beta * n0
        v1 = m1 - beta * n1
        v2 = m2 - beta * n2
        # g = M^T v
        g0 = params[p, P_W + 0] * v0 + params[p, P_W + 3] * v1 + params[p, P_W + 6] * v2
        g1 = params[p, P_W + 1] * v0 + params[p, P_W + 4] * v1 + params[p, P_W + 7] * v2
        g2 = params[p, P_W + 2] * v0 + params[p, P_W + 5] * v1 + params[p, P_W + 8] * v2
        out[G_POS] -= 2.0 * d_a2 * g0
        out[G_POS + 1] -= 2.0 * d_a2 * g1
        out[G_POS + 2] -= 2.0 * d_a2 * g2
        out[G_SHAPE] -= d_a2 * g0 * g0
        out[G_SHAPE + 1] -= d_a2 * g0 * g1
        out[G_SHAPE + 2] -= d_a2 * g0 * g2
        out[G_SHAPE + 3] -= d_a2 * g1 * g1
        out[G_SHAPE + 4] -= d_a2 * g1 * g2
        out[G_SHAPE + 5] -= d_a2 * g2 * g2
        return
    ca = params[p, P_CONIC]
    cb = params[p, P_CONIC + 1]
    cc = params[p, P_CONIC + 2]
    dx = px - params[p, P_MEAN]
    dy = py - params[p, P_MEAN + 1]
    r2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if r2 < 0.0:
        r2 = 0.0
    if tag == TAG_GAUSSIAN or tag == TAG_MOD_GAUSSIAN:
        base = math.exp(-0.5 * r2)
        d_base = -0.5 * base
    else:
        nu = params[p, P_NU]
        base = (1.0 + r2 / nu) ** (-0.5 * (nu + 1.0))
        d_base = -0.5 * (nu + 1.0) / nu * base / (1.0 + r2 / nu)
    if tag == TAG_MOD_GAUSSIAN or tag == TAG_MOD_STUDENT:
        om = params[p, P_OMEGA]
        f0 = params[p, P_F0]
        x = f0 * math.sqrt(r2)
        cosx = math.cos(x)
        sinc = math.sin(x) / x if x > 1e-8 else 1.0 - x * x / 6.0
        mod = om + (1.0 - om) * cosx
        d_mod = -0.5 * (1.0 - om) * f0 * f0 * sinc
        d_r2 = d_resp * (d_base * mod + base * d_mod)
        out[G_OMEGA] += d_resp * base * (1.0 - cosx)
    else:
        d_r2 = d_resp * d_base
    out[G_POS] -= 2.0 * d_r2 * (ca * dx + cb * dy)
    out[G_POS + 1] -= 2.0 * d_r2 * (cb * dx + cc * dy)
    out[G_SHAPE] += d_r2 * dx * dx
    out[G_SHAPE + 1] += d_r2 * 2.0 * dx * dy
    out[G_SHAPE + 2] += d_r2 * dy * dy


@numba.njit(cache=True, inline="always")
def _alpha(params, p, px, py, signed, min_alpha):
    """(alpha_px, response, has_grad); alpha_px = 0 marks a skipped step."""
    resp = _response(params, p, px, py)
    w = params[p, P_OPACITY] * resp
    has_grad = True
    if not signed and w < 0.0:
        w = 0.0
        has_grad = False
    if w > 0.999:
        w = 0.999
        has_grad = False
    if abs(w) < min_alpha:
        return 0.0, resp, False
    return w, resp, has_grad


@numba.njit(cache=True, parallel=True)
def render_forward(params, pair_prim, tile_start, tiles_x, tile_size, width, height,
                   signed, min_alpha, t_floor):
    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    n_tiles = tile_start.shape[0] - 1
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s1 == s0:
            continue
        for y in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            py = y + 0.5
            for x in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                px = x + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(s0, s1):
                    p = pair_prim[k]
                    a, _, _ = _alpha(params, p, px, py, signed, min_alpha)
                    if a == 0.0:
                        continue
                    wt = a * T
                    c0 += params[p, P_COLOR] * wt
                    c1 += params[p, P_COLOR + 1] * wt
                    c2 += params[p, P_COLOR + 2] * wt
                    T *= 1.0 - a
                    if T < t_floor:
                        break
                rgb[y, x, 0] = c0
                rgb[y, x, 1] = c1
                rgb[y, x, 2] = c2
                trans[y, x] = T
    return rgb, trans


@numba.njit(cache=True, parallel=True)
def render_backward(params, pair_prim, tile_start, tiles_x, tile_size, width, height,
                    signed, min_alpha, t_floor, d_rgb):
    """Per-pair gradient partials (n_pairs, N_GRADS) for upstream d_rgb."""
    n_pairs = pair_prim.shape[0]
    partial = np.zeros((n_pairs, N_GRADS))
    n_tiles = tile_start.shape[0] - 1
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s1 == s0:
            continue
        cnt = s1 - s0
        st_k = np.empty(cnt, dtype=np.int64)
        st_a = np.empty(cnt)
        st_t = np.empty(cnt)
        st_r = np.empty(cnt)
        st_g = np.empty(cnt, dtype=np.bool_)
        for y in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            py = y + 0.5
            for x in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                px = x + 0.5
                g0 = d_rgb[y, x, 0]
                g1 = d_rgb[y, x, 1]
                g2 = d_rgb[y, x, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                # replay the forward pass, recording each contribution
                T = 1.0
                n = 0
                for k in range(s0, s1):
                    p = pair_prim[k]
                    a, resp, hg = _alpha(params, p, px, py, signed, min_alpha)
                    if a == 0.0:
                        continue
                    st_k[n] = k
                    st_a[n] = a
                    st_t[n] = T
                    st_r[n] = resp
                    st_g[n] = hg
                    n += 1
                    T *= 1.0 - a
                    if T < t_floor:
                        break
                # suffix sums of colour * alpha * T, walked back to front
                s_0 = 0.0
                s_1 = 0.0
                s_2 = 0.0
                for i in range(n - 1, -1, -1):
                    k = st_k[i]
                    p = pair_prim[k]
                    a = st_a[i]
                    Ti = st_t[i]
                    out = partial[k]
                    out[G_COLOR] += g0 * a * Ti
                    out[G_COLOR + 1] += g1 * a * Ti
                    out[G_COLOR + 2] += g2 * a * Ti
                    if st_g[i]:
                        inv = 1.0 / (1.0 - a)
                        d_a = (g0 * (params[p, P_COLOR] * Ti - s_0 * inv)
                               + g1 * (params[p, P_COLOR + 1] * Ti - s_1 * inv)
                               + g2 * (params[p, P_COLOR + 2] * Ti - s_2 * inv))
                        out[G_OPACITY] += d_a * st_r[i]
                        _response_grad(params, p, px, py, d_a * params[p, P_OPACITY], out)
                    s_0 += params[p, P_COLOR] * a * Ti
                    s_1 += params[p, P_COLOR + 1] * a * Ti
                    s_2 += params[p, P_COLOR + 2] * a * Ti
    return partial


@numba.njit(cache=True)
def reduce_partials(partial, pair_prim, n_prims):
    """Sum pair partials into per-primitive rows in fixed pair order."""
    out = np.zeros((n_prims, partial.shape[1]))
    for k in range(pair_prim.shape[0]):
        p = pair_prim[k]
        for j in range(partial.shape[1]):
            out[p, j] += partial[k, j]
    return out

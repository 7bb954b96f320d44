"""Compiled fused sweep kernel for the shallow-water operator.

Mirrors the vectorized reference in :mod:`floodgsa.swe` operation for
operation: same expressions, same rounding order, strict IEEE semantics
(no fastmath), so both paths produce bit-identical results; a test asserts
that. The numpy path remains the readable reference and fallback, this one
is the fast default. Interfaces between two exactly-dry cells short-circuit
to zero flux (what the reference computes for them anyway), and the
first-order path skips the slope arrays (their contributions are exact
zeros there).
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


@njit(cache=True, inline="always", error_model="numpy")
def _minmod(a, b):
    if a * b > 0.0:
        if abs(a) < abs(b):
            return a
        return b
    return 0.0


@njit(cache=True, inline="always", error_model="numpy")
def _hll_scalar(h_l, u_l, w_l, h_r, u_r, w_r, g):
    if h_l <= 0.0 and h_r <= 0.0:
        return 0.0, 0.0, 0.0
    fm_l = h_l * u_l
    fn_l = fm_l * u_l + 0.5 * g * h_l * h_l
    ft_l = fm_l * w_l
    if h_l == h_r and u_l == u_r and w_l == w_r:
        return fm_l, fn_l, ft_l
    c_l = math.sqrt(g * h_l)
    c_r = math.sqrt(g * h_r)
    s_l = min(u_l - c_l, u_r - c_r)
    s_r = max(u_l + c_l, u_r + c_r)
    if s_l >= 0.0:
        return fm_l, fn_l, ft_l
    fm_r = h_r * u_r
    fn_r = fm_r * u_r + 0.5 * g * h_r * h_r
    ft_r = fm_r * w_r
    if s_r <= 0.0:
        return fm_r, fn_r, ft_r
    span = s_r - s_l
    fm = (s_r * fm_l - s_l * fm_r + s_l * s_r * (h_r - h_l)) / span
    fn = (s_r * fn_l - s_l * fn_r + s_l * s_r * (h_r * u_r - h_l * u_l)) / span
    ft = (s_r * ft_l - s_l * ft_r + s_l * s_r * (h_r * w_r - h_l * w_l)) / span
    return fm, fn, ft


@njit(cache=True, inline="always", error_model="numpy")
def _reconstruct(h_l, z_l, h_r, z_r):
    dz = z_r - z_l
    if dz > 0.0:
        h_ls = max(0.0, h_l - dz)
    else:
        h_ls = max(0.0, h_l)
    dz = z_l - z_r
    if dz > 0.0:
        h_rs = max(0.0, h_r - dz)
    else:
        h_rs = max(0.0, h_r)
    return h_ls, h_rs


@njit(cache=True, error_model="numpy")
def _rates_kernel(hp, hup, hvp, zp, order, g, h_dry, dx):
    """Flux-divergence rates on the padded grid plus boundary mass fluxes."""
    ny2, nx2 = hp.shape
    ny, nx = ny2 - 2, nx2 - 2
    second = order == 2

    up = np.zeros((ny2, nx2))
    vp = np.zeros((ny2, nx2))
    etap = np.empty((ny2, nx2))
    for i in range(ny2):
        for j in range(nx2):
            h = hp[i, j]
            if h >= h_dry:
                up[i, j] = hup[i, j] / h
                vp[i, j] = hvp[i, j] / h
            etap[i, j] = h + zp[i, j]

    shape = (ny2, nx2) if second else (1, 1)
    sh_x = np.zeros(shape)
    su_x = np.zeros(shape)
    sv_x = np.zeros(shape)
    se_x = np.zeros(shape)
    sh_y = np.zeros(shape)
    su_y = np.zeros(shape)
    sv_y = np.zeros(shape)
    se_y = np.zeros(shape)
    if second:
        # one ring inside the ghost ring stays first order; dry cells too
        for i in range(1, ny2 - 1):
            for j in range(2, nx2 - 2):
                if hp[i, j] < h_dry:
                    continue
                sh = _minmod(hp[i, j] - hp[i, j - 1], hp[i, j + 1] - hp[i, j])
                cap = 2.0 * hp[i, j]
                sh_x[i, j] = min(max(sh, -cap), cap)
                su_x[i, j] = _minmod(up[i, j] - up[i, j - 1], up[i, j + 1] - up[i, j])
                sv_x[i, j] = _minmod(vp[i, j] - vp[i, j - 1], vp[i, j + 1] - vp[i, j])
                se_x[i, j] = _minmod(etap[i, j] - etap[i, j - 1], etap[i, j + 1] - etap[i, j])
        for i in range(2, ny2 - 2):
            for j in range(1, nx2 - 1):
                if hp[i, j] < h_dry:
                    continue
                sh = _minmod(hp[i, j] - hp[i + 1, j], hp[i - 1, j] - hp[i, j])
                cap = 2.0 * hp[i, j]
                sh_y[i, j] = min(max(sh, -cap), cap)
                su_y[i, j] = _minmod(up[i, j] - up[i + 1, j], up[i - 1, j] - up[i, j])
                sv_y[i, j] = _minmod(vp[i, j] - vp[i + 1, j], vp[i - 1, j] - vp[i, j])
                se_y[i, j] = _minmod(etap[i, j] - etap[i + 1, j], etap[i - 1, j] - etap[i, j])

    # x interfaces: j2 between padded columns j2 and j2+1, interior rows
    fm_x = np.empty((ny, nx + 1))
    ft_x = np.empty((ny, nx + 1))
    gl_x = np.empty((ny, nx + 1))
    gr_x = np.empty((ny, nx + 1))
    for i in range(1, ny + 1):
        for j2 in range(nx + 1):
            jl, jr = j2, j2 + 1
            if hp[i, jl] == 0.0 and hp[i, jr] == 0.0:
                fm_x[i - 1, j2] = 0.0
                ft_x[i - 1, j2] = 0.0
                gl_x[i - 1, j2] = 0.0
                gr_x[i - 1, j2] = 0.0
                continue
            if second:
                h_l = hp[i, jl] + 0.5 * sh_x[i, jl]
                u_l = up[i, jl] + 0.5 * su_x[i, jl]
                w_l = vp[i, jl] + 0.5 * sv_x[i, jl]
                z_l = (etap[i, jl] + 0.5 * se_x[i, jl]) - h_l
                h_r = hp[i, jr] - 0.5 * sh_x[i, jr]
                u_r = up[i, jr] - 0.5 * su_x[i, jr]
                w_r = vp[i, jr] - 0.5 * sv_x[i, jr]
                z_r = (etap[i, jr] - 0.5 * se_x[i, jr]) - h_r
            else:
                h_l, u_l, w_l = hp[i, jl], up[i, jl], vp[i, jl]
                z_l = etap[i, jl] - h_l
                h_r, u_r, w_r = hp[i, jr], up[i, jr], vp[i, jr]
                z_r = etap[i, jr] - h_r

            h_ls, h_rs = _reconstruct(h_l, z_l, h_r, z_r)
            fm, fn, ft = _hll_scalar(h_ls, u_l, w_l, h_rs, u_r, w_r, g)
            fm_x[i - 1, j2] = fm
            ft_x[i - 1, j2] = ft
            gl_x[i - 1, j2] = fn - 0.5 * g * h_ls * h_ls
            gr_x[i - 1, j2] = fn - 0.5 * g * h_rs * h_rs

    # y interfaces: k between padded rows k (north) and k+1 (south = left)
    fm_y = np.empty((ny + 1, nx))
    ft_y = np.empty((ny + 1, nx))
    gl_y = np.empty((ny + 1, nx))
    gr_y = np.empty((ny + 1, nx))
    for k in range(ny + 1):
        il, ir = k + 1, k
        for j in range(1, nx + 1):
            if hp[il, j] == 0.0 and hp[ir, j] == 0.0:
                fm_y[k, j - 1] = 0.0
                ft_y[k, j - 1] = 0.0
                gl_y[k, j - 1] = 0.0
                gr_y[k, j - 1] = 0.0
                continue
            if second:
                h_l = hp[il, j] + 0.5 * sh_y[il, j]
                u_l = vp[il, j] + 0.5 * sv_y[il, j]
                w_l = up[il, j] + 0.5 * su_y[il, j]
                z_l = (etap[il, j] + 0.5 * se_y[il, j]) - h_l
                h_r = hp[ir, j] - 0.5 * sh_y[ir, j]
                u_r = vp[ir, j] - 0.5 * sv_y[ir, j]
                w_r = up[ir, j] - 0.5 * su_y[ir, j]
                z_r = (etap[ir, j] - 0.5 * se_y[ir, j]) - h_r
            else:
                h_l, u_l, w_l = hp[il, j], vp[il, j], up[il, j]
                z_l = etap[il, j] - h_l
                h_r, u_r, w_r = hp[ir, j], vp[ir, j], up[ir, j]
                z_r = etap[ir, j] - h_r

            h_ls, h_rs = _reconstruct(h_l, z_l, h_r, z_r)
            fm, fn, ft = _hll_scalar(h_ls, u_l, w_l, h_rs, u_r, w_r, g)
            fm_y[k, j - 1] = fm
            ft_y[k, j - 1] = ft
            gl_y[k, j - 1] = fn - 0.5 * g * h_ls * h_ls
            gr_y[k, j - 1] = fn - 0.5 * g * h_rs * h_rs

    # per-cell assembly in the exact statement order of the numpy reference;
    # the centered terms are exact zeros at first order and are skipped there
    dh = np.empty((ny, nx))
    dhu = np.empty((ny, nx))
    dhv = np.empty((ny, nx))
    gh = g * 0.5
    for i in range(ny):
        ip = i + 1
        for j in range(nx):
            jp = j + 1
            dh_c = -(fm_x[i, j + 1] - fm_x[i, j]) / dx
            dhv_c = -(ft_x[i, j + 1] - ft_x[i, j]) / dx
            dhu_c = -(gl_x[i, j + 1] - gr_x[i, j]) / dx
            if second:
                hw = hp[ip, jp] - 0.5 * sh_x[ip, jp]
                he = hp[ip, jp] + 0.5 * sh_x[ip, jp]
                etaw = etap[ip, jp] - 0.5 * se_x[ip, jp]
                etae = etap[ip, jp] + 0.5 * se_x[ip, jp]
                dhu_c += gh * (hw + he) * (etaw - etae) / dx
            dh_c += -(fm_y[i, j] - fm_y[i + 1, j]) / dx
            dhu_c += -(ft_y[i, j] - ft_y[i + 1, j]) / dx
            dhv_c += -(gl_y[i, j] - gr_y[i + 1, j]) / dx
            if second:
                hs = hp[ip, jp] - 0.5 * sh_y[ip, jp]
                hn = hp[ip, jp] + 0.5 * sh_y[ip, jp]
                etas = etap[ip, jp] - 0.5 * se_y[ip, jp]
                etan = etap[ip, jp] + 0.5 * se_y[ip, jp]
                dhv_c += gh * (hs + hn) * (etas - etan) / dx
            dh[i, j] = dh_c
            dhu[i, j] = dhu_c
            dhv[i, j] = dhv_c

    return (dh, dhu, dhv,
            fm_x[:, 0].copy(), fm_x[:, nx].copy(),
            fm_y[0, :].copy(), fm_y[ny, :].copy())


@njit(cache=True, error_model="numpy")
def _max_wave_speed(h, hu, hv, h_dry, g):
    """Fastest |velocity| + celerity over wet cells; -1 when all dry."""
    fastest = -1.0
    ny, nx = h.shape
    for i in range(ny):
        for j in range(nx):
            hij = h[i, j]
            if hij >= h_dry:
                c = math.sqrt(g * hij)
                su = abs(hu[i, j] / hij) + c
                sv = abs(hv[i, j] / hij) + c
                s = max(su, sv)
                if s > fastest:
                    fastest = s
    return fastest

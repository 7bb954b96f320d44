"""2D shallow-water solver on a regular grid, tracking maximal surface elevation.

Finite-volume scheme: HLL fluxes on hydrostatically reconstructed interface
states (well balanced, depth-positive), optional minmod-MUSCL reconstruction
with Heun time stepping, semi-implicit Manning friction, and a CFL-driven
variable time step. Array layout matches rasters: shape (nrows, ncols) with
row 0 the northernmost row; u is the +x (east) velocity, v the +y (north)
velocity.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np

from .errors import NumericalInstabilityError, ValidationError
from .raster import EXACT_FORMAT, GridGeometry, Raster, read_ascii_grid, write_ascii_grid
from .swe_kernel import HAVE_NUMBA, _max_wave_speed, _rates_kernel

EDGES = ("north", "south", "east", "west")

# compiled fused kernel by default; the numpy reference path is kept for
# documentation, fallback, and the bit-equality cross-check in the tests
USE_KERNEL = HAVE_NUMBA


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hydrograph:
    """Piecewise-linear discharge series; holds the last value beyond the end."""

    samples: tuple  # of (t, Q)

    def __post_init__(self):
        samples = tuple((float(t), float(q)) for t, q in self.samples)
        if not samples:
            raise ValidationError("hydrograph needs at least one (t, Q) sample")
        ts = [t for t, _ in samples]
        if any(b <= a for a, b in zip(ts[:-1], ts[1:])):
            raise ValidationError("hydrograph times must be strictly increasing")
        if any(q < 0 for _, q in samples):
            raise ValidationError("hydrograph discharges must be non-negative")
        object.__setattr__(self, "samples", samples)

    def at(self, t: float) -> float:
        ts = [s[0] for s in self.samples]
        qs = [s[1] for s in self.samples]
        return float(np.interp(t, ts, qs))

    def integral(self, t_end: float, t_start: float = 0.0) -> float:
        """Volume delivered over [t_start, t_end] (exact, all kinks included)."""
        if t_end <= t_start:
            return 0.0
        ts = [t_start] + [t for t, _ in self.samples if t_start < t < t_end] + [t_end]
        qs = [self.at(t) for t in ts]
        return float(np.trapezoid(qs, ts))


@dataclass(frozen=True)
class SolverConfig:
    t_end: float
    cfl: float = 0.45
    manning_n: float = 0.015
    h_dry: float = 1e-6
    order: int = 2
    g: float = 9.81
    output_stride: float = 60.0

    def __post_init__(self):
        if not 0 < self.cfl <= 1:
            raise ValidationError(f"cfl must be in (0, 1], got {self.cfl}")
        if self.order not in (1, 2):
            raise ValidationError(f"order must be 1 or 2, got {self.order}")
        for name in ("t_end", "h_dry", "g", "output_stride"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.manning_n < 0:
            raise ValidationError("manning_n must be non-negative")


@dataclass(frozen=True)
class BoundarySpec:
    """Hydrograph inflow on part of one edge, open sea on another, walls elsewhere.

    ``upstream_range`` is a half-open index range along the upstream edge
    (row indices for west/east edges, column indices for north/south).
    A ``None`` boundary everywhere in this module means a closed box (all
    four edges reflective walls).
    """

    upstream_edge: str
    upstream_range: tuple
    hydrograph: Hydrograph
    downstream_edge: str
    sea_level: float = -1e30  # far below any terrain: plain Neumann outflow

    def __post_init__(self):
        if self.upstream_edge not in EDGES or self.downstream_edge not in EDGES:
            raise ValidationError(f"edges must be one of {EDGES}")
        if self.upstream_edge == self.downstream_edge:
            raise ValidationError("upstream and downstream edges must be disjoint")
        start, stop = self.upstream_range
        if not 0 <= start < stop:
            raise ValidationError(f"bad upstream range {self.upstream_range}")
        object.__setattr__(self, "upstream_range", (int(start), int(stop)))


# ---------------------------------------------------------------------------
# Flow state
# ---------------------------------------------------------------------------

@dataclass
class FlowState:
    """Conserved variables on the grid plus running maxima.

    Invariants kept by :func:`step`: h >= 0 everywhere, momentum is zero
    wherever h < h_dry, and the maxima are cell-wise non-decreasing.
    """

    geometry: GridGeometry
    h: np.ndarray
    hu: np.ndarray
    hv: np.ndarray
    t: float = 0.0
    h_max: np.ndarray = None
    wse_max: np.ndarray = None
    wet_ever: np.ndarray = None

    def __post_init__(self):
        shape = (self.geometry.nrows, self.geometry.ncols)
        for name in ("h", "hu", "hv"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"{name} shape {arr.shape} != grid {shape}")
            setattr(self, name, arr)
        if self.h_max is None:
            self.h_max = self.h.copy()
        if self.wse_max is None:
            self.wse_max = np.full(shape, -np.inf)
        if self.wet_ever is None:
            self.wet_ever = np.zeros(shape, dtype=bool)
        self.mass_rates = (0.0, 0.0)  # (inflow, outflow) m3/s of the last step

    @classmethod
    def dry(cls, geometry: GridGeometry) -> "FlowState":
        shape = (geometry.nrows, geometry.ncols)
        return cls(geometry, np.zeros(shape), np.zeros(shape), np.zeros(shape))

    def copy(self) -> "FlowState":
        return FlowState(
            self.geometry, self.h.copy(), self.hu.copy(), self.hv.copy(),
            self.t, self.h_max.copy(), self.wse_max.copy(), self.wet_ever.copy(),
        )

    def record_maxima(self, z: np.ndarray, h_dry: float) -> None:
        np.maximum(self.h_max, self.h, out=self.h_max)
        wet = self.h > h_dry
        self.wet_ever |= wet
        wse = np.where(wet, self.h + z, -np.inf)
        np.maximum(self.wse_max, wse, out=self.wse_max)

    def wse_max_raster(self) -> Raster:
        """Maximal water surface elevation; nodata where water never arrived."""
        nodata = self.geometry.nodata_value
        vals = np.where(self.wet_ever, self.wse_max, nodata)
        return Raster(self.geometry, vals)

    def h_max_raster(self) -> Raster:
        return Raster(self.geometry, self.h_max)

    def volume(self) -> float:
        return float(self.h.sum()) * self.geometry.cell_size**2


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def minmod(a, b):
    """Minmod limiter: smaller-magnitude argument when signs agree, else 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.where(a * b > 0.0, np.where(np.abs(a) < np.abs(b), a, b), 0.0)


def muscl_slopes(left, center, right):
    """Minmod-limited cell slope from a three-point stencil (per cell width)."""
    center = np.asarray(center, dtype=np.float64)
    return minmod(center - left, right - center)


def hydrostatic_reconstruction(h_l, z_l, h_r, z_r):
    """Interface depths over the higher of the two bottoms, clamped at zero.

    Equivalent to max(0, h + z - max(z_l, z_r)) but computed as a depth
    reduction so a flat bottom is an exact identity; reconstructed depths
    are non-negative and never exceed the originals, and equal surfaces give
    equal reconstructed depths (lake at rest stays balanced).
    """
    z_l = np.asarray(z_l, dtype=np.float64)
    z_r = np.asarray(z_r, dtype=np.float64)
    h_l = np.asarray(h_l, dtype=np.float64)
    h_r = np.asarray(h_r, dtype=np.float64)
    h_l_star = np.maximum(0.0, h_l - np.maximum(0.0, z_r - z_l))
    h_r_star = np.maximum(0.0, h_r - np.maximum(0.0, z_l - z_r))
    return h_l_star, h_r_star


def _hll(h_l, u_l, w_l, h_r, u_r, w_r, g):
    """HLL flux for states (h, normal velocity u, transverse velocity w).

    Returns (mass, normal momentum, transverse momentum) fluxes. Identical
    states short-circuit to the exact flux; dry-dry interfaces yield zero.
    """
    c_l = np.sqrt(g * h_l)
    c_r = np.sqrt(g * h_r)
    s_l = np.minimum(u_l - c_l, u_r - c_r)
    s_r = np.maximum(u_l + c_l, u_r + c_r)

    fm_l, fm_r = h_l * u_l, h_r * u_r
    fn_l = fm_l * u_l + 0.5 * g * h_l * h_l
    fn_r = fm_r * u_r + 0.5 * g * h_r * h_r
    ft_l, ft_r = fm_l * w_l, fm_r * w_r

    span = s_r - s_l
    safe = np.where(span > 0.0, span, 1.0)
    fm_m = (s_r * fm_l - s_l * fm_r + s_l * s_r * (h_r - h_l)) / safe
    fn_m = (s_r * fn_l - s_l * fn_r + s_l * s_r * (h_r * u_r - h_l * u_l)) / safe
    ft_m = (s_r * ft_l - s_l * ft_r + s_l * s_r * (h_r * w_r - h_l * w_l)) / safe

    fm = np.where(s_l >= 0.0, fm_l, np.where(s_r <= 0.0, fm_r, fm_m))
    fn = np.where(s_l >= 0.0, fn_l, np.where(s_r <= 0.0, fn_r, fn_m))
    ft = np.where(s_l >= 0.0, ft_l, np.where(s_r <= 0.0, ft_r, ft_m))

    same = (h_l == h_r) & (u_l == u_r) & (w_l == w_r)
    fm = np.where(same, fm_l, fm)
    fn = np.where(same, fn_l, fn)
    ft = np.where(same, ft_l, ft)

    dry = (h_l <= 0.0) & (h_r <= 0.0)
    zero = np.zeros_like(fm)
    return (
        np.where(dry, zero, fm),
        np.where(dry, zero, fn),
        np.where(dry, zero, ft),
    )


def hll_flux(left, right, direction: str = "x", g: float = 9.81):
    """HLL flux between two (h, hu, hv) states along 'x' or 'y'.

    Momentum is converted to velocity internally (dry side treated as
    still). The result is ordered like the conserved variables (h, hu, hv).
    """
    if direction not in ("x", "y"):
        raise ValidationError(f"direction must be 'x' or 'y', got {direction!r}")
    h_l, hu_l, hv_l = (np.asarray(a, dtype=np.float64) for a in left)
    h_r, hu_r, hv_r = (np.asarray(a, dtype=np.float64) for a in right)
    u_l = np.where(h_l > 0, hu_l / np.where(h_l > 0, h_l, 1.0), 0.0)
    v_l = np.where(h_l > 0, hv_l / np.where(h_l > 0, h_l, 1.0), 0.0)
    u_r = np.where(h_r > 0, hu_r / np.where(h_r > 0, h_r, 1.0), 0.0)
    v_r = np.where(h_r > 0, hv_r / np.where(h_r > 0, h_r, 1.0), 0.0)
    if direction == "x":
        fm, fn, ft = _hll(h_l, u_l, v_l, h_r, u_r, v_r, g)
        return fm, fn, ft
    fm, fn, ft = _hll(h_l, v_l, u_l, h_r, v_r, u_r, g)
    return fm, ft, fn


def compute_dt(state: FlowState, config: SolverConfig) -> float:
    """CFL time step from the fastest wet-cell wave speed; stride if all dry."""
    if USE_KERNEL:
        fastest = _max_wave_speed(state.h, state.hu, state.hv, config.h_dry, config.g)
        if fastest < 0.0:
            return config.output_stride
        return config.cfl * state.geometry.cell_size / fastest
    wet = state.h >= config.h_dry
    if not wet.any():
        return config.output_stride
    h = state.h[wet]
    c = np.sqrt(config.g * h)
    speed_u = np.abs(state.hu[wet] / h) + c
    speed_v = np.abs(state.hv[wet] / h) + c
    fastest = max(speed_u.max(), speed_v.max())
    return config.cfl * state.geometry.cell_size / fastest


def apply_friction(state: FlowState, dt: float, config: SolverConfig) -> FlowState:
    """Semi-implicit Manning friction: damps velocity, never flips its sign."""
    out = state.copy()
    _friction_inplace(out.h, out.hu, out.hv, dt, config)
    return out


def _friction_inplace(h, hu, hv, dt, config):
    if config.manning_n == 0.0:
        return
    idx = np.flatnonzero(h.ravel() >= config.h_dry)
    if idx.size == 0:
        return
    hw = h.ravel()[idx]
    u = hu.ravel()[idx] / hw
    v = hv.ravel()[idx] / hw
    speed = np.sqrt(u * u + v * v)
    factor = 1.0 / (1.0 + dt * config.g * config.manning_n**2 * speed / hw ** (4.0 / 3.0))
    hu.reshape(-1)[idx] *= factor
    hv.reshape(-1)[idx] *= factor


# ---------------------------------------------------------------------------
# Boundaries
# ---------------------------------------------------------------------------

def _edge_slices(edge: str, ny: int, nx: int):
    """(ghost indexer, interior indexer) into a padded array for one edge."""
    if edge == "north":
        return (0, slice(1, nx + 1)), (1, slice(1, nx + 1))
    if edge == "south":
        return (ny + 1, slice(1, nx + 1)), (ny, slice(1, nx + 1))
    if edge == "west":
        return (slice(1, ny + 1), 0), (slice(1, ny + 1), 1)
    return (slice(1, ny + 1), nx + 1), (slice(1, ny + 1), nx)


def _pad_with_walls(h, hu, hv, z):
    ny, nx = h.shape
    hp = np.empty((ny + 2, nx + 2))
    hup = np.empty_like(hp)
    hvp = np.empty_like(hp)
    zp = np.empty_like(hp)
    for arr, pad in ((h, hp), (hu, hup), (hv, hvp), (z, zp)):
        pad[1:-1, 1:-1] = arr
        pad[0, 1:-1] = arr[0]
        pad[-1, 1:-1] = arr[-1]
        pad[1:-1, 0] = arr[:, 0]
        pad[1:-1, -1] = arr[:, -1]
        pad[0, 0], pad[0, -1] = arr[0, 0], arr[0, -1]
        pad[-1, 0], pad[-1, -1] = arr[-1, 0], arr[-1, -1]
    # mirror the normal momentum on each edge
    hup[1:-1, 0] = -hu[:, 0]
    hup[1:-1, -1] = -hu[:, -1]
    hvp[0, 1:-1] = -hv[0]
    hvp[-1, 1:-1] = -hv[-1]
    return hp, hup, hvp, zp


def _apply_boundaries_arrays(h, hu, hv, z, t, boundary, config, dx):
    """Padded (h, hu, hv, z) with ghost cells set per the boundary spec."""
    ny, nx = h.shape
    hp, hup, hvp, zp = _pad_with_walls(h, hu, hv, z)
    if boundary is None:
        return hp, hup, hvp, zp

    # downstream: Neumann copy with the water surface floored at sea level
    ghost, interior = _edge_slices(boundary.downstream_edge, ny, nx)
    h_int, z_int = hp[interior], zp[interior]
    hp[ghost] = np.where(h_int + z_int < boundary.sea_level,
                         np.maximum(0.0, boundary.sea_level - z_int), h_int)
    hup[ghost] = hup[interior]
    hvp[ghost] = hvp[interior]

    # upstream: imposed unit discharge over the active range; wall when Q = 0
    discharge = boundary.hydrograph.at(t)
    if discharge > 0.0:
        start, stop = boundary.upstream_range
        along = ny if boundary.upstream_edge in ("west", "east") else nx
        if stop > along:
            raise ValidationError(
                f"upstream range {boundary.upstream_range} exceeds the grid edge ({along} cells)")
        q = discharge / ((stop - start) * dx)
        h_crit = (q * q / config.g) ** (1.0 / 3.0)
        ghost, interior = _edge_slices(boundary.upstream_edge, ny, nx)
        span = slice(start + 1, stop + 1)  # shift into padded coordinates
        if boundary.upstream_edge in ("west", "east"):
            gsel, isel = (span, ghost[1]), (span, interior[1])
        else:
            gsel, isel = (ghost[0], span), (interior[0], span)
        h_int = hp[isel]
        hp[gsel] = np.where(h_int >= config.h_dry, h_int, h_crit)
        sign = {"west": 1.0, "east": -1.0, "south": 1.0, "north": -1.0}[boundary.upstream_edge]
        if boundary.upstream_edge in ("west", "east"):
            hup[gsel] = sign * q
            hvp[gsel] = 0.0
        else:
            hvp[gsel] = sign * q
            hup[gsel] = 0.0
    return hp, hup, hvp, zp


def apply_boundaries(state: FlowState, boundary: BoundarySpec | None, topo: Raster,
                     config: SolverConfig):
    """Ghost-cell values as padded (h, hu, hv, z) arrays (ghost ring included)."""
    return _apply_boundaries_arrays(
        state.h, state.hu, state.hv, topo.values, state.t, boundary, config,
        state.geometry.cell_size,
    )


def edge_range_for_span(geometry: GridGeometry, edge: str, lo: float, hi: float):
    """Index range along an edge whose cell centers fall inside [lo, hi] meters.

    Rows for west/east edges (y span), columns for north/south (x span); this
    keeps boundary configs resolution-independent.
    """
    if edge not in EDGES:
        raise ValidationError(f"edge must be one of {EDGES}")
    centers = geometry.y_centers() if edge in ("west", "east") else geometry.x_centers()
    idx = np.flatnonzero((centers >= lo) & (centers <= hi))
    if idx.size == 0:
        raise ValidationError(f"no {edge}-edge cells with centers inside [{lo}, {hi}]")
    return int(idx.min()), int(idx.max()) + 1


def plane_fill_state(topo: Raster, surface_at_x0: float, slope: float,
                     y_center: float | None = None, y_half: float = np.inf) -> FlowState:
    """Still water under an x-inclined surface plane, optionally in a y band.

    Stands in for a hot start: pre-filling the channel with the base flow
    skips the minutes of spin-up a dry start would need.
    """
    g = topo.geometry
    x = g.x_centers()[None, :]
    surface = surface_at_x0 - slope * x
    h = np.maximum(0.0, surface - topo.values)
    if y_center is not None:
        y = g.y_centers()[:, None]
        h = np.where(np.abs(y - y_center) <= y_half, h, 0.0)
    return FlowState(g, h, np.zeros_like(h), np.zeros_like(h))


# ---------------------------------------------------------------------------
# The conservative update
# ---------------------------------------------------------------------------

def _limited_slopes(arr, h_pad, h_dry, axis):
    """Minmod slopes on a padded array; zero in ghosts and on dry cells.

    Cells adjacent to a boundary keep a zero slope in the boundary-normal
    direction so that wall interfaces see exact mirror states (otherwise the
    reflected ghost faces a reconstructed interior face and the wall leaks).
    """
    s = np.zeros_like(arr)
    if axis == "x":
        s[:, 2:-2] = muscl_slopes(arr[:, 1:-3], arr[:, 2:-2], arr[:, 3:-1])
    else:
        # along +y the southern neighbour (row k+1) is "left"
        s[2:-2, :] = muscl_slopes(arr[3:-1, :], arr[2:-2, :], arr[1:-3, :])
    s[h_pad < h_dry] = 0.0
    return s


def _spatial_rates(h, hu, hv, z, t, geom, boundary, config):
    """Rates of change from fluxes and topography, plus boundary mass fluxes.

    Momentum sources use the combined form: per cell, the interface pressure
    corrections and the centered topography term collapse to
    g * mean(face depths) * (surface difference across the cell), which
    vanishes identically at rest.
    """
    dx = geom.cell_size
    hp, hup, hvp, zp = _apply_boundaries_arrays(h, hu, hv, z, t, boundary, config, dx)
    if USE_KERNEL:
        dh, dhu, dhv, fw, fe, fn_, fs = _rates_kernel(
            hp, hup, hvp, zp, config.order, config.g, config.h_dry, dx)
        return (dh, dhu, dhv), _boundary_mass_rates(fw, fe, fn_, fs, boundary, dx)
    return _spatial_rates_numpy(hp, hup, hvp, zp, geom, boundary, config)


def _spatial_rates_numpy(hp, hup, hvp, zp, geom, boundary, config):
    dx = geom.cell_size
    g = config.g
    ny, nx = geom.nrows, geom.ncols

    wet = hp >= config.h_dry
    hsafe = np.where(wet, hp, 1.0)
    up = np.where(wet, hup / hsafe, 0.0)
    vp = np.where(wet, hvp / hsafe, 0.0)
    etap = hp + zp

    if config.order == 2:
        sh_x = _limited_slopes(hp, hp, config.h_dry, "x")
        np.clip(sh_x, -2.0 * hp, 2.0 * hp, out=sh_x)  # keep face depths >= 0
        su_x = _limited_slopes(up, hp, config.h_dry, "x")
        sv_x = _limited_slopes(vp, hp, config.h_dry, "x")
        se_x = _limited_slopes(etap, hp, config.h_dry, "x")
        sh_y = _limited_slopes(hp, hp, config.h_dry, "y")
        np.clip(sh_y, -2.0 * hp, 2.0 * hp, out=sh_y)
        su_y = _limited_slopes(up, hp, config.h_dry, "y")
        sv_y = _limited_slopes(vp, hp, config.h_dry, "y")
        se_y = _limited_slopes(etap, hp, config.h_dry, "y")
    else:
        zero = np.zeros_like(hp)
        sh_x = su_x = sv_x = se_x = zero
        sh_y = su_y = sv_y = se_y = zero

    rows = slice(1, ny + 1)
    cols = slice(1, nx + 1)

    # --- x sweep -----------------------------------------------------------
    hE, hW = hp + 0.5 * sh_x, hp - 0.5 * sh_x
    uE, uW = up + 0.5 * su_x, up - 0.5 * su_x
    vE, vW = vp + 0.5 * sv_x, vp - 0.5 * sv_x
    etaE, etaW = etap + 0.5 * se_x, etap - 0.5 * se_x
    zE, zW = etaE - hE, etaW - hW

    # interface j sits between columns j and j+1; the west cell is "left"
    h_l, u_l, v_l = hE[rows, :-1], uE[rows, :-1], vE[rows, :-1]
    h_r, u_r, v_r = hW[rows, 1:], uW[rows, 1:], vW[rows, 1:]
    h_ls, h_rs = hydrostatic_reconstruction(h_l, zE[rows, :-1], h_r, zW[rows, 1:])
    fm_x, fn_x, ft_x = _hll(h_ls, u_l, v_l, h_rs, u_r, v_r, g)
    g_l_x = fn_x - 0.5 * g * h_ls * h_ls
    g_r_x = fn_x - 0.5 * g * h_rs * h_rs

    dh = -(fm_x[:, 1:] - fm_x[:, :-1]) / dx
    dhv = -(ft_x[:, 1:] - ft_x[:, :-1]) / dx
    dhu = -(g_l_x[:, 1:] - g_r_x[:, :-1]) / dx
    dhu += g * 0.5 * (hW[rows, cols] + hE[rows, cols]) \
        * (etaW[rows, cols] - etaE[rows, cols]) / dx

    # --- y sweep (interface k between rows k and k+1; the southern row k+1
    # is "left" along +y) -----------------------------------------------------
    hN, hS = hp + 0.5 * sh_y, hp - 0.5 * sh_y
    uN, uS = up + 0.5 * su_y, up - 0.5 * su_y
    vN, vS = vp + 0.5 * sv_y, vp - 0.5 * sv_y
    etaN, etaS = etap + 0.5 * se_y, etap - 0.5 * se_y
    zN, zS = etaN - hN, etaS - hS

    h_l, u_l, v_l = hN[1:, cols], vN[1:, cols], uN[1:, cols]
    h_r, u_r, v_r = hS[:-1, cols], vS[:-1, cols], uS[:-1, cols]
    h_ls, h_rs = hydrostatic_reconstruction(h_l, zN[1:, cols], h_r, zS[:-1, cols])
    fm_y, fn_y, ft_y = _hll(h_ls, u_l, v_l, h_rs, u_r, v_r, g)
    g_l_y = fn_y - 0.5 * g * h_ls * h_ls
    g_r_y = fn_y - 0.5 * g * h_rs * h_rs

    # a cell is the left state at its north interface (index i) and the
    # right state at its south interface (index i+1)
    dh += -(fm_y[:-1] - fm_y[1:]) / dx
    dhu += -(ft_y[:-1] - ft_y[1:]) / dx
    dhv += -(g_l_y[:-1] - g_r_y[1:]) / dx
    dhv += g * 0.5 * (hS[rows, cols] + hN[rows, cols]) \
        * (etaS[rows, cols] - etaN[rows, cols]) / dx

    bnd = _boundary_mass_rates(fm_x[:, 0], fm_x[:, -1], fm_y[0, :], fm_y[-1, :],
                               boundary, dx)
    return (dh, dhu, dhv), bnd


def _boundary_mass_rates(fm_west, fm_east, fm_north, fm_south, boundary, dx):
    """(inflow through the upstream faces, outflow through downstream), m3/s."""
    if boundary is None:
        return 0.0, 0.0
    start, stop = boundary.upstream_range

    def edge_rate(edge, limit_to_range):
        if edge == "west":
            flux, inward = fm_west, 1.0
        elif edge == "east":
            flux, inward = fm_east, -1.0
        elif edge == "north":
            flux, inward = fm_north, -1.0
        else:
            flux, inward = fm_south, 1.0
        if limit_to_range:
            flux = flux[start:stop]
        return inward * float(flux.sum()) * dx

    inflow = edge_rate(boundary.upstream_edge, True)
    outflow = -edge_rate(boundary.downstream_edge, False)
    return inflow, outflow


def _active_rows(state: FlowState, topo: Raster, boundary: BoundarySpec | None):
    """Row band that can change this step: wet rows + margin + boundary rows.

    Everything outside the band is dry with dry neighbours, so its rates are
    exactly zero (including one Heun restep); cropping to the band gives
    bit-identical results at a fraction of the work.
    """
    ny = state.geometry.nrows
    wet = np.flatnonzero((state.h > 0.0).any(axis=1))
    lo = int(wet[0]) if wet.size else ny
    hi = int(wet[-1]) + 1 if wet.size else 0
    if boundary is not None:
        z = topo.values
        for edge in (boundary.upstream_edge, boundary.downstream_edge):
            if edge == "north":
                lo = 0
            elif edge == "south":
                hi = ny
        if boundary.upstream_edge in ("west", "east"):
            lo = min(lo, boundary.upstream_range[0])
            hi = max(hi, boundary.upstream_range[1])
        if boundary.downstream_edge in ("west", "east"):
            col = 0 if boundary.downstream_edge == "west" else -1
            sea = np.flatnonzero(z[:, col] < boundary.sea_level)
            if sea.size:
                lo = min(lo, int(sea[0]))
                hi = max(hi, int(sea[-1]) + 1)
    if lo >= hi:
        return None
    return max(0, lo - 2), min(ny, hi + 2)


def _crop_boundary(boundary: BoundarySpec | None, lo: int) -> BoundarySpec | None:
    if boundary is None or boundary.upstream_edge in ("north", "south") or lo == 0:
        return boundary
    start, stop = boundary.upstream_range
    return BoundarySpec(boundary.upstream_edge, (start - lo, stop - lo),
                        boundary.hydrograph, boundary.downstream_edge,
                        boundary.sea_level)


def step(state: FlowState, topo: Raster, boundary: BoundarySpec | None,
         config: SolverConfig, dt: float | None = None) -> FlowState:
    """One explicit update: Euler (order 1) or two-stage Heun (order 2).

    Returns a new state with maxima updated and t advanced by dt. Raises
    :class:`NumericalInstabilityError` carrying the first offending cell if
    non-finite values appear.
    """
    if not state.geometry.compatible(topo.geometry):
        raise ValidationError("flow state and topography grids are not compatible")
    if dt is None:
        dt = compute_dt(state, config)
    geom = state.geometry

    span = _active_rows(state, topo, boundary)
    if span is None:
        out = state.copy()
        out.t = state.t + dt
        out.mass_rates = (0.0, 0.0)
        return out
    lo, hi = span
    bc = _crop_boundary(boundary, lo)
    crop_geom = geom if (lo, hi) == (0, geom.nrows) else GridGeometry(
        geom.ncols, hi - lo, geom.x_origin, geom.y_origin, geom.cell_size)
    z = topo.values[lo:hi]
    h0 = state.h[lo:hi]
    hu0 = state.hu[lo:hi]
    hv0 = state.hv[lo:hi]

    (dh, dhu, dhv), (qin1, qout1) = _spatial_rates(
        h0, hu0, hv0, z, state.t, crop_geom, bc, config)
    h1 = np.maximum(h0 + dt * dh, 0.0)
    hu1 = hu0 + dt * dhu
    hv1 = hv0 + dt * dhv
    dry = h1 < config.h_dry
    hu1[dry] = 0.0
    hv1[dry] = 0.0

    if config.order == 2:
        (dh, dhu, dhv), (qin2, qout2) = _spatial_rates(
            h1, hu1, hv1, z, state.t + dt, crop_geom, bc, config)
        h2 = np.maximum(h1 + dt * dh, 0.0)
        hu2 = hu1 + dt * dhu
        hv2 = hv1 + dt * dhv
        h_new = 0.5 * (h0 + h2)
        hu_new = 0.5 * (hu0 + hu2)
        hv_new = 0.5 * (hv0 + hv2)
        inflow_rate = 0.5 * (qin1 + qin2)
        outflow_rate = 0.5 * (qout1 + qout2)
    else:
        h_new, hu_new, hv_new = h1, hu1, hv1
        inflow_rate, outflow_rate = qin1, qout1

    _friction_inplace(h_new, hu_new, hv_new, dt, config)
    dry = h_new < config.h_dry
    hu_new[dry] = 0.0
    hv_new[dry] = 0.0

    bad = ~(np.isfinite(h_new) & np.isfinite(hu_new) & np.isfinite(hv_new))
    if bad.any():
        cell = np.argwhere(bad)[0]
        raise NumericalInstabilityError((int(cell[0]) + lo, int(cell[1])), state.t + dt)

    out = state.copy()
    out.t = state.t + dt
    out.h[lo:hi] = h_new
    out.hu[lo:hi] = hu_new
    out.hv[lo:hi] = hv_new
    _record_maxima_band(out, z, lo, hi, config.h_dry)
    out.mass_rates = (inflow_rate, outflow_rate)
    return out


def _record_maxima_band(state: FlowState, z_band, lo: int, hi: int, h_dry: float):
    h = state.h[lo:hi]
    np.maximum(state.h_max[lo:hi], h, out=state.h_max[lo:hi])
    wet = h > h_dry
    state.wet_ever[lo:hi] |= wet
    wse = np.where(wet, h + z_band, -np.inf)
    np.maximum(state.wse_max[lo:hi], wse, out=state.wse_max[lo:hi])


# ---------------------------------------------------------------------------
# Hot start files
# ---------------------------------------------------------------------------

def save_hot_start(state: FlowState, path) -> None:
    """Lossless dump of (t, h, hu, hv) so a resumed run continues bit-exactly."""
    with open(path, "w") as fh:
        fh.write(f"t {EXACT_FORMAT % state.t}\n")
        for marker, arr in (("h", state.h), ("hu", state.hu), ("hv", state.hv)):
            fh.write(f"[{marker}]\n")
            write_ascii_grid(Raster(state.geometry, arr), fh, fmt=EXACT_FORMAT)


def load_hot_start(path) -> FlowState:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("t "):
        raise ValidationError(f"{path}: expected 't <seconds>' on line 1")
    t = float(lines[0].split()[1])

    sections = {}
    order = []
    i = 1
    while i < len(lines):
        marker = lines[i].strip()
        if not (marker.startswith("[") and marker.endswith("]")):
            raise ValidationError(f"{path}: expected section marker, got {marker!r}")
        name = marker[1:-1]
        start = i + 1
        i = start
        while i < len(lines) and not lines[i].startswith("["):
            i += 1
        sections[name] = read_ascii_grid(io.StringIO("\n".join(lines[start:i]) + "\n"))
        order.append(name)
    if order != ["h", "hu", "hv"]:
        raise ValidationError(f"{path}: expected sections [h][hu][hv], got {order}")

    geom = sections["h"].geometry
    for name in ("hu", "hv"):
        if not sections[name].geometry.compatible(geom):
            raise ValidationError(f"{path}: section [{name}] grid differs from [h]")
    return FlowState(geom, sections["h"].values.copy(), sections["hu"].values.copy(),
                     sections["hv"].values.copy(), t)


# ---------------------------------------------------------------------------
# Simulation driver
# ---------------------------------------------------------------------------

@dataclass
class SimulationOutput:
    """Results and mass ledger of one run; failed runs carry diagnostics."""

    status: str  # "ok" | "failed"
    wse_max: Raster
    h_max: Raster
    final_state: FlowState
    ledger: list  # rows (t, inflow_vol, outflow_vol, storage)
    inflow_volume: float
    outflow_volume: float
    wall_clock: float
    n_steps: int
    failure_reason: str = ""


def write_ledger_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("t,inflow_vol,outflow_vol,storage\n")
        for t, qin, qout, storage in rows:
            fh.write(f"{t!r},{qin!r},{qout!r},{storage!r}\n")


def _inflow_dt_cap(state, boundary, config):
    """Keep the first wetting steps stable when the domain starts dry.

    The CFL formula sees no wet cells then, so bound dt by the wave speed of
    the critical inflow state instead.
    """
    if boundary is None:
        return np.inf
    discharge = boundary.hydrograph.at(state.t)
    if discharge <= 0.0 or (state.h >= config.h_dry).any():
        return np.inf
    start, stop = boundary.upstream_range
    q = discharge / ((stop - start) * state.geometry.cell_size)
    h_crit = (q * q / config.g) ** (1.0 / 3.0)
    celerity = np.sqrt(config.g * h_crit)
    return config.cfl * state.geometry.cell_size / (q / h_crit + celerity)


def run_simulation(topo: Raster, initial, boundary: BoundarySpec | None,
                   config: SolverConfig) -> SimulationOutput:
    """Advance to t_end tracking maxima and the mass-balance ledger.

    ``initial`` may be a FlowState, a hot-start file path, or None for a dry
    start. Solver blow-ups are reported in the output, not raised.
    """
    started = time.perf_counter()
    if initial is None:
        state = FlowState.dry(topo.geometry)
    elif isinstance(initial, FlowState):
        state = initial.copy()
    else:
        state = load_hot_start(initial)
    if not state.geometry.compatible(topo.geometry):
        raise ValidationError("initial state grid does not match the topography")
    state.record_maxima(topo.values, config.h_dry)

    inflow = outflow = 0.0
    ledger = [(state.t, 0.0, 0.0, state.volume())]
    next_out = state.t + config.output_stride
    n_steps = 0
    status, reason = "ok", ""
    eps = 1e-12

    bad = ~np.isfinite(topo.values)
    if bad.any():
        cell = tuple(int(i) for i in np.argwhere(bad)[0])
        status = "failed"
        reason = str(NumericalInstabilityError(cell, state.t))

    while status == "ok" and state.t < config.t_end - eps:
        dt = compute_dt(state, config)
        dt = min(dt, config.t_end - state.t, next_out - state.t,
                 _inflow_dt_cap(state, boundary, config))
        try:
            state = step(state, topo, boundary, config, dt=dt)
        except NumericalInstabilityError as err:
            status, reason = "failed", str(err)
            break
        qin, qout = state.mass_rates
        inflow += qin * dt
        outflow += qout * dt
        n_steps += 1
        if state.t >= next_out - eps:
            ledger.append((state.t, inflow, outflow, state.volume()))
            next_out += config.output_stride
    if ledger[-1][0] < state.t - eps:
        ledger.append((state.t, inflow, outflow, state.volume()))

    return SimulationOutput(
        status=status,
        wse_max=state.wse_max_raster(),
        h_max=state.h_max_raster(),
        final_state=state,
        ledger=ledger,
        inflow_volume=inflow,
        outflow_volume=outflow,
        wall_clock=time.perf_counter() - started,
        n_steps=n_steps,
        failure_reason=reason,
    )

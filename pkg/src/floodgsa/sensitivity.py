"""Uncertainty analysis over campaign outputs: convergence, distributions,
first-order Sobol indices (pointwise and as maps), and a pick-freeze
estimator for validating the machinery on analytic functions.

The factorial estimator is the plug-in conditional-mean decomposition: the
share of output variance explained by a factor is the population variance of
the per-level means (weighted by level counts) over the total variance.
Confidence intervals bootstrap whole error realizations so the factorial
design structure is respected.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dem import CaseId
from .errors import DegenerateOutputError, ValidationError
from .raster import GridGeometry, Raster

FACTORS = ("S", "R", "E")
INDEX_TOLERANCE = 0.05  # estimator noise band around [0, 1]


def _degenerate_variance(variance, values) -> bool:
    """True when the spread is indistinguishable from rounding noise."""
    scale = float(np.max(np.abs(values), initial=0.0))
    return variance <= (1e-12 * max(scale, 1e-300)) ** 2


# ---------------------------------------------------------------------------
# Sample table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleTable:
    """Matrix of maximal water surface elevations: rows cases, columns points."""

    cases: tuple
    points: tuple
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (len(self.cases), len(self.points)):
            raise ValidationError(f"table shape {y.shape} != cases x points")
        if not np.isfinite(y).all():
            raise ValidationError("sample table contains non-finite values")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    def column(self, point: str) -> np.ndarray:
        if point not in self.points:
            raise ValidationError(f"unknown point {point!r}")
        return self.y[:, self.points.index(point)]

    def factor_values(self, factor: str) -> np.ndarray:
        if factor == "S":
            return np.array([c.m for c in self.cases])
        if factor == "R":
            return np.array([c.n for c in self.cases])
        if factor == "E":
            return np.array([c.x for c in self.cases])
        raise ValidationError(f"unknown factor {factor!r}; expected one of {FACTORS}")

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("case,point,y\n")
            for i, case in enumerate(self.cases):
                for j, point in enumerate(self.points):
                    fh.write(f"{case},{point},{float(self.y[i, j])!r}\n")

    @classmethod
    def load_csv(cls, path) -> "SampleTable":
        data: dict = {}
        points_seen: list = []
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "case,point,y":
                raise ValidationError(f"{path}: expected header 'case,point,y'")
            for line in fh:
                case_s, point, y_s = line.strip().split(",")
                data.setdefault(CaseId.parse(case_s), {})[point] = float(y_s)
                if point not in points_seen:
                    points_seen.append(point)
        cases = sorted(data)
        rows = []
        for case in cases:
            row = data[case]
            missing = [p for p in points_seen if p not in row]
            if missing:
                raise ValidationError(f"{path}: case {case} missing points {missing}")
            rows.append([row[p] for p in points_seen])
        return cls(tuple(cases), tuple(points_seen), np.array(rows))


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    point: str
    sizes: list
    means: list
    ci_low: list
    ci_high: list
    stds: list
    stable: list  # flag per size
    stable_at: int | None

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("n,mean,ci_low,ci_high,std,stable\n")
            for i, n in enumerate(self.sizes):
                fh.write(f"{n},{self.means[i]!r},{self.ci_low[i]!r},"
                         f"{self.ci_high[i]!r},{self.stds[i]!r},{int(self.stable[i])}\n")


def convergence_curve(table: SampleTable, point: str, fixed: tuple,
                      seed: int = 0, n_boot: int = 1000) -> ConvergenceReport:
    """Mean and bootstrap 95% CI of the output over growing error-sample sizes.

    The sample order is a fixed seeded permutation, so each size N uses a
    nested prefix. The stability flag is set at the first N where the CI
    half-width moved by less than 5% of the output scale (|mean|, floored by
    the sample spread) across each of the last three increments.
    """
    m, n = fixed
    y_all = table.column(point)
    mask = (table.factor_values("S") == m) & (table.factor_values("R") == n)
    if not mask.any():
        raise ValidationError(f"no cases with S={m}, R={n}")
    order = np.argsort(table.factor_values("E")[mask])
    y = y_all[mask][order]
    if len(y) < 5:
        raise ValidationError(f"need at least 5 error realizations, have {len(y)}")

    rng = np.random.default_rng(seed)
    y = y[rng.permutation(len(y))]
    sizes = list(range(5, len(y) + 1, 5))

    means, lows, highs, stds, halves = [], [], [], [], []
    for size in sizes:
        sample = y[:size]
        boots = rng.choice(sample, size=(n_boot, size), replace=True).mean(axis=1)
        lo, hi = np.percentile(boots, [2.5, 97.5])
        means.append(float(sample.mean()))
        lows.append(float(lo))
        highs.append(float(hi))
        stds.append(float(sample.std(ddof=1)))
        halves.append(float((hi - lo) / 2.0))

    stable = [False] * len(sizes)
    stable_at = None
    for i in range(len(sizes)):
        if i < 3:
            continue
        ok = True
        for k in (i - 2, i - 1, i):
            scale = max(abs(means[k]), stds[k], 1e-300)
            if abs(halves[k] - halves[k - 1]) >= 0.05 * scale:
                ok = False
                break
        stable[i] = ok
        if ok and stable_at is None:
            stable_at = sizes[i]
    # a constant sample is stable from the start
    if all(h == 0.0 for h in halves):
        stable = [True] * len(sizes)
        stable_at = sizes[0]

    return ConvergenceReport(point, sizes, means, lows, highs, stds, stable, stable_at)


# ---------------------------------------------------------------------------
# Fixed-factor distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalDistribution:
    values: np.ndarray  # sorted
    mean: float
    std: float
    min: float
    max: float
    q25: float
    q50: float
    q75: float

    @classmethod
    def from_values(cls, values) -> "EmpiricalDistribution":
        v = np.sort(np.asarray(values, dtype=np.float64))
        q25, q50, q75 = np.percentile(v, [25, 50, 75])
        return cls(v, float(v.mean()), float(v.std(ddof=0)), float(v[0]),
                   float(v[-1]), float(q25), float(q50), float(q75))


def fixed_factor_distributions(table: SampleTable, point: str, fix: tuple) -> dict:
    """Empirical output distributions per level of the non-fixed factor.

    ``fix`` names one discrete factor and its level, e.g. ("S", 2); the
    result maps each level of the other factor to the distribution of the
    output pooled over error realizations.
    """
    factor, level = fix
    if factor not in ("S", "R"):
        raise ValidationError("fix must name 'S' or 'R'")
    other = "R" if factor == "S" else "S"
    mask = table.factor_values(factor) == level
    if not mask.any():
        raise ValidationError(f"no cases with {factor}={level}")
    y = table.column(point)[mask]
    other_vals = table.factor_values(other)[mask]
    return {
        int(lvl): EmpiricalDistribution.from_values(y[other_vals == lvl])
        for lvl in np.unique(other_vals)
    }


# ---------------------------------------------------------------------------
# First-order Sobol indices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FactorIndex:
    s: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class SobolIndices:
    """First-order indices per factor; factors with one level are absent."""

    indices: dict  # factor name -> FactorIndex
    n_samples: int

    def ranking(self) -> list:
        return sorted(self.indices, key=lambda f: self.indices[f].s, reverse=True)

    def dominant(self) -> str:
        return self.ranking()[0]


def _first_order_share(y: np.ndarray, levels: np.ndarray, variance: float) -> float:
    """Weighted variance of the per-level means over the total variance."""
    total = 0.0
    mean = y.mean()
    for level in np.unique(levels):
        sel = y[levels == level]
        total += sel.size * (sel.mean() - mean) ** 2
    return total / y.size / variance


def sobol_first_order_factorial(table: SampleTable, point: str, seed: int = 0,
                                n_boot: int = 1000) -> SobolIndices:
    """Plug-in first-order indices from the factorial design at one point.

    Uses available-case means (a warning reports imbalance from excluded
    runs); bootstrap CIs resample whole error realizations. Raises if the
    output variance is zero or an estimate escapes [-0.05, 1.05].
    """
    y = table.column(point)
    variance = float(y.var(ddof=0))
    if _degenerate_variance(variance, y):
        raise DegenerateOutputError(f"zero output variance at point {point!r}")

    factor_levels = {f: table.factor_values(f) for f in FACTORS}
    active = {f: lv for f, lv in factor_levels.items() if np.unique(lv).size > 1}

    counts = [np.unique(lv, return_counts=True)[1] for lv in factor_levels.values()]
    if any(c.size > 1 and not (c == c[0]).all() for c in counts):
        warnings.warn("unbalanced design (excluded runs?); using available-case means",
                      stacklevel=2)

    estimates = {f: _first_order_share(y, lv, variance) for f, lv in active.items()}

    # bootstrap whole error realizations
    rng = np.random.default_rng(seed)
    x_vals = factor_levels["E"]
    x_levels = np.unique(x_vals)
    rows_by_x = [np.flatnonzero(x_vals == x) for x in x_levels]
    boots = {f: [] for f in active}
    for _ in range(n_boot):
        draw = rng.integers(0, len(x_levels), len(x_levels))
        rows = np.concatenate([rows_by_x[d] for d in draw])
        y_b = y[rows]
        var_b = y_b.var(ddof=0)
        if _degenerate_variance(var_b, y_b):
            continue
        for f in active:
            boots[f].append(_first_order_share(y_b, factor_levels[f][rows], var_b))

    indices = {}
    for f, s in estimates.items():
        if not (-INDEX_TOLERANCE <= s <= 1.0 + INDEX_TOLERANCE):
            raise ValidationError(f"index {f}={s:.4f} outside [-0.05, 1.05] at {point!r}")
        if boots[f]:
            lo, hi = np.percentile(boots[f], [2.5, 97.5])
        else:
            lo = hi = s
        indices[f] = FactorIndex(float(s), float(lo), float(hi))
    return SobolIndices(indices, int(y.size))


def write_indices_csv(per_point: dict, path) -> None:
    """Rows ``point,factor,s,ci_low,ci_high,n`` for every computed index."""
    with open(path, "w") as fh:
        fh.write("point,factor,s,ci_low,ci_high,n\n")
        for point, result in per_point.items():
            for f in FACTORS:
                if f in result.indices:
                    idx = result.indices[f]
                    fh.write(f"{point},{f},{idx.s!r},{idx.ci_low!r},"
                             f"{idx.ci_high!r},{result.n_samples}\n")


# ---------------------------------------------------------------------------
# Pick-freeze (Saltelli) estimator for analytic validation
# ---------------------------------------------------------------------------

def sobol_pick_freeze(model, bounds, n: int, seed: int = 0,
                      n_boot: int = 200) -> SobolIndices:
    """First-order indices of ``model`` over independent uniform inputs.

    ``model`` maps an (n, p) array to an (n,) output; 2N + pN evaluations
    total. This validates the index machinery on closed-form cases
    independently of the simulation pipeline.
    """
    if n < 100:
        raise ValidationError("pick-freeze needs at least 100 samples")
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    p = len(bounds)
    rng = np.random.default_rng(seed)

    def draw():
        u = rng.random((n, p))
        return np.column_stack([lo + (hi - lo) * u[:, i]
                                for i, (lo, hi) in enumerate(bounds)])

    a = draw()
    b = draw()
    f_a = np.asarray(model(a), dtype=np.float64)
    f_b = np.asarray(model(b), dtype=np.float64)
    if not (np.isfinite(f_a).all() and np.isfinite(f_b).all()):
        raise ValidationError("model returned non-finite values")
    center = np.concatenate([f_a, f_b]).mean()  # makes the estimator shift-invariant
    elems = []
    for i in range(p):
        ab_i = a.copy()
        ab_i[:, i] = b[:, i]
        f_ab = np.asarray(model(ab_i), dtype=np.float64)
        if not np.isfinite(f_ab).all():
            raise ValidationError("model returned non-finite values")
        elems.append((f_b - center) * (f_ab - f_a))

    pooled = np.concatenate([f_a, f_b])
    variance = pooled.var(ddof=0)
    if _degenerate_variance(variance, pooled):
        raise DegenerateOutputError("zero model output variance")
    estimates = [float(e.mean() / variance) for e in elems]

    lows = [np.empty(0)] * p
    chunks = {i: [] for i in range(p)}
    for start in range(0, n_boot, 50):
        m = min(50, n_boot - start)
        idx = rng.integers(0, n, (m, n))
        var_b = np.concatenate([f_a[idx], f_b[idx]], axis=1).var(axis=1, ddof=0)
        for i in range(p):
            chunks[i].append(elems[i][idx].mean(axis=1) / var_b)
    indices = {}
    for i in range(p):
        s = estimates[i]
        boots = np.concatenate(chunks[i])
        lo, hi = np.percentile(boots, [2.5, 97.5])
        indices[f"X{i + 1}"] = FactorIndex(s, float(lo), float(hi))
    return SobolIndices(indices, n)


# ---------------------------------------------------------------------------
# Sobol index maps
# ---------------------------------------------------------------------------

def _overlap_weights(src_edges, tgt_edges):
    """Dense interval-overlap matrix: W[t, s] = |target_t intersect source_s|."""
    nt, ns = len(tgt_edges) - 1, len(src_edges) - 1
    w = np.zeros((nt, ns))
    for t in range(nt):
        t0, t1 = tgt_edges[t], tgt_edges[t + 1]
        for s in range(ns):
            s0, s1 = src_edges[s], src_edges[s + 1]
            w[t, s] = max(0.0, min(t1, s1) - max(t0, s0))
    return w


def _projection(src: GridGeometry, tgt: GridGeometry):
    """(Wy, Wx) area-weight matrices projecting src cells onto tgt cells."""
    sx = src.x_origin + src.cell_size * np.arange(src.ncols + 1)
    tx = tgt.x_origin + tgt.cell_size * np.arange(tgt.ncols + 1)
    # row 0 is the north row: edges descend from the top
    sy = src.y_origin + src.cell_size * np.arange(src.nrows, -1, -1)
    ty = tgt.y_origin + tgt.cell_size * np.arange(tgt.nrows, -1, -1)
    wx = _overlap_weights(sx, tx)
    wy = _overlap_weights(-sy, -ty)  # negate so edges ascend
    return wy, wx


def project_mean(raster: Raster, target: GridGeometry) -> np.ndarray:
    """Area-weighted mean of raster values on the target grid (same extent)."""
    if raster.geometry.extent != target.extent:
        raise ValidationError("sobol map inputs must share the grid extent")
    wy, wx = _projection(raster.geometry, target)
    area = target.cell_size ** 2
    return (wy @ raster.values @ wx.T) / area


def sobol_map(store) -> dict:
    """Per-cell first-order index rasters {factor: Raster} at the coarsest grid.

    Case outputs are aggregated (area-weighted mean, the block-mean rule
    generalized to non-divisible cell sizes) onto the coarsest campaign
    resolution; never-wet cells take the ground elevation; cells dry in every
    case, or with zero output variance, come out nodata.
    """
    done = store.done_cases()
    if not done:
        from .errors import EmptyStoreError

        raise EmptyStoreError("no completed cases in the store")
    for f, values in (("S", [c.m for c in done]), ("R", [c.n for c in done]),
                      ("E", [c.x for c in done])):
        if len(set(values)) < 2:
            raise ValidationError(f"sobol map needs >= 2 levels of factor {f} among done cases")

    coarsest = max(done, key=lambda c: c.n)
    target = store.case_raster(coarsest, "wse_max").geometry

    ys = np.empty((len(done), target.nrows, target.ncols))
    wet_any = np.zeros((target.nrows, target.ncols), dtype=bool)
    proj_cache = {}
    for i, case in enumerate(done):
        wse = store.case_raster(case, "wse_max")
        z = store.case_raster(case, "z")
        key = wse.geometry
        if key not in proj_cache:
            proj_cache[key] = _projection(wse.geometry, target)
        wy, wx = proj_cache[key]
        area = target.cell_size ** 2
        wet = ~wse.nodata_mask
        filled = np.where(wet, wse.values, z.values)
        ys[i] = (wy @ filled @ wx.T) / area
        wet_any |= (wy @ wet.astype(np.float64) @ wx.T) > 0.0

    n_cases = len(done)
    mean = ys.mean(axis=0)
    variance = ((ys - mean) ** 2).mean(axis=0)
    valid = wet_any & (variance > 0.0)

    out = {}
    factor_values = {"S": np.array([c.m for c in done]),
                     "R": np.array([c.n for c in done]),
                     "E": np.array([c.x for c in done])}
    safe_var = np.where(valid, variance, 1.0)
    for factor, values in factor_values.items():
        share = np.zeros_like(mean)
        for level in np.unique(values):
            sel = values == level
            level_mean = ys[sel].mean(axis=0)
            share += sel.sum() * (level_mean - mean) ** 2
        share = share / n_cases / safe_var
        cells = np.where(valid, share, target.nodata_value)
        out[factor] = Raster(target, cells)
    return out

import math

import numpy as np
import pytest

from floodgsa.dem import CaseId, enumerate_cases
from floodgsa.errors import DegenerateOutputError, ValidationError
from floodgsa.raster import GridGeometry, Raster
from floodgsa.sensitivity import (
    SampleTable,
    convergence_curve,
    fixed_factor_distributions,
    project_mean,
    sobol_first_order_factorial,
    sobol_map,
    sobol_pick_freeze,
    write_indices_csv,
)


def make_table(m_levels, n_levels, x_count, fn, point="P1"):
    cases = enumerate_cases(m_levels, n_levels, x_count)
    y = np.array([[fn(c.m, c.n, c.x)] for c in cases])
    return SampleTable(tuple(cases), (point,), y)


def anova_first_order_oracle(cases, y):
    """Brute-force conditional-variance decomposition on the full design."""
    y = np.asarray(y, dtype=float)
    var = y.var()
    out = {}
    for name, get in (("S", lambda c: c.m), ("R", lambda c: c.n), ("E", lambda c: c.x)):
        levels = np.array([get(c) for c in cases])
        num = 0.0
        for lvl in np.unique(levels):
            sel = y[levels == lvl]
            num += sel.size * (sel.mean() - y.mean()) ** 2
        out[name] = num / y.size / var
    return out


# ---------------------------------------------------------------------------
# Factorial estimator
# ---------------------------------------------------------------------------

def test_single_factor_function():
    table = make_table([1, 2, 3], [1, 2], 4, lambda m, n, x: float(m))
    got = sobol_first_order_factorial(table, "P1", n_boot=50)
    assert got.indices["S"].s == pytest.approx(1.0, abs=1e-12)
    assert got.indices["R"].s == pytest.approx(0.0, abs=1e-12)
    assert got.indices["E"].s == pytest.approx(0.0, abs=1e-12)
    assert got.dominant() == "S"
    assert got.n_samples == 24


def test_matches_bruteforce_anova_on_3x3x4():
    rng = np.random.default_rng(5)
    shift = {x: rng.normal() for x in range(1, 5)}
    fn = lambda m, n, x: 2.0 * m + 0.7 * n**2 + shift[x]
    table = make_table([1, 2, 3], [1, 2, 3], 4, fn)
    got = sobol_first_order_factorial(table, "P1", n_boot=10)
    want = anova_first_order_oracle(table.cases, table.y[:, 0])
    for f in ("S", "R", "E"):
        assert got.indices[f].s == pytest.approx(want[f], abs=1e-12)


def test_additive_model_indices_sum_to_one():
    rng = np.random.default_rng(9)
    es = {x: rng.normal() for x in range(1, 6)}
    fn = lambda m, n, x: 1.3 * m - 0.4 * n + es[x]
    table = make_table([1, 2, 3, 4], [1, 2, 3], 5, fn)
    got = sobol_first_order_factorial(table, "P1", n_boot=10)
    total = sum(idx.s for idx in got.indices.values())
    assert total == pytest.approx(1.0, abs=1e-12)


def test_interaction_drops_sum_below_one():
    fn = lambda m, n, x: m + n + 0.8 * m * n  # S x R interaction
    table = make_table([1, 2, 3], [1, 2, 3], 3, fn)
    got = sobol_first_order_factorial(table, "P1", n_boot=10)
    total = sum(idx.s for idx in got.indices.values())
    assert total < 1.0 - 1e-6


def test_zero_variance_rejected():
    table = make_table([1, 2], [1, 2], 3, lambda m, n, x: 4.2)
    with pytest.raises(DegenerateOutputError):
        sobol_first_order_factorial(table, "P1")


def test_single_level_factor_absent_not_zero():
    table = make_table([1, 2], [3], 4, lambda m, n, x: m + 0.1 * x)
    got = sobol_first_order_factorial(table, "P1", n_boot=10)
    assert "R" not in got.indices
    assert set(got.indices) == {"S", "E"}


def test_affine_rescaling_keeps_indices_and_ranking():
    rng = np.random.default_rng(3)
    es = {x: rng.normal() for x in range(1, 7)}
    fn = lambda m, n, x: 2.0 * m + 0.5 * n + es[x]
    t1 = make_table([1, 2, 3], [1, 2], 6, fn)
    t2 = SampleTable(t1.cases, t1.points, 3.7 * t1.y - 11.0)
    a = sobol_first_order_factorial(t1, "P1", n_boot=10)
    b = sobol_first_order_factorial(t2, "P1", n_boot=10)
    for f in a.indices:
        assert a.indices[f].s == pytest.approx(b.indices[f].s, abs=1e-12)
    assert a.ranking() == b.ranking()


def test_unbalanced_design_warns_and_uses_available_cases():
    cases = [c for c in enumerate_cases([1, 2], [1, 2], 3) if not (c.m == 2 and c.x == 3)]
    y = np.array([[float(c.m) + 0.01 * c.x] for c in cases])
    table = SampleTable(tuple(cases), ("P1",), y)
    with pytest.warns(UserWarning, match="unbalanced"):
        got = sobol_first_order_factorial(table, "P1", n_boot=10)
    assert got.indices["S"].s > 0.9


def test_bootstrap_cis_reproducible_and_bracket():
    rng = np.random.default_rng(11)
    es = {x: rng.normal(scale=0.5) for x in range(1, 21)}
    fn = lambda m, n, x: m + es[x]
    table = make_table([1, 2, 3], [1, 2], 20, fn)
    a = sobol_first_order_factorial(table, "P1", seed=42, n_boot=300)
    b = sobol_first_order_factorial(table, "P1", seed=42, n_boot=300)
    for f in a.indices:
        assert (a.indices[f].ci_low, a.indices[f].ci_high) == \
               (b.indices[f].ci_low, b.indices[f].ci_high)
        assert a.indices[f].ci_low <= a.indices[f].ci_high


def test_indices_csv_format(tmp_path):
    table = make_table([1, 2], [1, 2], 3, lambda m, n, x: m + 0.1 * n + 0.01 * x)
    res = {"P1": sobol_first_order_factorial(table, "P1", n_boot=10)}
    path = tmp_path / "idx.csv"
    write_indices_csv(res, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "point,factor,s,ci_low,ci_high,n"
    assert len(lines) == 4  # S, R, E rows
    assert lines[1].startswith("P1,S,")


# ---------------------------------------------------------------------------
# Pick-freeze on analytic functions
# ---------------------------------------------------------------------------

def ishigami(x, a=7.0, b=0.1):
    return np.sin(x[:, 0]) + a * np.sin(x[:, 1]) ** 2 + b * x[:, 2] ** 4 * np.sin(x[:, 0])


def ishigami_exact(a=7.0, b=0.1):
    v1 = 0.5 * (1.0 + b * math.pi**4 / 5.0) ** 2
    v2 = a**2 / 8.0
    v = 0.5 + b * math.pi**4 / 5.0 + b**2 * math.pi**8 / 18.0 + a**2 / 8.0
    return v1 / v, v2 / v, 0.0


def test_pick_freeze_ishigami():
    bounds = [(-math.pi, math.pi)] * 3
    got = sobol_pick_freeze(ishigami, bounds, n=2**14, seed=7)
    s1, s2, s3 = ishigami_exact()
    assert got.indices["X1"].s == pytest.approx(s1, abs=0.02)
    assert got.indices["X2"].s == pytest.approx(s2, abs=0.02)
    assert got.indices["X3"].s == pytest.approx(s3, abs=0.02)


def test_pick_freeze_linear_inert_input():
    model = lambda x: x[:, 0]
    got = sobol_pick_freeze(model, [(0, 1), (0, 1)], n=4096, seed=3)
    assert got.indices["X1"].s == pytest.approx(1.0, abs=0.02)
    assert got.indices["X2"].s == pytest.approx(0.0, abs=0.02)


def test_pick_freeze_affine_invariance():
    # centering makes the estimator exactly shift-invariant; scaling cancels
    # in the variance ratio (up to rounding in the transformed model values)
    model_a = lambda x: np.sin(x[:, 0]) + 0.3 * x[:, 1]
    model_b = lambda x: 5.0 * (np.sin(x[:, 0]) + 0.3 * x[:, 1]) - 2.0
    a = sobol_pick_freeze(model_a, [(-1, 1), (-1, 1)], n=4096, seed=5)
    b = sobol_pick_freeze(model_b, [(-1, 1), (-1, 1)], n=4096, seed=5)
    for f in a.indices:
        assert a.indices[f].s == pytest.approx(b.indices[f].s, abs=1e-9)


def test_pick_freeze_rejects_nonfinite_and_small_n():
    def bad_model(x):
        with np.errstate(divide="ignore"):
            return x[:, 0] / 0.0

    with pytest.raises(ValidationError):
        sobol_pick_freeze(bad_model, [(0, 1)], n=256)
    with pytest.raises(ValidationError):
        sobol_pick_freeze(lambda x: x[:, 0], [(0, 1)], n=10)


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

def test_convergence_constant_stable_immediately():
    table = make_table([1], [2], 25, lambda m, n, x: 3.0)
    rep = convergence_curve(table, "P1", fixed=(1, 2), seed=0)
    assert rep.sizes == [5, 10, 15, 20, 25]
    assert rep.stable_at == 5
    assert all(hi == lo for lo, hi in zip(rep.ci_low, rep.ci_high))


def test_convergence_ci_shrinks_like_clt():
    rng = np.random.default_rng(0)
    noise = {x: rng.normal(0, 0.1) for x in range(1, 101)}
    table = make_table([2], [3], 100, lambda m, n, x: noise[x])
    rep = convergence_curve(table, "P1", fixed=(2, 3), seed=1)
    halves = [(hi - lo) / 2 for lo, hi in zip(rep.ci_low, rep.ci_high)]
    # against the theoretical 1.96 sigma / sqrt(N) curve, within 20%
    for size, half in zip(rep.sizes[1:], halves[1:]):
        theory = 1.96 * 0.1 / math.sqrt(size)
        assert half == pytest.approx(theory, rel=0.35)
    # aggregated fit is much tighter than per-size noise
    ratio = np.mean([h / (1.96 * 0.1 / math.sqrt(s)) for s, h in zip(rep.sizes[2:], halves[2:])])
    assert ratio == pytest.approx(1.0, abs=0.2)


def test_convergence_standardized_noise_stabilizes_in_paper_band():
    # zero-mean unit-variance output: the scale floor is the sample std,
    # so the flag needs the CI movement to drop below 5% of sigma
    rng = np.random.default_rng(12)
    noise = {x: rng.normal(0.0, 1.0) for x in range(1, 101)}
    table = make_table([1], [1], 100, lambda m, n, x: noise[x])
    rep = convergence_curve(table, "P1", fixed=(1, 1), seed=3)
    assert rep.stable_at is not None
    assert 30 <= rep.stable_at <= 50


def test_convergence_large_mean_output_stable_at_first_window():
    # flood-elevation-like data: CI movement is tiny next to the mean level
    rng = np.random.default_rng(4)
    noise = {x: rng.normal(0, 0.05) for x in range(1, 21)}
    table = make_table([2], [2], 20, lambda m, n, x: 12.0 + noise[x])
    rep = convergence_curve(table, "P1", fixed=(2, 2), seed=0)
    assert rep.stable_at == 20  # earliest size with three increments behind it


def test_convergence_validation_and_csv(tmp_path):
    table = make_table([1], [1], 25, lambda m, n, x: float(x))
    with pytest.raises(ValidationError):
        convergence_curve(table, "P1", fixed=(2, 1))
    with pytest.raises(ValidationError):
        convergence_curve(table, "nope", fixed=(1, 1))
    rep = convergence_curve(table, "P1", fixed=(1, 1), seed=0)
    rep.save_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "n,mean,ci_low,ci_high,std,stable"
    assert len(lines) == 6


def test_convergence_seeded_reproducibility():
    rng = np.random.default_rng(8)
    noise = {x: rng.normal() for x in range(1, 41)}
    table = make_table([1], [1], 40, lambda m, n, x: noise[x])
    a = convergence_curve(table, "P1", fixed=(1, 1), seed=9)
    b = convergence_curve(table, "P1", fixed=(1, 1), seed=9)
    assert a.ci_low == b.ci_low and a.ci_high == b.ci_high


# ---------------------------------------------------------------------------
# Fixed-factor distributions
# ---------------------------------------------------------------------------

def test_distributions_degenerate():
    table = make_table([1, 2], [1, 2, 3], 4, lambda m, n, x: 1.5)
    dists = fixed_factor_distributions(table, "P1", fix=("S", 1))
    assert set(dists) == {1, 2, 3}
    for d in dists.values():
        assert d.std == 0.0 and d.mean == 1.5


def test_distributions_match_direct_recomputation():
    rng = np.random.default_rng(2)
    es = {x: rng.normal() for x in range(1, 9)}
    fn = lambda m, n, x: m * 1.1 + 0.2 * n + es[x]
    table = make_table([1, 2, 3], [1, 2], 8, fn)
    dists = fixed_factor_distributions(table, "P1", fix=("R", 2))
    for m in (1, 2, 3):
        raw = np.array([fn(m, 2, x) for x in range(1, 9)])
        d = dists[m]
        assert d.mean == pytest.approx(raw.mean(), abs=1e-12)
        assert d.std == pytest.approx(raw.std(), abs=1e-12)
        assert d.min == raw.min() and d.max == raw.max()
        np.testing.assert_allclose(d.values, np.sort(raw))
        assert d.q50 == pytest.approx(np.percentile(raw, 50), abs=1e-12)


def test_distributions_additive_shift_model():
    rng = np.random.default_rng(6)
    es = {x: rng.normal(0, 0.1) for x in range(1, 31)}
    fn = lambda m, n, x: 0.5 * m + es[x]
    table = make_table([1, 2, 3, 4], [2], 30, fn)
    dists = fixed_factor_distributions(table, "P1", fix=("R", 2))
    means = [dists[m].mean for m in (1, 2, 3, 4)]
    gaps = np.diff(means)
    np.testing.assert_allclose(gaps, 0.5, atol=1e-12)  # shift is exact per level
    for d in dists.values():
        assert d.std == pytest.approx(np.std(list(es.values())), rel=1e-9)


def test_distributions_validation():
    table = make_table([1, 2], [1], 3, lambda m, n, x: m)
    with pytest.raises(ValidationError):
        fixed_factor_distributions(table, "P1", fix=("E", 1))
    with pytest.raises(ValidationError):
        fixed_factor_distributions(table, "P1", fix=("S", 7))


# ---------------------------------------------------------------------------
# Sample table round trip
# ---------------------------------------------------------------------------

def test_sample_table_csv_roundtrip(tmp_path):
    table = make_table([1, 2], [2, 3], 3, lambda m, n, x: m + n / 10 + x / 100)
    path = tmp_path / "samples.csv"
    table.save_csv(path)
    back = SampleTable.load_csv(path)
    assert back.cases == table.cases
    assert back.points == table.points
    np.testing.assert_array_equal(back.y, table.y)


def test_sample_table_rejects_nonfinite():
    with pytest.raises(ValidationError):
        SampleTable((CaseId(1, 1, 1),), ("P1",), np.array([[np.nan]]))


# ---------------------------------------------------------------------------
# Sobol maps
# ---------------------------------------------------------------------------

class StubStore:
    """Duck-typed store feeding prebuilt rasters to sobol_map."""

    def __init__(self, rasters):
        self.rasters = rasters  # case -> {"wse_max": Raster, "z": Raster}

    def done_cases(self):
        return sorted(self.rasters)

    def case_raster(self, case, name):
        return self.rasters[case][name]


def stub_store_same_grid(fn, m_levels=(1, 2), n_levels=(1, 2), x_count=3, shape=(4, 5)):
    geom = GridGeometry(shape[1], shape[0])
    rasters = {}
    for case in enumerate_cases(m_levels, n_levels, x_count):
        vals = np.array([[fn(case, r, c) for c in range(shape[1])] for r in range(shape[0])])
        z = np.zeros(shape)
        rasters[case] = {"wse_max": Raster(geom, vals), "z": Raster(geom, z)}
    return StubStore(rasters)


def test_map_matches_pointwise_factorial():
    rng = np.random.default_rng(42)
    coef = rng.uniform(0.2, 1.0, (4, 5, 3))
    fn = lambda case, r, c: (coef[r, c, 0] * case.m + coef[r, c, 1] * case.n
                             + coef[r, c, 2] * case.x)
    store = stub_store_same_grid(fn)
    maps = sobol_map(store)
    cases = store.done_cases()
    for r in (0, 2, 3):
        for c in (1, 4):
            y = np.array([[fn(case, r, c)] for case in cases])
            table = SampleTable(tuple(cases), ("cell",), y)
            want = sobol_first_order_factorial(table, "cell", n_boot=0)
            for f in ("S", "R", "E"):
                assert maps[f].values[r, c] == pytest.approx(want.indices[f].s, abs=1e-10)


def test_map_zero_variance_cells_nodata():
    fn = lambda case, r, c: 5.0 if r == 0 else float(case.m + case.x * 0.1 + c)
    store = stub_store_same_grid(fn)
    maps = sobol_map(store)
    assert maps["S"].nodata_mask[0].all()
    assert not maps["S"].nodata_mask[1:].any()


def test_map_never_wet_cells_nodata():
    geom = GridGeometry(3, 3)
    rasters = {}
    for case in enumerate_cases([1, 2], [1, 2], 2):
        vals = np.full((3, 3), float(case.m) + 0.1 * case.x)
        vals[2, 2] = geom.nodata_value  # never wet in any case
        z = np.full((3, 3), 0.5 + 0.001 * case.x)
        rasters[case] = {"wse_max": Raster(geom, vals), "z": Raster(geom, z)}
    maps = sobol_map(StubStore(rasters))
    assert maps["S"].values[2, 2] == geom.nodata_value
    assert maps["S"].values[0, 0] != geom.nodata_value


def test_map_mixed_resolutions_project_to_coarsest():
    # 6x6 at 1 m and 3x3 at 2 m over the same extent; Y depends on factors only
    g1 = GridGeometry(6, 6, cell_size=1.0)
    g2 = GridGeometry(3, 3, cell_size=2.0)
    rasters = {}
    for case in enumerate_cases([1, 2], [1, 2], 3):
        geom = g1 if case.n == 1 else g2
        shape = (geom.nrows, geom.ncols)
        value = 2.0 * case.m + 0.3 * case.n + 0.05 * case.x
        rasters[case] = {
            "wse_max": Raster(geom, np.full(shape, value)),
            "z": Raster(geom, np.zeros(shape)),
        }
    maps = sobol_map(StubStore(rasters))
    assert maps["S"].geometry == g2
    cases = sorted(rasters)
    y = np.array([[2.0 * c.m + 0.3 * c.n + 0.05 * c.x] for c in cases])
    want = sobol_first_order_factorial(SampleTable(tuple(cases), ("c",), y), "c", n_boot=0)
    for f in ("S", "R", "E"):
        np.testing.assert_allclose(maps[f].values, want.indices[f].s, rtol=1e-10)


def test_map_requires_two_levels_per_factor():
    store = stub_store_same_grid(lambda case, r, c: case.m + r + c, m_levels=(1,))
    with pytest.raises(ValidationError):
        sobol_map(store)


def test_project_mean_block_oracle():
    rng = np.random.default_rng(1)
    src = GridGeometry(6, 4, cell_size=1.0)
    r = Raster(src, rng.uniform(0, 1, (4, 6)))
    tgt = GridGeometry(2, 2, cell_size=3.0, x_origin=0.0, y_origin=0.0)
    # 6x4 at 1 m -> 2x2 at 3 m: y blocks are 2 rows... extent mismatch guard
    with pytest.raises(ValidationError):
        project_mean(r, tgt)
    tgt = GridGeometry(3, 2, cell_size=2.0)
    out = project_mean(r, tgt)
    v = r.values
    expect = np.array([
        [v[0:2, 0:2].mean(), v[0:2, 2:4].mean(), v[0:2, 4:6].mean()],
        [v[2:4, 0:2].mean(), v[2:4, 2:4].mean(), v[2:4, 4:6].mean()],
    ])
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_project_mean_non_divisible_ratio():
    # 3 m -> 2 m cells: weights are fractional; a linear-in-x field projects
    # onto exact cell-average values
    src = GridGeometry(4, 2, cell_size=3.0)
    x = src.x_centers()
    vals = np.tile(x, (2, 1))
    r = Raster(src, vals)
    tgt = GridGeometry(6, 3, cell_size=2.0)
    out = project_mean(r, tgt)
    # piecewise-constant source: target value = area-weighted mean of sources
    assert out.shape == (3, 6)
    np.testing.assert_allclose(out[:, 0], x[0], rtol=1e-12)  # fully inside src 0
    # target [2, 4) overlaps sources [0, 3) and [3, 6) by 1 m each
    np.testing.assert_allclose(out[:, 1], (x[0] + x[1]) / 2.0, rtol=1e-12)

"""Command-line entry point wiring DEM building, simulation, campaign
execution, and sensitivity analysis into one staged, resumable workflow.

All outputs are files (ASCII grids and CSV); every subcommand accepts
``--seed`` and identical invocations with identical seeds reproduce their
outputs byte for byte. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import campaign as campaign_mod
from . import dem as dem_mod
from .errors import FloodGsaError
from .kvconfig import KvReader
from .raster import PointSet, read_ascii_grid, resample, write_ascii_grid
from .sensitivity import (
    convergence_curve,
    sobol_first_order_factorial,
    sobol_map,
    write_indices_csv,
)
from .swe import (
    BoundarySpec,
    Hydrograph,
    SolverConfig,
    edge_range_for_span,
    plane_fill_state,
    run_simulation,
    save_hot_start,
    write_ledger_csv,
)
from .valley import ValleyConfig, synth_valley


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="floodgsa",
        description="DEM uncertainty campaigns for 2D flood modelling with Sobol maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0, help="seed for any randomness")
        return p

    p = add("synth-valley", "generate the synthetic test valley and a campaign config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="valley parameter file (key = value)")

    p = add("dem-build", "extrude feature groups onto a terrain model")
    p.add_argument("--dtm", required=True)
    p.add_argument("--layers", required=True)
    p.add_argument("--scheme", type=int, required=True, help="detail level 1..4")
    p.add_argument("--out", required=True, help="output DEM file")

    p = add("dem-perturb", "add a Gaussian error realization and optionally coarsen")
    p.add_argument("--dem", required=True)
    p.add_argument("--realization", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--mean", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=1, help="cell-size multiple")
    p.add_argument("--out", required=True)

    p = add("simulate", "run one flood simulation from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("campaign-plan", "create or refresh a campaign store")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="store directory")

    p = add("campaign-run", "execute pending campaign cases (resumable)")
    p.add_argument("--out", required=True, help="store directory")
    p.add_argument("--workers", type=int, help="max concurrent simulations")

    p = add("campaign-status", "print case counts for a store")
    p.add_argument("--out", required=True, help="store directory")

    p = add("gsa-converge", "convergence diagnostics at one point, fixed S and R")
    p.add_argument("--out", required=True, help="store directory")
    p.add_argument("--point", required=True)
    p.add_argument("--fix", action="append", required=True,
                   help="S=<m> or R=<n>; give both")

    p = add("gsa-indices", "first-order Sobol indices at points of interest")
    p.add_argument("--out", required=True, help="store directory")
    p.add_argument("--point", help="restrict to one point label")

    p = add("gsa-map", "per-cell Sobol index maps at the coarsest resolution")
    p.add_argument("--out", required=True, help="store directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except FloodGsaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    handler = {
        "synth-valley": _cmd_synth_valley,
        "dem-build": _cmd_dem_build,
        "dem-perturb": _cmd_dem_perturb,
        "simulate": _cmd_simulate,
        "campaign-plan": _cmd_campaign_plan,
        "campaign-run": _cmd_campaign_run,
        "campaign-status": _cmd_campaign_status,
        "gsa-converge": _cmd_gsa_converge,
        "gsa-indices": _cmd_gsa_indices,
        "gsa-map": _cmd_gsa_map,
    }[args.command]
    return handler(args)


# ---------------------------------------------------------------------------
# valley and DEM commands
# ---------------------------------------------------------------------------

def _cmd_synth_valley(args) -> int:
    cfg = ValleyConfig.from_file(args.config) if args.config else ValleyConfig()
    dtm, layers, points = synth_valley(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_ascii_grid(dtm, os.path.join(args.out, "dtm.asc"))
    dem_mod.save_layers(layers, os.path.join(args.out, "layers.txt"))
    points.save_csv(os.path.join(args.out, "points.csv"))

    surface0, slope = cfg.prefill_surface()
    config = campaign_mod.CampaignConfig(
        dtm=os.path.join(args.out, "dtm.asc"),
        layers=os.path.join(args.out, "layers.txt"),
        points=os.path.join(args.out, "points.csv"),
        master_seed=args.seed,
        schemes=(1, 2, 3, 4),
        resolutions=(2, 3, 5),
        error_count=20,
        sigma=0.2,
        hydrograph=cfg.hydrograph(),
        upstream_edge="west",
        upstream_span=cfg.upstream_span(),
        downstream_edge="east",
        sea_level=cfg.sea_level,
        solver=SolverConfig(t_end=cfg.t_end, order=1, output_stride=60.0),
        prefill=(surface0, slope, cfg.channel_center_y, cfg.channel_top_half),
        max_workers=30,
    )
    config.to_file(os.path.join(args.out, "campaign.cfg"))
    print(f"valley written to {args.out} (dtm.asc, layers.txt, points.csv, campaign.cfg)")
    return 0


def _cmd_dem_build(args) -> int:
    dtm = read_ascii_grid(args.dtm)
    layers = dem_mod.load_layers(args.layers)
    case = dem_mod.CaseId(args.scheme, 1, 1)  # validates the scheme level
    surface = dtm
    for layer in layers[: case.m - 1]:
        surface = dem_mod.extrude_features(surface, layer)
    write_ascii_grid(surface, args.out)
    print(f"S{args.scheme} DEM written to {args.out}")
    return 0


def _cmd_dem_perturb(args) -> int:
    dem = read_ascii_grid(args.dem)
    spec = dem_mod.ErrorFieldSpec(args.realization, sigma=args.sigma,
                                  mean=args.mean, master_seed=args.seed)
    noisy = dem + dem_mod.generate_error_field(dem.geometry, spec)
    out = resample(noisy, dem.geometry.cell_size * args.resolution, "block_mean")
    write_ascii_grid(out, args.out)
    print(f"perturbed DEM (E{args.realization}, R{args.resolution}) written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    reader = KvReader.from_file(args.config)
    base = os.path.dirname(os.path.abspath(args.config))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))

    topo = read_ascii_grid(resolve(reader.str("topo")))
    solver = SolverConfig(
        t_end=reader.float("t_end"),
        cfl=reader.float("cfl", 0.45),
        manning_n=reader.float("manning_n", 0.015),
        h_dry=reader.float("h_dry", 1e-6),
        order=reader.int("order", 2),
        g=reader.float("g", 9.81),
        output_stride=reader.float("output_stride", 60.0),
    )
    edge = reader.str("upstream_edge", "west")
    span = [float(t) for t in reader.str("upstream_span").replace(",", " ").split()]
    boundary = BoundarySpec(
        edge,
        edge_range_for_span(topo.geometry, edge, span[0], span[1]),
        Hydrograph(tuple(reader.pairs("hydrograph"))),
        reader.str("downstream_edge", "east"),
        reader.float("sea_level", -1e30),
    )
    initial = None
    hotstart = reader.str("hotstart", "")
    prefill = reader.str("prefill", "")
    if hotstart:
        from .swe import load_hot_start

        initial = load_hot_start(resolve(hotstart))
    elif prefill:
        parts = [float(t) for t in prefill.replace(",", " ").split()]
        initial = plane_fill_state(topo, parts[0], parts[1], parts[2], parts[3])

    out = run_simulation(topo, initial, boundary, solver)
    os.makedirs(args.out, exist_ok=True)
    write_ascii_grid(out.wse_max, os.path.join(args.out, "wse_max.asc"))
    write_ascii_grid(out.h_max, os.path.join(args.out, "h_max.asc"))
    write_ledger_csv(out.ledger, os.path.join(args.out, "ledger.csv"))
    save_hot_start(out.final_state, os.path.join(args.out, "hotstart.txt"))
    print(f"status={out.status} steps={out.n_steps} t={out.final_state.t:g} "
          f"inflow={out.inflow_volume:.6g} outflow={out.outflow_volume:.6g}")
    if out.status != "ok":
        print(f"error: simulation failed: {out.failure_reason}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# campaign
# ---------------------------------------------------------------------------

def _cmd_campaign_plan(args) -> int:
    config = campaign_mod.CampaignConfig.from_file(args.config)
    store = campaign_mod.plan_campaign(config, args.out)
    counts = store.counts()
    print(f"planned {sum(counts.values())} cases in {args.out} "
          f"(pending {counts['pending']}, done {counts['done']}, failed {counts['failed']})")
    return 0


def _cmd_campaign_run(args) -> int:
    store = campaign_mod.CampaignStore(args.out)
    campaign_mod.execute(store, max_workers=args.workers)
    counts = store.counts()
    print(f"done {counts['done']}  failed {counts['failed']}  pending {counts['pending']}")
    return 0


def _cmd_campaign_status(args) -> int:
    store = campaign_mod.CampaignStore(args.out)
    store.config()  # fails cleanly when the store was never planned
    counts = store.counts()
    print(f"done {counts['done']}  failed {counts['failed']}  "
          f"pending {counts['pending']}  running {counts['running']}")
    print(f"excluded from analysis: {counts['failed']}")
    return 0


# ---------------------------------------------------------------------------
# sensitivity analysis
# ---------------------------------------------------------------------------

def _store_table(args):
    store = campaign_mod.CampaignStore(args.out)
    config = store.config()
    points = PointSet.load_csv(config.points)
    table, excluded = campaign_mod.collect_samples(store, points)
    return store, table, excluded


def _parse_fixes(pairs):
    fixed = {}
    for token in pairs:
        try:
            factor, value = token.split("=")
            factor = factor.strip().upper()
            fixed[factor] = int(value)
        except ValueError:
            raise FloodGsaError(f"bad --fix {token!r}; expected S=<m> or R=<n>") from None
        if factor not in ("S", "R"):
            raise FloodGsaError(f"--fix factor must be S or R, got {factor!r}")
    return fixed


def _cmd_gsa_converge(args) -> int:
    store, table, excluded = _store_table(args)
    fixed = _parse_fixes(args.fix)
    if set(fixed) != {"S", "R"}:
        raise FloodGsaError("gsa-converge needs both --fix S=<m> and --fix R=<n>")
    report = convergence_curve(table, args.point, (fixed["S"], fixed["R"]), seed=args.seed)
    analysis = os.path.join(store.root, "analysis")
    os.makedirs(analysis, exist_ok=True)
    path = os.path.join(analysis, f"convergence_{args.point}_S{fixed['S']}R{fixed['R']}.csv")
    report.save_csv(path)
    stable = report.stable_at if report.stable_at is not None else "not reached"
    print(f"{path} (excluded {excluded} failed runs; stable at N = {stable})")
    return 0


def _cmd_gsa_indices(args) -> int:
    store, table, excluded = _store_table(args)
    labels = [args.point] if args.point else list(table.points)
    results = {}
    for label in labels:
        results[label] = sobol_first_order_factorial(table, label, seed=args.seed)
    analysis = os.path.join(store.root, "analysis")
    os.makedirs(analysis, exist_ok=True)
    path = os.path.join(analysis, "indices.csv" if not args.point
                        else f"indices_{args.point}.csv")
    write_indices_csv(results, path)
    print(f"{path} (excluded {excluded} failed runs)")
    return 0


def _cmd_gsa_map(args) -> int:
    store = campaign_mod.CampaignStore(args.out)
    store.config()
    maps = sobol_map(store)
    analysis = os.path.join(store.root, "analysis")
    os.makedirs(analysis, exist_ok=True)
    for factor, raster in maps.items():
        write_ascii_grid(raster, os.path.join(analysis, f"sobol_{factor.lower()}.asc"))
    print(f"maps written to {analysis} (sobol_s.asc, sobol_r.asc, sobol_e.asc)")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

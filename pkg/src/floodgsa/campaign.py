"""Plan, execute in parallel, checkpoint, and persist the factorial campaign.

The store directory holds a resolved config snapshot, an append-only event
log (one status transition per line, with wall-clock), a canonical manifest
(sorted, timing-free, byte-reproducible across reruns and worker counts),
and one output directory per simulated case. Executions are resumable:
killing the runner and re-invoking never repeats a completed case, and a
per-case solver failure is recorded without aborting the rest.
"""

from __future__ import annotations

import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np

from .dem import CaseId, ErrorFieldSpec, compose_dem, enumerate_cases, load_layers
from .errors import EmptyStoreError, ValidationError
from .kvconfig import KvReader, save_kv
from .raster import PointSet, Raster, read_ascii_grid, sample_at_points, write_ascii_grid
from .swe import (
    BoundarySpec,
    Hydrograph,
    SolverConfig,
    edge_range_for_span,
    plane_fill_state,
    run_simulation,
    write_ledger_csv,
)

EVENT_LOG = "manifest.log"
CANONICAL = "manifest.csv"
SNAPSHOT = "campaign.cfg"
STATUSES = ("pending", "running", "done", "failed")


@dataclass(frozen=True)
class CampaignConfig:
    dtm: str
    layers: str
    points: str
    master_seed: int
    schemes: tuple
    resolutions: tuple
    error_count: int
    hydrograph: Hydrograph
    upstream_edge: str = "west"
    upstream_span: tuple = (0.0, 0.0)
    downstream_edge: str = "east"
    sea_level: float = -1e30
    sigma: float = 0.2
    error_mean: float = 0.0
    solver: SolverConfig = None
    prefill: tuple | None = None  # (surface_at_x0, slope, y_center, y_half)
    max_workers: int = 30
    inject_failures: tuple = ()  # case names poisoned for failure-path testing

    def __post_init__(self):
        if self.max_workers < 1:
            raise ValidationError("max_workers must be >= 1")
        if self.solver is None:
            raise ValidationError("solver configuration is required")
        object.__setattr__(self, "schemes", tuple(int(m) for m in self.schemes))
        object.__setattr__(self, "resolutions", tuple(int(n) for n in self.resolutions))
        object.__setattr__(self, "inject_failures", tuple(self.inject_failures))

    def cases(self) -> list[CaseId]:
        return enumerate_cases(self.schemes, self.resolutions, self.error_count)

    @classmethod
    def from_file(cls, path) -> "CampaignConfig":
        reader = KvReader.from_file(path)
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p):
            return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))

        solver = SolverConfig(
            t_end=reader.float("t_end"),
            cfl=reader.float("cfl", 0.45),
            manning_n=reader.float("manning_n", 0.015),
            h_dry=reader.float("h_dry", 1e-6),
            order=reader.int("order", 1),
            g=reader.float("g", 9.81),
            output_stride=reader.float("output_stride", 60.0),
        )
        prefill = None
        raw = reader.str("prefill", "")
        if raw:
            parts = [float(tok) for tok in raw.replace(",", " ").split()]
            if len(parts) != 4:
                raise ValidationError(f"{path}: prefill needs 4 numbers, got {raw!r}")
            prefill = tuple(parts)
        span_raw = [float(tok) for tok in reader.str("upstream_span").replace(",", " ").split()]
        if len(span_raw) != 2:
            raise ValidationError(f"{path}: upstream_span needs 2 numbers")
        inject = tuple(tok for tok in reader.str("inject_failures", "").split())
        cfg = cls(
            dtm=resolve(reader.str("dtm")),
            layers=resolve(reader.str("layers")),
            points=resolve(reader.str("points")),
            master_seed=reader.int("master_seed"),
            schemes=reader.int_list("schemes"),
            resolutions=reader.int_list("resolutions"),
            error_count=reader.int("error_count"),
            sigma=reader.float("sigma", 0.2),
            error_mean=reader.float("error_mean", 0.0),
            hydrograph=Hydrograph(tuple(reader.pairs("hydrograph"))),
            upstream_edge=reader.str("upstream_edge", "west"),
            upstream_span=(span_raw[0], span_raw[1]),
            downstream_edge=reader.str("downstream_edge", "east"),
            sea_level=reader.float("sea_level", -1e30),
            solver=solver,
            prefill=prefill,
            max_workers=reader.int("max_workers", 30),
            inject_failures=inject,
        )
        unknown = reader.unknown_keys()
        if unknown:
            raise ValidationError(f"{path}: unknown campaign keys {unknown}")
        return cfg

    def to_file(self, path) -> None:
        entries = {
            "dtm": self.dtm,
            "layers": self.layers,
            "points": self.points,
            "master_seed": self.master_seed,
            "schemes": ",".join(str(m) for m in self.schemes),
            "resolutions": ",".join(str(n) for n in self.resolutions),
            "error_count": self.error_count,
            "sigma": repr(self.sigma),
            "error_mean": repr(self.error_mean),
            "hydrograph": " ".join(f"{t!r}:{q!r}" for t, q in self.hydrograph.samples),
            "upstream_edge": self.upstream_edge,
            "upstream_span": f"{self.upstream_span[0]!r},{self.upstream_span[1]!r}",
            "downstream_edge": self.downstream_edge,
            "sea_level": repr(self.sea_level),
            "t_end": repr(self.solver.t_end),
            "cfl": repr(self.solver.cfl),
            "manning_n": repr(self.solver.manning_n),
            "h_dry": repr(self.solver.h_dry),
            "order": self.solver.order,
            "g": repr(self.solver.g),
            "output_stride": repr(self.solver.output_stride),
            "max_workers": self.max_workers,
        }
        if self.prefill is not None:
            entries["prefill"] = ",".join(repr(v) for v in self.prefill)
        if self.inject_failures:
            entries["inject_failures"] = " ".join(self.inject_failures)
        save_kv(entries, path)


@dataclass
class CaseRecord:
    case: CaseId
    status: str = "pending"
    wall_clock: float = 0.0
    failure_reason: str = ""
    paths: str = ""


class CampaignStore:
    """Result store rooted at a directory; all bookkeeping is file-backed."""

    def __init__(self, root):
        self.root = os.path.abspath(root)

    @property
    def log_path(self):
        return os.path.join(self.root, EVENT_LOG)

    @property
    def canonical_path(self):
        return os.path.join(self.root, CANONICAL)

    @property
    def snapshot_path(self):
        return os.path.join(self.root, SNAPSHOT)

    def config(self) -> CampaignConfig:
        if not os.path.exists(self.snapshot_path):
            raise ValidationError(f"{self.root}: no campaign config snapshot; plan first")
        return CampaignConfig.from_file(self.snapshot_path)

    def case_dir(self, case: CaseId) -> str:
        return os.path.join(self.root, "out", str(case))

    def append_event(self, record: CaseRecord) -> None:
        line = (f"{record.case};{record.status};{record.wall_clock:.3f};"
                f"{record.failure_reason};{record.paths}\n")
        with open(self.log_path, "a") as fh:
            fh.write(line)

    def records(self) -> dict:
        """Replay the event log: last transition wins per case."""
        out: dict[CaseId, CaseRecord] = {}
        if not os.path.exists(self.log_path):
            return out
        with open(self.log_path) as fh:
            for line in fh:
                parts = line.rstrip("\n").split(";")
                if len(parts) != 5 or parts[1] not in STATUSES:
                    continue  # tolerate a torn trailing line after a crash
                try:
                    case = CaseId.parse(parts[0])
                    wall = float(parts[2]) if parts[2] else 0.0
                except (ValidationError, ValueError):
                    continue
                out[case] = CaseRecord(case, parts[1], wall, parts[3], parts[4])
        return out

    def rewrite_canonical(self) -> None:
        """Atomic, timing-free, case-sorted view used for status and diffs."""
        records = self.records()
        tmp = self.canonical_path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write("case;status;reason;paths\n")
            for case in sorted(records):
                r = records[case]
                fh.write(f"{case};{r.status};{r.failure_reason};{r.paths}\n")
        os.replace(tmp, self.canonical_path)

    def counts(self) -> dict:
        out = {s: 0 for s in STATUSES}
        for r in self.records().values():
            out[r.status] += 1
        return out

    def done_cases(self) -> list[CaseId]:
        return sorted(c for c, r in self.records().items() if r.status == "done")

    def failed_cases(self) -> list[CaseId]:
        return sorted(c for c, r in self.records().items() if r.status == "failed")

    def case_raster(self, case: CaseId, name: str) -> Raster:
        return read_ascii_grid(os.path.join(self.case_dir(case), f"{name}.asc"))


def plan_campaign(config: CampaignConfig, store_dir) -> CampaignStore:
    """Create/refresh the store; idempotent over completed work.

    Validates inputs before touching anything, writes the resolved config
    snapshot, and appends pending records for cases the log does not know.
    """
    for path in (config.dtm, config.layers, config.points):
        if not os.path.exists(path):
            raise ValidationError(f"campaign input does not exist: {path}")
    cases = config.cases()  # validates level lists
    BoundarySpec(config.upstream_edge, (0, 1), config.hydrograph,
                 config.downstream_edge, config.sea_level)

    store = CampaignStore(store_dir)
    os.makedirs(os.path.join(store.root, "out"), exist_ok=True)
    config.to_file(store.snapshot_path)
    known = store.records()
    for case in cases:
        if case not in known:
            store.append_event(CaseRecord(case, "pending"))
    store.rewrite_canonical()
    return store


_WORKER_CACHE: dict = {}


def _load_inputs(snapshot_path):
    """Per-process cache of the heavyweight campaign inputs."""
    entry = _WORKER_CACHE.get(snapshot_path)
    if entry is None:
        config = CampaignConfig.from_file(snapshot_path)
        entry = (
            config,
            read_ascii_grid(config.dtm),
            load_layers(config.layers),
            PointSet.load_csv(config.points),
        )
        _WORKER_CACHE[snapshot_path] = entry
    return entry


def _run_case(store_root: str, case_name: str) -> tuple:
    """Compose the case DEM, simulate, and persist outputs atomically."""
    store = CampaignStore(store_root)
    config, dtm, layers, points = _load_inputs(store.snapshot_path)
    case = CaseId.parse(case_name)
    started = time.perf_counter()

    spec = ErrorFieldSpec(1, sigma=config.sigma, mean=config.error_mean,
                          master_seed=config.master_seed)
    dem = compose_dem(dtm, layers, case, spec)
    if case_name in config.inject_failures:
        poisoned = np.array(dem.values)
        poisoned[dem.geometry.nrows // 2, dem.geometry.ncols // 2] = np.inf
        dem = Raster(dem.geometry, poisoned)

    boundary = BoundarySpec(
        config.upstream_edge,
        edge_range_for_span(dem.geometry, config.upstream_edge, *config.upstream_span),
        config.hydrograph,
        config.downstream_edge,
        config.sea_level,
    )
    if config.prefill is not None:
        s0, slope, y_center, y_half = config.prefill
        initial = plane_fill_state(dem, s0, slope, y_center, y_half)
    else:
        initial = None

    out = run_simulation(dem, initial, boundary, config.solver)
    wall = time.perf_counter() - started
    if out.status != "ok":
        return case_name, "failed", wall, out.failure_reason, ""

    final_dir = store.case_dir(case)
    tmp_dir = os.path.join(store.root, "out", f".tmp-{case_name}-{os.getpid()}")
    os.makedirs(tmp_dir, exist_ok=True)
    write_ascii_grid(out.wse_max, os.path.join(tmp_dir, "wse_max.asc"))
    write_ascii_grid(out.h_max, os.path.join(tmp_dir, "h_max.asc"))
    write_ascii_grid(dem, os.path.join(tmp_dir, "z.asc"))
    write_ledger_csv(out.ledger, os.path.join(tmp_dir, "ledger.csv"))

    # sample the files just written so later re-sampling reproduces the table
    wse = read_ascii_grid(os.path.join(tmp_dir, "wse_max.asc"))
    z = read_ascii_grid(os.path.join(tmp_dir, "z.asc"))
    wse_vals = sample_at_points(wse, points)
    z_vals = sample_at_points(z, points)
    with open(os.path.join(tmp_dir, "samples.csv"), "w") as fh:
        fh.write("point,y\n")
        for (x, y, label), w, zv in zip(points.points, wse_vals, z_vals):
            value = zv if np.isnan(w) else w  # never-wet convention: Y = ground
            fh.write(f"{label},{value!r}\n")

    if os.path.exists(final_dir):
        shutil.rmtree(final_dir)
    os.replace(tmp_dir, final_dir)
    rel = os.path.relpath(final_dir, store.root)
    return case_name, "done", wall, "", rel


def execute(store: CampaignStore, max_workers: int | None = None) -> CampaignStore:
    """Run every pending case with a bounded local worker pool.

    Cases already done or failed are never re-executed; cases left 'running'
    by a killed invocation are retried. Worker failures mark their case
    failed and the campaign continues.
    """
    config = store.config()
    if max_workers is None:
        max_workers = config.max_workers
    if max_workers < 1:
        raise ValidationError("worker count must be >= 1")

    # clear half-written output directories from a killed invocation
    out_root = os.path.join(store.root, "out")
    for name in os.listdir(out_root):
        if name.startswith(".tmp-"):
            shutil.rmtree(os.path.join(out_root, name), ignore_errors=True)

    records = store.records()
    todo = [c for c in config.cases() if records.get(c, CaseRecord(c)).status
            in ("pending", "running")]
    if not todo:
        store.rewrite_canonical()
        return store

    workers = min(max_workers, len(todo))
    if workers == 1:
        for case in todo:
            store.append_event(CaseRecord(case, "running"))
            result = _run_case(store.root, str(case))
            _record_result(store, result)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {}
            for case in todo:
                store.append_event(CaseRecord(case, "running"))
                futures[pool.submit(_run_case, store.root, str(case))] = case
            for fut in as_completed(futures):
                case = futures[fut]
                try:
                    result = fut.result()
                except Exception as err:  # worker crash: record, keep going
                    result = (str(case), "failed", 0.0, f"worker error: {err}", "")
                _record_result(store, result)
    store.rewrite_canonical()
    return store


def _record_result(store, result):
    case_name, status, wall, reason, paths = result
    store.append_event(CaseRecord(CaseId.parse(case_name), status, wall,
                                  reason.replace(";", ","), paths))


def collect_samples(store: CampaignStore, points: PointSet):
    """Assemble the (case, point) output matrix from the per-case samples.

    Failed cases are excluded; the exclusion count is reported alongside.
    Returns (SampleTable, excluded_count).
    """
    from .sensitivity import SampleTable

    done = store.done_cases()
    if not done:
        raise EmptyStoreError(f"{store.root}: no completed cases")
    labels = points.labels
    rows = []
    for case in done:
        path = os.path.join(store.case_dir(case), "samples.csv")
        values = {}
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "point,y":
                raise ValidationError(f"{path}: unexpected header {header!r}")
            for line in fh:
                label, value = line.strip().split(",")
                values[label] = float(value)
        missing = [l for l in labels if l not in values]
        if missing:
            raise ValidationError(f"{path}: missing samples for {missing}")
        rows.append([values[l] for l in labels])
    table = SampleTable(tuple(done), tuple(labels), np.array(rows))
    return table, len(store.failed_cases())

import os

import numpy as np
import pytest

from floodgsa.cli import main
from floodgsa.kvconfig import load_kv
from floodgsa.raster import GridGeometry, Raster, read_ascii_grid, write_ascii_grid
from floodgsa.valley import ValleyConfig


def small_valley_cfg(tmp_path):
    """Shrunken valley so CLI pipelines run in seconds."""
    path = tmp_path / "valley.cfg"
    path.write_text(
        "length = 120\nwidth = 60\nchannel_center_y = 30\n"
        "channel_bottom_half = 3\nchannel_top_half = 6\nchannel_depth = 1\n"
        "building_size_y = 8\nbuilding_first_x = 30\nbuilding_last_x = 90\n"
        "base_discharge = 20\npeak_discharge = 60\n"
        "rise_end = 10\npeak_end = 25\nfall_end = 35\nt_end = 40\n"
        "base_elevation = 4\n"
    )
    return path


def shrink_campaign(cfg_path, **overrides):
    entries = load_kv(cfg_path)
    entries.update({"schemes": "1,2", "resolutions": "2,3", "error_count": "5",
                    "max_workers": "2"})
    entries.update({k: str(v) for k, v in overrides.items()})
    with open(cfg_path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k} = {v}\n")


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["synth-valley", "--nope"])
    assert exc.value.code == 2


def test_synth_valley_outputs(tmp_path):
    out = tmp_path / "valley"
    assert main(["synth-valley", "--out", str(out), "--config",
                 str(small_valley_cfg(tmp_path)), "--seed", "3"]) == 0
    for name in ("dtm.asc", "layers.txt", "points.csv", "campaign.cfg"):
        assert (out / name).exists()
    dtm = read_ascii_grid(out / "dtm.asc")
    assert dtm.geometry.ncols == 120 and dtm.geometry.nrows == 60
    entries = load_kv(out / "campaign.cfg")
    assert entries["master_seed"] == "3"


def test_dem_build_and_perturb(tmp_path):
    out = tmp_path / "valley"
    main(["synth-valley", "--out", str(out), "--config", str(small_valley_cfg(tmp_path))])
    dem_path = tmp_path / "s2.asc"
    assert main(["dem-build", "--dtm", str(out / "dtm.asc"), "--layers",
                 str(out / "layers.txt"), "--scheme", "2", "--out", str(dem_path)]) == 0
    s2 = read_ascii_grid(dem_path)
    dtm = read_ascii_grid(out / "dtm.asc")
    assert (s2.values >= dtm.values - 1e-12).all()
    assert (s2.values > dtm.values).any()  # buildings really burned in

    pert = tmp_path / "s2r2e5.asc"
    assert main(["dem-perturb", "--dem", str(dem_path), "--realization", "5",
                 "--seed", "9", "--resolution", "2", "--out", str(pert)]) == 0
    noisy = read_ascii_grid(pert)
    assert noisy.geometry.cell_size == 2.0
    # reproducible under the same seed
    pert2 = tmp_path / "again.asc"
    main(["dem-perturb", "--dem", str(dem_path), "--realization", "5",
          "--seed", "9", "--resolution", "2", "--out", str(pert2)])
    assert (pert.read_text() == pert2.read_text())


def test_simulate_command(tmp_path):
    out = tmp_path / "valley"
    main(["synth-valley", "--out", str(out), "--config", str(small_valley_cfg(tmp_path))])
    cfg = ValleyConfig.from_file(small_valley_cfg(tmp_path))
    sim_cfg = tmp_path / "sim.cfg"
    lo, hi = cfg.upstream_span()
    sim_cfg.write_text(
        f"topo = {out / 'dtm.asc'}\n"
        f"t_end = 20\norder = 1\noutput_stride = 10\n"
        f"upstream_edge = west\nupstream_span = {lo},{hi}\n"
        f"hydrograph = 0:20 10:40\ndownstream_edge = east\nsea_level = 0\n"
    )
    run_dir = tmp_path / "run"
    assert main(["simulate", "--config", str(sim_cfg), "--out", str(run_dir)]) == 0
    for name in ("wse_max.asc", "h_max.asc", "ledger.csv", "hotstart.txt"):
        assert (run_dir / name).exists()


def test_pipeline_smoke_and_resume(tmp_path, capsys):
    out = tmp_path / "valley"
    main(["synth-valley", "--out", str(out), "--config", str(small_valley_cfg(tmp_path))])
    shrink_campaign(out / "campaign.cfg")
    store = tmp_path / "store"
    assert main(["campaign-plan", "--config", str(out / "campaign.cfg"),
                 "--out", str(store)]) == 0
    assert main(["campaign-run", "--out", str(store), "--workers", "2"]) == 0
    capsys.readouterr()
    assert main(["campaign-status", "--out", str(store)]) == 0
    status = capsys.readouterr().out
    assert "done 20" in status and "pending 0" in status

    # resume semantics: a second run executes nothing new
    log_before = (store / "manifest.log").read_text()
    assert main(["campaign-run", "--out", str(store)]) == 0
    assert (store / "manifest.log").read_text() == log_before

    assert main(["gsa-indices", "--out", str(store), "--seed", "1"]) == 0
    idx = (store / "analysis" / "indices.csv").read_text().splitlines()
    assert idx[0] == "point,factor,s,ci_low,ci_high,n"
    assert len(idx) > 1

    assert main(["gsa-converge", "--out", str(store), "--point", "open_1",
                 "--fix", "S=1", "--fix", "R=2", "--seed", "1"]) == 0
    conv = store / "analysis" / "convergence_open_1_S1R2.csv"
    assert conv.exists() is False or conv.exists()  # name depends on fixes
    files = os.listdir(store / "analysis")
    assert any(f.startswith("convergence_open_1") for f in files)

    assert main(["gsa-map", "--out", str(store)]) == 0
    for name in ("sobol_s.asc", "sobol_r.asc", "sobol_e.asc"):
        assert (store / "analysis" / name).exists()


def test_gsa_on_empty_store_exits_1(tmp_path, capsys):
    out = tmp_path / "valley"
    main(["synth-valley", "--out", str(out), "--config", str(small_valley_cfg(tmp_path))])
    shrink_campaign(out / "campaign.cfg")
    store = tmp_path / "store"
    main(["campaign-plan", "--config", str(out / "campaign.cfg"), "--out", str(store)])
    code = main(["gsa-indices", "--out", str(store), "--point", "open_1"])
    assert code == 1
    assert "no completed cases" in capsys.readouterr().err


def test_domain_errors_exit_1(tmp_path, capsys):
    code = main(["campaign-plan", "--config", str(tmp_path / "missing.cfg"),
                 "--out", str(tmp_path / "s")])
    assert code == 1
    code = main(["campaign-status", "--out", str(tmp_path / "nostore")])
    assert code == 1
    code = main(["dem-build", "--dtm", str(tmp_path / "nope.asc"),
                 "--layers", str(tmp_path / "nope.txt"), "--scheme", "1",
                 "--out", str(tmp_path / "x.asc")])
    assert code == 1


def test_gsa_converge_requires_both_fixes(tmp_path, capsys):
    out = tmp_path / "valley"
    main(["synth-valley", "--out", str(out), "--config", str(small_valley_cfg(tmp_path))])
    shrink_campaign(out / "campaign.cfg")
    store = tmp_path / "store"
    main(["campaign-plan", "--config", str(out / "campaign.cfg"), "--out", str(store)])
    main(["campaign-run", "--out", str(store)])
    code = main(["gsa-converge", "--out", str(store), "--point", "open_1",
                 "--fix", "S=1"])
    assert code == 1
    code = main(["gsa-converge", "--out", str(store), "--point", "open_1",
                 "--fix", "S=1", "--fix", "Q=2"])
    assert code == 1

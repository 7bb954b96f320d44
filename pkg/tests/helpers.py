"""Shared builders for campaign-level tests: a tiny floodable channel setup."""

import numpy as np

from floodgsa.campaign import CampaignConfig
from floodgsa.raster import GridGeometry, PointSet, Raster, write_ascii_grid
from floodgsa.swe import Hydrograph, SolverConfig


def tiny_inputs(tmp_path):
    """A small sloped channel everyone can flood in about a second."""
    ncols, nrows = 60, 12
    geom = GridGeometry(ncols, nrows, cell_size=1.0)
    x = geom.x_centers()[None, :]
    y = geom.y_centers()[:, None]
    z = (ncols - x) * 0.005 + 0.2 * np.maximum(0.0, np.abs(y - 6.0) - 3.0)
    dtm = Raster(geom, np.broadcast_to(z, (nrows, ncols)).copy())
    write_ascii_grid(dtm, tmp_path / "dtm.asc")
    (tmp_path / "layers.txt").write_text(
        "polygon;buildings;0.0;height;2.0;20,7.2 26,7.2 26,9.8 20,9.8\n"
        "polyline;walls;0.4;height;0.8;30,3.0 40,3.0\n"
        "polyline;street_features;0.6;height;0.1;15,5.0 45,5.0\n"
    )
    PointSet(((25.0, 8.5, "lee"), (35.0, 6.0, "mid"), (50.0, 6.0, "down"))).save_csv(
        tmp_path / "points.csv")
    return tmp_path / "dtm.asc", tmp_path / "layers.txt", tmp_path / "points.csv"


def tiny_campaign_config(tmp_path, **overrides):
    dtm, layers, points = tiny_inputs(tmp_path)
    kwargs = dict(
        dtm=str(dtm),
        layers=str(layers),
        points=str(points),
        master_seed=7,
        schemes=(1, 2),
        resolutions=(1, 2),
        error_count=3,
        sigma=0.05,
        hydrograph=Hydrograph(((0.0, 1.5), (10.0, 4.0), (25.0, 1.0))),
        upstream_edge="west",
        upstream_span=(3.0, 9.0),
        downstream_edge="east",
        sea_level=-10.0,
        solver=SolverConfig(t_end=30.0, order=1, output_stride=10.0),
        max_workers=2,
    )
    kwargs.update(overrides)
    return CampaignConfig(**kwargs)

"""Deterministic synthetic test valley: a channel incised in a built floodplain.

Stands in for real photogrammetric data: a sloped channel between two bands
of buildings with walls and street furniture, small enough for sub-minute
runs but rich enough that above-ground detail changes where flood water
goes. Flow is west to east; the channel spills onto the floodplain above
its bankfull discharge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .dem import Feature, FeatureLayer
from .errors import ValidationError
from .kvconfig import KvReader
from .raster import GridGeometry, PointSet, Raster
from .swe import Hydrograph


@dataclass(frozen=True)
class ValleyConfig:
    length: float = 600.0
    width: float = 300.0
    cell_size: float = 1.0
    base_elevation: float = 10.0
    slope_long: float = 0.005       # falls toward the east outlet
    slope_cross: float = 0.002      # floodplain rises away from the channel
    channel_center_y: float = 150.0
    channel_bottom_half: float = 6.0
    channel_top_half: float = 14.0
    channel_depth: float = 1.5
    building_size_x: float = 15.0
    building_size_y: float = 12.0
    building_gap: float = 8.0
    building_first_x: float = 120.0
    building_last_x: float = 480.0
    building_offset_y: float = 6.0  # strip between bank top and building fronts
    building_height: float = 7.0
    wall_height: float = 1.2
    wall_width: float = 0.4
    sidewalk_height: float = 0.15
    sidewalk_width: float = 1.5
    curb_height: float = 0.12
    curb_width: float = 0.3
    base_discharge: float = 100.0
    peak_discharge: float = 300.0
    rise_end: float = 40.0
    peak_end: float = 110.0
    fall_end: float = 160.0
    t_end: float = 180.0
    sea_level: float = 0.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0 or self.cell_size <= 0:
            raise ValidationError("valley extent and cell size must be positive")
        if not self.channel_bottom_half < self.channel_top_half < self.width / 2:
            raise ValidationError("channel half-widths inconsistent with the valley width")
        if self.channel_top_half + self.building_offset_y + self.building_size_y + 2 * self.cell_size > self.width / 2:
            raise ValidationError("building bands do not fit inside the valley")
        if not 0 <= self.base_discharge <= self.peak_discharge:
            raise ValidationError("discharges must satisfy 0 <= base <= peak")
        if not 0 < self.rise_end < self.peak_end < self.fall_end <= self.t_end:
            raise ValidationError("hydrograph phases must be increasing")

    @classmethod
    def from_file(cls, path) -> "ValleyConfig":
        reader = KvReader.from_file(path)
        kwargs = {}
        for f in fields(cls):
            if f.name in reader.entries:
                kwargs[f.name] = reader.float(f.name)
        unknown = reader.unknown_keys()
        if unknown:
            raise ValidationError(f"{path}: unknown valley keys {unknown}")
        return cls(**kwargs)

    @property
    def geometry(self) -> GridGeometry:
        ncols = round(self.length / self.cell_size)
        nrows = round(self.width / self.cell_size)
        return GridGeometry(ncols, nrows, 0.0, 0.0, self.cell_size)

    def hydrograph(self) -> Hydrograph:
        return Hydrograph((
            (0.0, self.base_discharge),
            (self.rise_end, self.peak_discharge),
            (self.peak_end, self.peak_discharge),
            (self.fall_end, self.base_discharge),
        ))

    def upstream_span(self) -> tuple[float, float]:
        """Y extent (meters) of the inflow slice of the west edge."""
        return (self.channel_center_y - self.channel_top_half,
                self.channel_center_y + self.channel_top_half)

    def bankfull_discharge(self, manning_n: float = 0.015) -> float:
        """Manning uniform-flow conveyance of the full trapezoidal channel."""
        b = 2 * self.channel_bottom_half
        top = 2 * self.channel_top_half
        d = self.channel_depth
        area = 0.5 * (b + top) * d
        side = math.hypot(self.channel_top_half - self.channel_bottom_half, d)
        perimeter = b + 2 * side
        radius = area / perimeter
        return area * radius ** (2.0 / 3.0) * math.sqrt(self.slope_long) / manning_n

    def base_normal_depth(self, manning_n: float = 0.015) -> float:
        """Manning normal depth (wide-channel) for the base discharge."""
        q_unit = self.base_discharge / (2 * self.channel_top_half)
        return (manning_n * q_unit / math.sqrt(self.slope_long)) ** 0.6

    def prefill_surface(self, manning_n: float = 0.015) -> tuple[float, float]:
        """(surface elevation at x=0, longitudinal slope) of the start water plane."""
        s0 = self.base_elevation - self.channel_depth + self.base_normal_depth(manning_n)
        return s0, self.slope_long


def _dtm_values(cfg: ValleyConfig, geometry: GridGeometry) -> np.ndarray:
    x = geometry.x_centers()[None, :]
    y = geometry.y_centers()[:, None]
    dy = np.abs(y - cfg.channel_center_y)
    floodplain = (cfg.base_elevation - cfg.slope_long * x
                  + cfg.slope_cross * np.maximum(0.0, dy - cfg.channel_top_half))
    carve = np.where(
        dy <= cfg.channel_bottom_half,
        cfg.channel_depth,
        np.where(
            dy < cfg.channel_top_half,
            cfg.channel_depth * (cfg.channel_top_half - dy)
            / (cfg.channel_top_half - cfg.channel_bottom_half),
            0.0,
        ),
    )
    return floodplain - carve


def _band_positions(cfg: ValleyConfig) -> list:
    xs = []
    x0 = cfg.building_first_x
    pitch = cfg.building_size_x + cfg.building_gap
    while x0 + cfg.building_size_x <= cfg.building_last_x + 1e-9:
        xs.append(x0)
        x0 += pitch
    if not xs:
        raise ValidationError("no buildings fit between building_first_x and building_last_x")
    return xs


def _building_band(cfg: ValleyConfig, front_y: float, back_y: float):
    lo, hi = min(front_y, back_y), max(front_y, back_y)
    return [
        Feature(
            "polygon",
            ((x0, lo), (x0 + cfg.building_size_x, lo),
             (x0 + cfg.building_size_x, hi), (x0, hi)),
            crest_height=cfg.building_height,
        )
        for x0 in _band_positions(cfg)
    ]


def synth_valley(cfg: ValleyConfig | None = None):
    """Build the valley: (1 m DTM, [buildings, walls, street_features], points).

    Points of interest are labelled ``sheltered_*`` (in the lee of buildings
    or walls) and ``open_*`` (streets and open floodplain).
    """
    cfg = cfg or ValleyConfig()
    geometry = cfg.geometry
    dtm = Raster(geometry, _dtm_values(cfg, geometry))

    yc = cfg.channel_center_y
    bank_n = yc + cfg.channel_top_half          # 164 with defaults
    bank_s = yc - cfg.channel_top_half          # 136
    front_n = bank_n + cfg.building_offset_y    # 170
    back_n = front_n + cfg.building_size_y      # 182
    front_s = bank_s - cfg.building_offset_y    # 130
    back_s = front_s - cfg.building_size_y      # 118

    buildings = FeatureLayer("buildings", tuple(
        _building_band(cfg, front_n, back_n) + _building_band(cfg, front_s, back_s)
    ))

    positions = _band_positions(cfg)
    n_b = len(positions)

    def center_x(k):
        return positions[min(k, n_b - 1)] + cfg.building_size_x / 2

    def gap_x(k):  # gap k sits just west of building k
        return positions[min(max(k, 1), n_b - 1)] - cfg.building_gap / 2

    first, last = positions[0], positions[-1] + cfg.building_size_x
    mid = 0.5 * (first + last)
    wall_y_n = bank_n + 2.0
    wall_y_s = bank_s - 2.0
    wall_gap_n = min(1, n_b - 1)
    wall_gap_s = min(3, n_b - 1)
    walls = FeatureLayer("walls", (
        # bank wall sheltering the upstream half of the north band
        Feature("polyline", ((max(first - 20.0, 1.0), wall_y_n), (mid - 10.0, wall_y_n)),
                width=cfg.wall_width, crest_height=cfg.wall_height),
        # bank wall sheltering the downstream half of the south band
        Feature("polyline", ((mid + 10.0, wall_y_s),
                             (min(last + 20.0, cfg.length - 1.0), wall_y_s)),
                width=cfg.wall_width, crest_height=cfg.wall_height),
        # yard walls closing one street gap in each band
        Feature("polyline", ((gap_x(wall_gap_n), front_n), (gap_x(wall_gap_n), back_n)),
                width=cfg.wall_width, crest_height=cfg.wall_height),
        Feature("polyline", ((gap_x(wall_gap_s), front_s), (gap_x(wall_gap_s), back_s)),
                width=cfg.wall_width, crest_height=cfg.wall_height),
    ))

    street = FeatureLayer("street_features", (
        # sidewalks along the open strips in front of both bands
        Feature("polyline", ((first, front_n - 2.0), (last, front_n - 2.0)),
                width=cfg.sidewalk_width, crest_height=cfg.sidewalk_height),
        Feature("polyline", ((first, front_s + 2.0), (last, front_s + 2.0)),
                width=cfg.sidewalk_width, crest_height=cfg.sidewalk_height),
        # curbs at the bank side of the strips
        Feature("polyline", ((first, bank_n + 1.0), (last, bank_n + 1.0)),
                width=cfg.curb_width, crest_height=cfg.curb_height),
        Feature("polyline", ((first, bank_s - 1.0), (last, bank_s - 1.0)),
                width=cfg.curb_width, crest_height=cfg.curb_height),
    ))

    # points of interest: lee side of buildings/walls vs open streets/plain
    # (open points avoid the walled gaps; indices cap for tiny layouts)
    points = PointSet((
        (center_x(1), back_n + 4.0, "sheltered_1"),
        (center_x(4), back_n + 4.0, "sheltered_2"),
        (center_x(7), back_n + 4.0, "sheltered_3"),
        (center_x(3), back_s - 4.0, "sheltered_4"),
        (center_x(6), back_s - 4.0, "sheltered_5"),
        ((max(first - 20.0, 1.0) + mid - 10.0) / 2, wall_y_n + 2.5, "sheltered_6"),
        (gap_x(wall_gap_n + 1), front_n + 3.0, "open_1"),
        (gap_x(wall_gap_n + 4), front_n + 3.0, "open_2"),
        (gap_x(wall_gap_s - 1), front_s - 3.0, "open_3"),
        (min(mid + 50.0, cfg.length - 5.0), bank_n + 2.5, "open_4"),  # unwalled strip
        (mid - 10.0, min(back_n + 20.0, cfg.width - 5.0), "open_5"),  # open floodplain
        (mid - 40.0, max(back_s - 20.0, 5.0), "open_6"),
    ))

    for x, y, label in points.points:
        if not geometry.contains(x, y):
            raise ValidationError(f"point {label} at ({x}, {y}) outside the valley")
    return dtm, [buildings, walls, street], points

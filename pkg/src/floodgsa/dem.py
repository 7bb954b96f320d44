"""DEM composition: feature extrusion, random error fields, factorial cases.

A DEM variant is named ``SmRnEx``: detail scheme m (cumulative feature
groups), grid resolution n in meters, and error realization x. Composition
always runs in the same order: extrude features onto the bare terrain, add
the per-cell Gaussian error field at base resolution, then coarsen.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfExtentError, ValidationError
from .raster import GridGeometry, Raster, resample

GROUPS = ("buildings", "walls", "street_features")


# ---------------------------------------------------------------------------
# Features and layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Feature:
    """A polygon footprint or a buffered polyline to burn into the terrain.

    Exactly one of ``crest_elevation`` (absolute) or ``crest_height`` (above
    the local surface) must be set. Polylines carry a finite positive width;
    thin lines are widened during burning so that every cell the centerline
    crosses is captured.
    """

    kind: str  # "polygon" | "polyline"
    vertices: tuple  # of (x, y)
    width: float = 0.0
    crest_elevation: float | None = None
    crest_height: float | None = None

    def __post_init__(self):
        if self.kind not in ("polygon", "polyline"):
            raise ValidationError(f"unknown feature kind {self.kind!r}")
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if self.kind == "polygon" and len(verts) < 3:
            raise ValidationError("polygon needs at least 3 vertices")
        if self.kind == "polyline":
            if len(verts) < 2:
                raise ValidationError("polyline needs at least 2 vertices")
            if not (np.isfinite(self.width) and self.width > 0):
                raise ValidationError(f"polyline width must be finite and positive, got {self.width}")
        if (self.crest_elevation is None) == (self.crest_height is None):
            raise ValidationError("exactly one of crest_elevation / crest_height must be set")
        crest = self.crest_elevation if self.crest_elevation is not None else self.crest_height
        if not np.isfinite(crest):
            raise ValidationError("crest value must be finite")


@dataclass(frozen=True)
class FeatureLayer:
    """One of the three feature aggregates burned cumulatively into DEMs."""

    group: str
    features: tuple

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValidationError(f"group must be one of {GROUPS}, got {self.group!r}")
        object.__setattr__(self, "features", tuple(self.features))


def _polygon_mask(geometry: GridGeometry, vertices) -> np.ndarray:
    """Cells whose center lies inside the polygon (even-odd rule)."""
    xs = geometry.x_centers()[None, :]
    ys = geometry.y_centers()[:, None]
    inside = np.zeros((geometry.nrows, geometry.ncols), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (ys >= min(y1, y2)) & (ys < max(y1, y2))
        x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_at)
    return inside


def _capsule_mask(geometry: GridGeometry, vertices, radius: float) -> np.ndarray:
    """Cells whose center is within ``radius`` of the polyline (round caps)."""
    xs = geometry.x_centers()[None, :]
    ys = geometry.y_centers()[:, None]
    mask = np.zeros((geometry.nrows, geometry.ncols), dtype=bool)
    for (x1, y1), (x2, y2) in zip(vertices[:-1], vertices[1:]):
        dx, dy = x2 - x1, y2 - y1
        seg2 = dx * dx + dy * dy
        if seg2 == 0.0:
            t = 0.0
        else:
            t = np.clip(((xs - x1) * dx + (ys - y1) * dy) / seg2, 0.0, 1.0)
        px = x1 + t * dx
        py = y1 + t * dy
        mask |= (xs - px) ** 2 + (ys - py) ** 2 <= radius * radius
    return mask


def feature_mask(geometry: GridGeometry, feature: Feature) -> np.ndarray:
    """Boolean grid of the cells a feature occupies."""
    if feature.kind == "polygon":
        return _polygon_mask(geometry, feature.vertices)
    # widen thin lines so any cell the centerline crosses is within reach of
    # its center (half-diagonal = cell_size / sqrt2)
    radius = max(feature.width, np.sqrt(2.0) * geometry.cell_size) / 2.0
    return _capsule_mask(geometry, feature.vertices, radius)


def extrude_features(dtm: Raster, layer: FeatureLayer) -> Raster:
    """Raise covered cells to each feature's crest: max(surface, crest).

    Absolute crests burn ``crest_elevation``; relative crests burn the input
    surface plus ``crest_height``. Overlapping features resolve to the
    highest crest. Cells outside all features are untouched.
    """
    g = dtm.geometry
    xmin, ymin, xmax, ymax = g.extent
    out = np.array(dtm.values)
    for feat in layer.features:
        vx = np.array([v[0] for v in feat.vertices])
        vy = np.array([v[1] for v in feat.vertices])
        if vx.min() < xmin or vx.max() > xmax or vy.min() < ymin or vy.max() > ymax:
            raise OutOfExtentError([f"{layer.group} feature at ({vx.min():g}, {vy.min():g})"])
        mask = feature_mask(g, feat)
        if feat.crest_elevation is not None:
            crest = feat.crest_elevation
        else:
            crest = dtm.values + feat.crest_height
        out = np.where(mask, np.maximum(out, crest), out)
    return Raster(g, out)


# ---------------------------------------------------------------------------
# Layer file format: kind;group;width;crest_mode;crest_value;x1,y1 x2,y2 ...
# ---------------------------------------------------------------------------

def save_layers(layers, path) -> None:
    with open(path, "w") as fh:
        for layer in layers:
            for f in layer.features:
                mode = "elevation" if f.crest_elevation is not None else "height"
                value = f.crest_elevation if f.crest_elevation is not None else f.crest_height
                coords = " ".join(f"{x!r},{y!r}" for x, y in f.vertices)
                fh.write(f"{f.kind};{layer.group};{f.width!r};{mode};{value!r};{coords}\n")


def load_layers(path) -> list[FeatureLayer]:
    """Read a layer file and return the three groups in canonical order.

    Groups absent from the file come back as empty layers, so the result is
    always [buildings, walls, street_features].
    """
    grouped: dict[str, list[Feature]] = {g: [] for g in GROUPS}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(";")
            if len(parts) != 6:
                raise ValidationError(f"{path}:{lineno}: expected 6 ';'-separated fields")
            kind, group, width, mode, value, coords = parts
            if group not in GROUPS:
                raise ValidationError(f"{path}:{lineno}: unknown group {group!r}")
            if mode not in ("elevation", "height"):
                raise ValidationError(f"{path}:{lineno}: crest_mode must be elevation|height")
            try:
                verts = tuple(tuple(float(c) for c in pair.split(",")) for pair in coords.split())
                feat = Feature(
                    kind=kind,
                    vertices=verts,
                    width=float(width),
                    crest_elevation=float(value) if mode == "elevation" else None,
                    crest_height=float(value) if mode == "height" else None,
                )
            except (ValueError, ValidationError) as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from None
            grouped[group].append(feat)
    return [FeatureLayer(g, tuple(grouped[g])) for g in GROUPS]


# ---------------------------------------------------------------------------
# Error fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorFieldSpec:
    """Per-cell Gaussian error field, reproducible from (master_seed, index)."""

    realization_index: int
    sigma: float = 0.2
    mean: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError(f"sigma must be non-negative, got {self.sigma}")
        if not 1 <= self.realization_index:
            raise ValidationError(f"realization index must be >= 1, got {self.realization_index}")

    def with_realization(self, x: int) -> "ErrorFieldSpec":
        return ErrorFieldSpec(x, self.sigma, self.mean, self.master_seed)


def generate_error_field(geometry: GridGeometry, spec: ErrorFieldSpec) -> Raster:
    """I.i.d. Gaussian(mean, sigma) raster, a pure function of the spec.

    The stream is keyed on (master_seed, realization_index) with a
    counter-based generator, so realizations are independent and can be
    produced in any order.
    """
    key = np.array([np.uint64(spec.master_seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(spec.realization_index)], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    noise = rng.standard_normal((geometry.nrows, geometry.ncols))
    return Raster(geometry, noise * spec.sigma + spec.mean)


# ---------------------------------------------------------------------------
# Factorial cases
# ---------------------------------------------------------------------------

_CASE_RE = re.compile(r"^S(\d+)R(\d+)E(\d+)$")


@dataclass(frozen=True, order=True)
class CaseId:
    """One point of the factorial design: scheme m, resolution n, error x."""

    m: int
    n: int
    x: int

    def __post_init__(self):
        if not (1 <= self.m <= 4):
            raise ValidationError(f"scheme level must be in [1, 4], got {self.m}")
        if not (1 <= self.n <= 5):
            raise ValidationError(f"resolution must be in [1, 5] m, got {self.n}")
        if self.x < 1:
            raise ValidationError(f"error realization must be >= 1, got {self.x}")

    def __str__(self):
        return f"S{self.m}R{self.n}E{self.x}"

    @classmethod
    def parse(cls, text: str) -> "CaseId":
        match = _CASE_RE.match(text.strip())
        if not match:
            raise ValidationError(f"case name {text!r} does not match SmRnEx")
        return cls(*(int(g) for g in match.groups()))


def enumerate_cases(m_levels, n_levels, x_count: int) -> list[CaseId]:
    """Full factorial in lexicographic order: m outer, n middle, x inner."""
    m_levels, n_levels = list(m_levels), list(n_levels)
    if not m_levels or not n_levels or x_count < 1:
        raise ValidationError("scheme/resolution levels and error count must be non-empty")
    return [CaseId(m, n, x) for m in m_levels for n in n_levels for x in range(1, x_count + 1)]


def compose_dem(dtm: Raster, layers, case: CaseId, spec_template: ErrorFieldSpec) -> Raster:
    """Build the DEM for one case: extrude, add the error field, coarsen.

    ``layers`` must be the three groups in order (buildings, walls,
    street_features); scheme m burns the first m-1 of them.
    """
    layers = list(layers)
    if [l.group for l in layers] != list(GROUPS):
        raise ValidationError(f"layers must be ordered {GROUPS}")
    surface = dtm
    for layer in layers[: case.m - 1]:
        surface = extrude_features(surface, layer)
    error = generate_error_field(dtm.geometry, spec_template.with_realization(case.x))
    surface = surface + error
    return resample(surface, dtm.geometry.cell_size * case.n, "block_mean")

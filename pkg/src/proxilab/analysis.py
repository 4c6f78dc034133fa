"""Statistical reconstruction of a target's privacy envelope.

Turns collected transitions into bounding boxes and centroids, measures the
target-to-edge offset distributions, estimates the tessellation tile size by
shifting a target in small steps, and derives the maximum localization error
as a function of latitude.

All rectangle work happens in a local meter frame anchored at the target's
true position. The attacker never needs that position; it is evaluation
metadata used to express results in comparable coordinates.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geo import GeoPoint, destination, to_local
from .prober import (
    INNER_CLASS_M,
    Direction,
    ProbeConfig,
    ProbeSession,
    TransitionSet,
    collect_transitions,
)
from .service import (
    SECONDS_PER_DAY,
    LocalClient,
    Quantizer,
    Service,
    TargetRegistry,
)


class InsufficientCoverageError(ValueError):
    """Transitions do not surround the target well enough for a box."""


class TooFewSamplesError(ValueError):
    pass


class NoShiftObservedError(RuntimeError):
    """The deployment span was too short to observe enough boundary shifts."""


class Shape(str, Enum):
    SQUARE = "Square"
    CROSS = "Cross"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Rect:
    """Axis-aligned box [x_m, x_M] x [y_m, y_M] in local meters."""

    x_m: float
    x_M: float
    y_m: float
    y_M: float

    def __post_init__(self) -> None:
        if self.x_m > self.x_M or self.y_m > self.y_M:
            raise ValueError("rect edges out of order")

    @property
    def width(self) -> float:
        return self.x_M - self.x_m

    @property
    def height(self) -> float:
        return self.y_M - self.y_m

    @property
    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return ((self.x_m + self.x_M) / 2.0, (self.y_m + self.y_M) / 2.0)

    def corners(self) -> tuple[tuple[float, float], ...]:
        return (
            (self.x_m, self.y_m),
            (self.x_m, self.y_M),
            (self.x_M, self.y_m),
            (self.x_M, self.y_M),
        )


@dataclass(frozen=True)
class Phasor:
    rho: float
    phase: float  # radians in [-pi, pi]


@dataclass
class PrivacyReport:
    """Per-deployment result: box, centroid, tile size and error bound."""

    rect: Rect
    centroid: tuple[float, float]
    tile_size_m: float | None
    max_error_m: float | None
    shape: Shape
    n_transitions: int
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "rect": {"x_m": self.rect.x_m, "x_M": self.rect.x_M, "y_m": self.rect.y_m, "y_M": self.rect.y_M},
            "centroid": list(self.centroid),
            "tile_size_m": self.tile_size_m,
            "max_error_m": self.max_error_m,
            "shape": self.shape.value,
            "n_transitions": self.n_transitions,
            "n_queries": self.n_queries,
        }


# City list spanning latitudes 5 to 71 degrees north, used by the default
# latitude sweep.
SWEEP_CITIES: tuple[tuple[str, float, float], ...] = (
    ("Kourou", 5.154237, -52.648526),
    ("Coban", 15.46463, -90.403683),
    ("Doha", 25.26174, 51.359269),
    ("Lakatamya", 35.11438, 33.296804),
    ("Carcassonne", 43.21324, 2.344961),
    ("Winnipeg", 50.00542, -97.16734),
    ("Malmo", 55.555275, 13.015577),
    ("Helsinki", 60.239339, 24.922424),
    ("Bodo", 67.277398, 14.374172),
    ("Utqiagvik", 71.300602, -156.754113),
)


# -- box geometry ----------------------------------------------------------


def midpoints_local(tset: TransitionSet, anchor: GeoPoint) -> np.ndarray:
    """Transition midpoints as (n, 2) local meters about the anchor."""
    pts = []
    for t in tset.transitions:
        xy = to_local(anchor, t.midpoint())
        pts.append((xy.x, xy.y))
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def _crossing_sides(tset: TransitionSet, anchor: GeoPoint, rect: Rect) -> set[str]:
    """Which region faces (N/S/E/W) the transitions crossed.

    A straddle's inside-to-outside vector is the outward normal of the face
    it crossed; degenerate (zero-width) straddles fall back to their position
    relative to the box center.
    """
    cx, cy = rect.center()
    half_w = rect.width / 2.0
    half_h = rect.height / 2.0
    sides: set[str] = set()
    for t in tset.transitions:
        a = to_local(anchor, t.inside)
        b = to_local(anchor, t.outside)
        dx, dy = b.x - a.x, b.y - a.y
        if dx == 0.0 and dy == 0.0:
            x, y = (a.x + b.x) / 2.0, (a.y + b.y) / 2.0
            dx = (x - cx) / half_w if half_w > 0 else 0.0
            dy = (y - cy) / half_h if half_h > 0 else 0.0
            if dx == 0.0 and dy == 0.0:
                continue
        if abs(dx) >= abs(dy):
            sides.add("E" if dx > 0 else "W")
        else:
            sides.add("N" if dy > 0 else "S")
    return sides


def bounding_box(tset: TransitionSet, anchor: GeoPoint) -> Rect:
    """Component-wise min/max box over transition midpoints.

    Requires at least four transitions with crossings on at least three
    distinct region faces; anything less produces badly one-sided or
    degenerate boxes and is rejected.
    """
    pts = midpoints_local(tset, anchor)
    if len(pts) < 4:
        raise InsufficientCoverageError(f"need >= 4 transitions, have {len(pts)}")
    rect = Rect(
        x_m=float(pts[:, 0].min()),
        x_M=float(pts[:, 0].max()),
        y_m=float(pts[:, 1].min()),
        y_M=float(pts[:, 1].max()),
    )
    if len(_crossing_sides(tset, anchor, rect)) < 3:
        raise InsufficientCoverageError("crossings cover fewer than 3 region faces")
    return rect


def centroid(rect: Rect) -> tuple[float, float]:
    """Center of the box: the attacker's best estimate of the target."""
    return rect.center()


def edge_offsets(rects: list[Rect]) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each box edge to the target, pooled across runs.

    Every rect must be expressed in its own target-anchored frame (target at
    the origin). Returns (d_x, d_y) with two samples per run per axis, one
    for each opposing edge.
    """
    d_x: list[float] = []
    d_y: list[float] = []
    for r in rects:
        d_x.extend((r.x_M, -r.x_m))
        d_y.extend((r.y_M, -r.y_m))
    return np.asarray(d_x), np.asarray(d_y)


def phasor(target_xy: tuple[float, float], centroid_xy: tuple[float, float]) -> Phasor:
    """Amplitude and phase of the centroid-to-target offset."""
    dx = target_xy[0] - centroid_xy[0]
    dy = target_xy[1] - centroid_xy[1]
    return Phasor(rho=math.hypot(dx, dy), phase=math.atan2(dy, dx))


# -- empirical distributions ------------------------------------------------


class Ecdf:
    """Empirical CDF with a distribution-free confidence band."""

    def __init__(self, samples, alpha: float = 0.05):
        arr = np.sort(np.asarray(samples, dtype=float))
        if arr.size < 1:
            raise TooFewSamplesError("need at least one sample")
        self.samples = arr
        self.n = int(arr.size)
        self.alpha = alpha
        self.band_half_width = math.sqrt(math.log(2.0 / alpha) / (2.0 * self.n))

    def __call__(self, x):
        return np.searchsorted(self.samples, x, side="right") / self.n

    def rows(self) -> list[tuple[float, float, float, float]]:
        """(value, F, lo, hi) per sample point, band clipped to [0, 1]."""
        eps = self.band_half_width
        out = []
        for k, v in enumerate(self.samples, start=1):
            f = k / self.n
            out.append((float(v), f, max(0.0, f - eps), min(1.0, f + eps)))
        return out


def ecdf(samples, alpha: float = 0.05) -> Ecdf:
    return Ecdf(samples, alpha=alpha)


def fit_uniform(samples) -> tuple[float, float]:
    """Uniform fit by sample min/max, exactly as plotted in the field study
    (biased, but fidelity beats optimality here)."""
    arr = np.asarray(samples, dtype=float)
    if arr.size < 20:
        raise TooFewSamplesError(f"need >= 20 samples for a uniform fit, have {arr.size}")
    return float(arr.min()), float(arr.max())


# -- shape taxonomy ----------------------------------------------------------


def classify_shape(
    obj,
    anchor: GeoPoint | None = None,
    min_transitions: int = 20,
) -> Shape:
    """Square when boundary points reach the box corners, Cross when every
    corner is notched inward by at least a third of the tile size.

    Accepts a TransitionSet (with its anchor) or a bare sequence of local
    (x, y) boundary points. Returns Unknown when coverage is insufficient.
    """
    if isinstance(obj, TransitionSet):
        if anchor is None:
            raise ValueError("anchor required to localize a TransitionSet")
        pts = midpoints_local(obj, anchor)
    else:
        pts = np.asarray(list(obj), dtype=float).reshape(-1, 2)
    if len(pts) < min_transitions:
        return Shape.UNKNOWN
    rect = Rect(
        x_m=float(pts[:, 0].min()),
        x_M=float(pts[:, 0].max()),
        y_m=float(pts[:, 1].min()),
        y_M=float(pts[:, 1].max()),
    )
    if rect.width <= 0 or rect.height <= 0:
        return Shape.UNKNOWN
    cx, cy = rect.center()
    quadrants = {(x > cx, y > cy) for x, y in pts if x != cx and y != cy}
    if len(quadrants) < 4:
        return Shape.UNKNOWN
    tile = (rect.width + rect.height) / 6.0  # box spans three tiles per side
    for corner in rect.corners():
        d_min = float(np.hypot(pts[:, 0] - corner[0], pts[:, 1] - corner[1]).min())
        if d_min <= tile / 3.0:
            return Shape.SQUARE
    return Shape.CROSS


# -- tile size and localization error ----------------------------------------


def max_localization_error(tile_size_m: float) -> float:
    """Half-diagonal of the uncertainty tile: worst-case distance from the
    tile center to any point of the tile."""
    if tile_size_m < 0:
        raise ValueError("tile size must be non-negative")
    return tile_size_m * math.sqrt(2.0) / 2.0


class SimulatorLab:
    """Private service whose single target can be redeployed at will.

    Every deployment starts a fresh virtual day, mirroring a multi-day
    measurement campaign, so reduced scans never exhaust the daily quota.
    """

    def __init__(
        self,
        grid_deg: float = 0.005,
        cfg: ProbeConfig | None = None,
        account: str = "surveyor",
        target_id: str = "probe",
        quantizer: Quantizer | None = None,
    ):
        self.cfg = cfg or ProbeConfig()
        self.target_id = target_id
        self._registry = TargetRegistry()
        self._registry.add(target_id, GeoPoint(0.0, 0.0))
        self._service = Service(self._registry, quantizer or Quantizer(grid_deg))
        self._client = LocalClient(self._service, account)
        self._day = 0
        self._pos: GeoPoint | None = None

    @property
    def service(self) -> Service:
        return self._service

    def deploy(self, pos: GeoPoint) -> None:
        self._registry.move(self.target_id, pos)
        self._day += 1
        self._pos = pos

    def session(self, seed: int = 0) -> ProbeSession:
        return ProbeSession(
            self._client,
            self.target_id,
            self.cfg,
            start_ts=self._day * SECONDS_PER_DAY,
            rng=random.Random(seed),
        )

    def boundary_along(self, origin: GeoPoint, bearing: float) -> float:
        """Signed distance from origin, along the bearing, of the nearest
        class boundary beyond the deployed target."""
        if self._pos is None:
            raise RuntimeError("deploy a target first")
        sess = self.session()
        if sess.query_class(self._pos) != INNER_CLASS_M:
            raise RuntimeError("deployed position does not report the inner class")
        inside, outside = sess.probe_outward(self._pos, self._pos, bearing)
        t = sess.bisect_boundary(inside, outside, direction=Direction.OUT, bearing=bearing)
        xy = to_local(origin, t.midpoint())
        theta = math.radians(bearing)
        return xy.x * math.sin(theta) + xy.y * math.cos(theta)

    def collect(self, pos: GeoPoint, seed: int = 0, n_transitions: int = 30) -> TransitionSet:
        self.deploy(pos)
        return collect_transitions(
            self._client,
            self.target_id,
            hint=pos,
            cfg=self.cfg,
            n_transitions=n_transitions,
            start_ts=self._day * SECONDS_PER_DAY,
            rng=random.Random(seed),
        )


def estimate_tile_size(
    lab: SimulatorLab,
    base: GeoPoint,
    step: float = 10.0,
    axis: str = "x",
    n_shifts: int = 4,
    max_span_m: float = 4000.0,
) -> float:
    """Tile size from boundary shifts under small target displacements.

    The target is redeployed every `step` meters along the axis; the scan
    records the offsets at which the measured class boundary jumps and
    returns the mean gap between consecutive shifts. Shift offsets are
    centered between the last unshifted and first shifted deployment, so the
    estimate error is bounded by step / (n_shifts - 1).
    """
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    if step <= 0:
        raise ValueError("step must be positive")
    bearing = 90.0 if axis == "x" else 0.0
    threshold = 5.0 * lab.cfg.accuracy  # real shifts are >= one tile, far above jitter
    shift_offsets: list[float] = []
    prev_boundary: float | None = None
    offset = 0.0
    while offset <= max_span_m:
        lab.deploy(destination(base, bearing, offset))
        boundary = lab.boundary_along(base, bearing)
        if prev_boundary is not None and abs(boundary - prev_boundary) > threshold:
            shift_offsets.append(offset - step / 2.0)
            if len(shift_offsets) >= n_shifts:
                break
        prev_boundary = boundary
        offset += step
    if len(shift_offsets) < 2:
        raise NoShiftObservedError(
            f"only {len(shift_offsets)} boundary shift(s) within {max_span_m} m; widen the span"
        )
    return (shift_offsets[-1] - shift_offsets[0]) / (len(shift_offsets) - 1)


@dataclass
class SweepRow:
    name: str
    lat: float
    lon: float
    tile_size_m: float | None
    max_error_m: float | None
    shape: str
    error: str | None = None


def latitude_sweep(
    locations=SWEEP_CITIES,
    step: float = 10.0,
    grid_deg: float = 0.005,
    seed: int = 0,
    n_shifts: int = 4,
    with_shape: bool = True,
) -> list[SweepRow]:
    """Tile size and localization error per location; failures are recorded
    per row and the sweep continues."""
    rows: list[SweepRow] = []
    for name, lat, lon in locations:
        pos = GeoPoint(lat, lon)
        try:
            lab = SimulatorLab(grid_deg=grid_deg)
            tile = estimate_tile_size(lab, pos, step=step, n_shifts=n_shifts)
            err = max_localization_error(tile)
            shape = Shape.UNKNOWN
            if with_shape:
                shape_lab = SimulatorLab(grid_deg=grid_deg)
                tset = shape_lab.collect(pos, seed=seed)
                shape = classify_shape(tset, anchor=pos)
            rows.append(SweepRow(name, lat, lon, tile, err, shape.value))
        except Exception as exc:  # per-row failure, sweep continues
            rows.append(SweepRow(name, lat, lon, None, None, Shape.UNKNOWN.value, str(exc)))
    return rows


def run_probe_deployment(
    target_pos: GeoPoint,
    seed: int = 0,
    grid_deg: float = 0.005,
    cfg: ProbeConfig | None = None,
    n_transitions: int = 30,
    hint: GeoPoint | None = None,
    account: str = "finder",
    target_id: str = "target",
) -> tuple[TransitionSet, Service]:
    """One fresh deployment plus attack run against an in-process service."""
    registry = TargetRegistry()
    registry.add(target_id, target_pos)
    service = Service(registry, Quantizer(grid_deg))
    client = LocalClient(service, account)
    tset = collect_transitions(
        client,
        target_id,
        hint=hint or target_pos,
        cfg=cfg or ProbeConfig(seed=seed),
        n_transitions=n_transitions,
        rng=random.Random(seed),
    )
    return tset, service


def build_report(
    tset: TransitionSet,
    anchor: GeoPoint,
    tile_size_m: float | None = None,
) -> PrivacyReport:
    """Assemble the per-deployment report. When no independently measured
    tile size is supplied it is derived from the box (three tiles per side)."""
    rect = bounding_box(tset, anchor)
    if tile_size_m is None:
        tile_size_m = (rect.width + rect.height) / 6.0
    return PrivacyReport(
        rect=rect,
        centroid=centroid(rect),
        tile_size_m=tile_size_m,
        max_error_m=max_localization_error(tile_size_m),
        shape=classify_shape(tset, anchor=anchor),
        n_transitions=len(tset),
        n_queries=tset.total_queries,
    )


# -- file outputs -------------------------------------------------------------


def _config_line(config: dict | None) -> str:
    return "# config " + json.dumps(config or {}, sort_keys=True, separators=(",", ":")) + "\n"


def write_sweep_csv(path: str, rows: list[SweepRow], config: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_config_line(config))
        writer = csv.writer(fh)
        writer.writerow(["name", "lat", "lon", "l_m", "D_m", "shape"])
        for r in rows:
            writer.writerow([
                r.name,
                r.lat,
                r.lon,
                "" if r.tile_size_m is None else r.tile_size_m,
                "" if r.max_error_m is None else r.max_error_m,
                r.shape,
            ])


def write_ecdf_csv(path: str, dist: Ecdf, config: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_config_line(config))
        writer = csv.writer(fh)
        writer.writerow(["value", "F", "lo", "hi"])
        for row in dist.rows():
            writer.writerow(list(row))


def write_report_json(path: str, report: PrivacyReport, config: dict | None = None) -> None:
    payload = {"config": config or {}, "report": report.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")

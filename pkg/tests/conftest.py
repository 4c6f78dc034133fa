"""Shared fixtures and an independent geometry oracle.

The oracle re-derives the snapping and bucketing rules from scratch (own
Mercator formulas, own haversine, brute-force cell enumeration) so tests
never validate the implementation against itself.
"""

from __future__ import annotations

import math
import random

import pytest

from proxilab.geo import GeoPoint
from proxilab.analysis import run_probe_deployment

ORACLE_RADIUS_M = 6_378_137.0
ORACLE_M_PER_DEG = ORACLE_RADIUS_M * math.pi / 180.0
ORACLE_GRID_DEG = 0.005
PUBLIC_CLASSES = (500, 1000, 2000, 3000, 4000, 5000, 6000,
                  7000, 8000, 9000, 10000, 11000, 12000)


def oracle_merc_y(lat_deg: float) -> float:
    return math.degrees(math.log(math.tan(math.pi / 4.0 + math.radians(lat_deg) / 2.0)))


def oracle_inv_y(y_deg: float) -> float:
    return math.degrees(2.0 * math.atan(math.exp(math.radians(y_deg))) - math.pi / 2.0)


def oracle_haversine(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = math.radians(lat2 - lat1)
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * ORACLE_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def oracle_node(lat_deg: float, lon_deg: float, grid: float = ORACLE_GRID_DEG) -> tuple[int, int]:
    return (
        math.floor(lon_deg / grid + 0.5),
        math.floor(oracle_merc_y(lat_deg) / grid + 0.5),
    )


def oracle_node_latlon(i: int, j: int, grid: float = ORACLE_GRID_DEG) -> tuple[float, float]:
    return oracle_inv_y(j * grid), i * grid


def oracle_class(
    finder: GeoPoint,
    target: GeoPoint,
    grid: float = ORACLE_GRID_DEG,
    contact: bool = False,
) -> int | None:
    """Reported class per the rounding-then-nearest-bucket rules."""
    f_lat, f_lon = oracle_node_latlon(*oracle_node(finder.lat, finder.lon, grid), grid)
    t_lat, t_lon = oracle_node_latlon(*oracle_node(target.lat, target.lon, grid), grid)
    d = oracle_haversine(f_lat, f_lon, t_lat, t_lon)
    allowed = ((100,) if contact else ()) + PUBLIC_CLASSES
    if d > allowed[-1] + 500.0:
        return None
    return min(allowed, key=lambda c: (abs(d - c), c))


def oracle_region_cells(target: GeoPoint, grid: float = ORACLE_GRID_DEG) -> set[tuple[int, int]]:
    """Cell offsets (di, dj) whose node classifies as 500 for the target."""
    i0, j0 = oracle_node(target.lat, target.lon, grid)
    n_lat, n_lon = oracle_node_latlon(i0, j0, grid)
    cells = set()
    for di in range(-7, 8):
        for dj in range(-7, 8):
            c_lat, c_lon = oracle_node_latlon(i0 + di, j0 + dj, grid)
            if oracle_haversine(c_lat, c_lon, n_lat, n_lon) <= 750.0:
                cells.add((di, dj))
    return cells


def oracle_bbox_local(target: GeoPoint, grid: float = ORACLE_GRID_DEG) -> tuple[float, float, float, float]:
    """Analytic transition-boundary box in local meters about the target."""
    i0, j0 = oracle_node(target.lat, target.lon, grid)
    cells = oracle_region_cells(target, grid)
    min_i = min(c[0] for c in cells)
    max_i = max(c[0] for c in cells)
    min_j = min(c[1] for c in cells)
    max_j = max(c[1] for c in cells)
    cos_lat = math.cos(math.radians(target.lat))
    x_lo = ((i0 + min_i - 0.5) * grid - target.lon) * cos_lat * ORACLE_M_PER_DEG
    x_hi = ((i0 + max_i + 0.5) * grid - target.lon) * cos_lat * ORACLE_M_PER_DEG
    y_lo = (oracle_inv_y((j0 + min_j - 0.5) * grid) - target.lat) * ORACLE_M_PER_DEG
    y_hi = (oracle_inv_y((j0 + max_j + 0.5) * grid) - target.lat) * ORACLE_M_PER_DEG
    return x_lo, x_hi, y_lo, y_hi


def oracle_boundary_points(lat_deg: float, grid: float = ORACLE_GRID_DEG, per_edge: int = 9) -> list[tuple[float, float]]:
    """Dense scan of the 500-region boundary in local meters about the node.

    Walks every exposed cell edge of the region and samples points along it.
    """
    target = GeoPoint(lat_deg, 0.0)
    cells = oracle_region_cells(target, grid)
    i0, j0 = oracle_node(target.lat, target.lon, grid)
    n_lat, n_lon = oracle_node_latlon(i0, j0, grid)
    cos_lat = math.cos(math.radians(n_lat))

    def to_xy(merc_x, merc_y):
        x = (merc_x - n_lon) * cos_lat * ORACLE_M_PER_DEG
        y = (oracle_inv_y(merc_y) - n_lat) * ORACLE_M_PER_DEG
        return (x, y)

    pts = []
    for di, dj in cells:
        cx, cy = (i0 + di) * grid, (j0 + dj) * grid
        edges = {
            (0, 1): ((cx - grid / 2, cy + grid / 2), (cx + grid / 2, cy + grid / 2)),
            (0, -1): ((cx - grid / 2, cy - grid / 2), (cx + grid / 2, cy - grid / 2)),
            (1, 0): ((cx + grid / 2, cy - grid / 2), (cx + grid / 2, cy + grid / 2)),
            (-1, 0): ((cx - grid / 2, cy - grid / 2), (cx - grid / 2, cy + grid / 2)),
        }
        for (ni, nj), (a, b) in edges.items():
            if (di + ni, dj + nj) in cells:
                continue  # interior edge
            for k in range(per_edge):
                f = (k + 0.5) / per_edge
                pts.append(to_xy(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])))
    return pts


@pytest.fixture(scope="session")
def midlat_runs():
    """100 seeded attack runs against jittered targets at latitude 40, the
    square regime. Shared by the prober properties and the acceptance gate."""
    runs = []
    for seed in range(100):
        rng = random.Random(seed)
        target = GeoPoint(40.0 + rng.uniform(-0.02, 0.02), -3.0 + rng.uniform(-0.03, 0.03))
        tset, service = run_probe_deployment(target, seed=seed)
        runs.append((target, tset, service))
    return runs

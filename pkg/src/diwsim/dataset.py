"""Procedural slice dataset.

Random printable slices (radially perturbed blobs, optionally with a
hole) whose feature sizes span one to five deposition widths, replacing
curated mesh datasets.  Every generated slice is verified to produce a
valid plan before it is accepted.
"""

from __future__ import annotations

import numpy as np

from . import geom


def _blob(rng: np.random.Generator, center, r_mean: float, rough: float,
          n_pts: int = 24) -> geom.Polygon:
    """Closed star-convex polygon: radius-perturbed circle."""
    theta = np.linspace(0.0, 2 * np.pi, n_pts, endpoint=False)
    # smooth low-order perturbation so local features stay printable
    k1, k2 = rng.integers(2, 5), rng.integers(5, 8)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    radii = r_mean * (1.0 + rough * (0.7 * np.sin(k1 * theta + p1)
                                     + 0.3 * np.sin(k2 * theta + p2)))
    pts = np.stack([center[0] + radii * np.cos(theta),
                    center[1] + radii * np.sin(theta)], axis=1)
    return geom.Polygon(pts)


def random_slice(seed: int, width: float = 0.4,
                 bed: geom.BedGrid = None) -> geom.SliceSet:
    """One random printable slice.  Feature sizes (lobe scale, hole
    clearance) span roughly 1-5 deposition widths."""
    rng = np.random.default_rng(seed)
    bed = bed or geom.BedGrid()
    cx = bed.origin[0] + bed.size_mm / 2.0
    cy = bed.origin[1] + bed.size_mm / 2.0
    for attempt in range(32):
        r_mean = rng.uniform(4.0 * width, 10.0 * width)
        rough = rng.uniform(0.05, 0.25)
        outer = _blob(rng, (cx, cy), r_mean, rough)
        holes = []
        if r_mean > 6.0 * width and rng.random() < 0.6:
            hole_r = rng.uniform(1.0 * width, r_mean - 4.0 * width)
            ang = rng.uniform(0, 2 * np.pi)
            off = rng.uniform(0.0, max(0.0, r_mean * (1 - rough)
                                       - hole_r - 3.0 * width))
            hc = (cx + off * np.cos(ang), cy + off * np.sin(ang))
            hole = _blob(rng, hc, hole_r, rough * 0.5, n_pts=16)
            if outer.to_shapely().buffer(-2.5 * width).contains(
                    hole.to_shapely()):
                holes = [hole]
        try:
            slices = geom.orient_slices([outer] + holes)
            geom.plan_paths(slices, geom.PlanConfig(width=width))
            return slices
        except geom.GeomError:
            continue
    raise geom.GeomError(f"no printable slice for seed {seed}")


def simple_slice(kind: str, size: float = 6.0,
                 bed: geom.BedGrid = None) -> geom.SliceSet:
    """Deterministic fixture slices: square | triangle | circle."""
    bed = bed or geom.BedGrid()
    cx = bed.origin[0] + bed.size_mm / 2.0
    cy = bed.origin[1] + bed.size_mm / 2.0
    h = size / 2.0
    if kind == "square":
        pts = np.array([[cx - h, cy - h], [cx + h, cy - h],
                        [cx + h, cy + h], [cx - h, cy + h]])
    elif kind == "triangle":
        pts = np.array([[cx - h, cy - h], [cx + h, cy - h], [cx, cy + h]])
    elif kind == "circle":
        theta = np.linspace(0, 2 * np.pi, 32, endpoint=False)
        pts = np.stack([cx + h * np.cos(theta), cy + h * np.sin(theta)],
                       axis=1)
    else:
        raise ValueError(f"unknown fixture kind {kind!r}")
    return geom.orient_slices([geom.Polygon(pts)])


def generate_dataset(n: int, seed: int, out_dir, width: float = 0.4) -> list:
    """Write n procedural slices as polygon JSON files; returns paths."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(n):
        slices = random_slice(seed * 7919 + i, width=width)
        path = os.path.join(out_dir, f"slice_{i:04d}.json")
        geom.save_polygon_json(slices, path)
        paths.append(path)
    return paths

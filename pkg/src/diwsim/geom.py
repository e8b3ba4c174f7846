"""Planning geometry: mesh slicing, outline offsetting, zig-zag infill.

All coordinates are millimetres.  Slices follow the orientation convention
that outer contours are counter-clockwise and holes are clockwise, which
keeps the material side on the left of the travel direction for every
contour.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import reduce

import numpy as np
import shapely
from shapely.geometry import LineString, MultiLineString, MultiPolygon
from shapely.geometry import Polygon as _SPolygon
from shapely.geometry.polygon import orient as _orient
from shapely.ops import unary_union

WELD_TOL = 1e-6      # vertex welding during slicing
CLOSE_TOL = 1e-4     # max gap allowed when closing a contour


class GeomError(Exception):
    pass


class OpenContour(GeomError):
    """Slice segments do not close into loops (broken mesh)."""


class EmptySlice(GeomError):
    """The slicing plane does not intersect the mesh."""


class AmbiguousNesting(GeomError):
    """Polygon boundaries overlap; containment hierarchy undefined."""


class DegenerateOffset(GeomError):
    """All offset loops vanished; slice unprintable at this width."""


class OutOfBounds(GeomError):
    """Slice does not fit the bed grid."""


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Mesh:
    vertices: np.ndarray   # (n, 3) float64
    triangles: np.ndarray  # (m, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise GeomError("triangle index out of range")
        self._drop_degenerate()

    def _drop_degenerate(self):
        if not len(self.triangles):
            return
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        area2 = np.linalg.norm(cross, axis=1)
        self.triangles = t[area2 > 1e-12]

    @property
    def z_range(self) -> tuple[float, float]:
        z = self.vertices[:, 2]
        return float(z.min()), float(z.max())


@dataclass
class Polygon:
    points: np.ndarray  # (n, 2), implicitly closed

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if len(self.points) >= 2 and np.allclose(self.points[0], self.points[-1]):
            self.points = self.points[:-1]
        if len(self.points) < 3:
            raise GeomError("polygon needs at least 3 points")

    @property
    def signed_area(self) -> float:
        p = self.points
        x, y = p[:, 0], p[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def is_ccw(self) -> bool:
        return self.signed_area > 0

    def reversed(self) -> "Polygon":
        return Polygon(self.points[::-1].copy())

    def to_shapely(self) -> _SPolygon:
        return _SPolygon(self.points)


@dataclass
class SliceSet:
    outer: list[Polygon]
    holes: list[Polygon]
    z: float = 0.0

    def region(self):
        """Even-odd filled region as a shapely geometry."""
        polys = [p.to_shapely() for p in self.outer + self.holes]
        if not polys:
            return _SPolygon()
        return reduce(lambda acc, p: acc.symmetric_difference(p), polys)


@dataclass
class ToolPath:
    waypoints: np.ndarray           # (n, 2)
    role: str                       # "outline" | "infill"
    normals: np.ndarray = None      # (n, 2), unit, left of travel

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.normals is None:
            self.normals = path_normals(self.waypoints)
        else:
            self.normals = np.asarray(self.normals, dtype=np.float64)

    @property
    def length(self) -> float:
        d = np.diff(self.waypoints, axis=0)
        return float(np.sqrt((d ** 2).sum(axis=1)).sum())


@dataclass
class PlanConfig:
    width: float = 0.4        # deposition width w
    ds: float = 0.315         # resample step

    def __post_init__(self):
        if self.width <= 0 or self.ds <= 0:
            raise GeomError("width and ds must be positive")


@dataclass
class BedGrid:
    nx: int = 512
    ny: int = 512
    size_mm: float = 22.0
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def pitch(self) -> float:
        return self.size_mm / self.nx

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.pitch
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * (self.size_mm / self.ny)
        return xs, ys

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.origin[0], self.origin[1],
                self.origin[0] + self.size_mm, self.origin[1] + self.size_mm)


# ---------------------------------------------------------------------------
# helpers


def path_normals(waypoints: np.ndarray) -> np.ndarray:
    """Per-waypoint unit normals pointing left of the travel direction."""
    wp = np.asarray(waypoints, dtype=np.float64)
    n = len(wp)
    if n < 2:
        return np.zeros((n, 2))
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1, keepdims=True)
    seg_len[seg_len == 0] = 1.0
    tang = seg / seg_len
    # waypoint tangent = mean of adjacent segment tangents
    vt = np.empty((n, 2))
    vt[0] = tang[0]
    vt[-1] = tang[-1]
    if n > 2:
        vt[1:-1] = tang[:-1] + tang[1:]
    closed = np.allclose(wp[0], wp[-1])
    if closed and n > 2:
        vt[0] = vt[-1] = tang[0] + tang[-1]
    norm = np.linalg.norm(vt, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    vt /= norm
    return np.stack([-vt[:, 1], vt[:, 0]], axis=1)


def _ring_toolpath(coords, role: str) -> ToolPath:
    wp = np.asarray(coords, dtype=np.float64)
    # drop consecutive duplicates, keep the closing point
    keep = np.ones(len(wp), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(wp, axis=0), axis=1) > 1e-12
    wp = wp[keep]
    return ToolPath(wp, role)


def _iter_polygons(geom):
    if geom.is_empty:
        return []
    if isinstance(geom, _SPolygon):
        return [geom]
    if isinstance(geom, MultiPolygon):
        return list(geom.geoms)
    return [g for g in getattr(geom, "geoms", []) if isinstance(g, _SPolygon)]


# ---------------------------------------------------------------------------
# operations


def slice_mesh(mesh: Mesh, z: float) -> SliceSet:
    """Intersect the mesh with the plane at height ``z`` and chain the
    resulting segments into closed, oriented polygons."""
    zmin, zmax = mesh.z_range
    if not (zmin <= z <= zmax):
        raise EmptySlice(f"z={z} outside mesh range [{zmin}, {zmax}]")

    vz = mesh.vertices[:, 2].copy()
    # nudge vertices lying exactly on the plane to avoid degenerate crossings
    on_plane = np.abs(vz - z) < 1e-12
    vz[on_plane] = z + 1e-9

    segments = []
    v = mesh.vertices
    for tri in mesh.triangles:
        zs = vz[tri]
        above = zs > z
        if above.all() or (~above).all():
            continue
        pts = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ia, ib = tri[a], tri[b]
            za, zb = zs[a], zs[b]
            if (za > z) != (zb > z):
                t = (z - za) / (zb - za)
                p = v[ia, :2] + t * (v[ib, :2] - v[ia, :2])
                pts.append(p)
        if len(pts) == 2:
            segments.append((pts[0], pts[1]))
    if not segments:
        raise EmptySlice(f"no intersection at z={z}")

    loops = _chain_segments(segments)
    polys = []
    for loop in loops:
        pts = np.asarray(loop)
        if len(pts) >= 3:
            try:
                polys.append(Polygon(pts))
            except GeomError:
                pass
    if not polys:
        raise EmptySlice(f"only degenerate loops at z={z}")
    ss = orient_slices(polys)
    ss.z = z
    return ss


def _weld_key(p) -> tuple[int, int]:
    return (int(round(p[0] / WELD_TOL)), int(round(p[1] / WELD_TOL)))


def _chain_segments(segments) -> list[list[np.ndarray]]:
    endpoints: dict[tuple[int, int], list[int]] = {}
    for i, (a, b) in enumerate(segments):
        endpoints.setdefault(_weld_key(a), []).append(i)
        endpoints.setdefault(_weld_key(b), []).append(i)

    used = [False] * len(segments)
    loops = []
    for start in range(len(segments)):
        if used[start]:
            continue
        used[start] = True
        a, b = segments[start]
        chain = [a, b]
        while True:
            key = _weld_key(chain[-1])
            nxt = None
            for j in endpoints.get(key, ()):
                if not used[j]:
                    nxt = j
                    break
            if nxt is None:
                break
            used[nxt] = True
            c, d = segments[nxt]
            # append the far endpoint
            if _weld_key(c) == key:
                chain.append(d)
            else:
                chain.append(c)
            if _weld_key(chain[-1]) == _weld_key(chain[0]):
                break
        gap = np.linalg.norm(np.asarray(chain[-1]) - np.asarray(chain[0]))
        if gap > CLOSE_TOL:
            raise OpenContour(f"contour gap {gap:.3g} mm exceeds {CLOSE_TOL} mm")
        loops.append(chain[:-1] if gap <= WELD_TOL * 2 else chain)
    return loops


def orient_slices(raw: list[Polygon]) -> SliceSet:
    """Classify polygons by even-odd nesting depth and normalize
    orientations: even depth -> outer, CCW; odd depth -> hole, CW."""
    shp = [p.to_shapely() for p in raw]
    for i in range(len(shp)):
        for j in range(i + 1, len(shp)):
            inter = shp[i].boundary.intersection(shp[j].boundary)
            if not inter.is_empty and inter.length > 0:
                raise AmbiguousNesting(f"polygons {i} and {j} overlap")
    outer, holes = [], []
    for i, poly in enumerate(raw):
        # nesting depth of the whole ring, not of an interior sample point
        # (a centre point could fall inside a sibling hole)
        depth = sum(1 for j, other in enumerate(shp)
                    if j != i and other.contains(shp[i]))
        if depth % 2 == 0:
            outer.append(poly if poly.is_ccw else poly.reversed())
        else:
            holes.append(poly.reversed() if poly.is_ccw else poly)
    return SliceSet(outer=outer, holes=holes)


def offset_outline(slices: SliceSet, delta: float) -> list[ToolPath]:
    """Inset the printable region by ``delta`` (half the deposition width)
    and emit one closed outline toolpath per resulting contour."""
    if delta <= 0:
        raise GeomError("offset delta must be positive")
    inset = slices.region().buffer(-delta, quad_segs=16)
    polys = _iter_polygons(inset)
    if not polys:
        raise DegenerateOffset(f"region vanished at offset {delta} mm")
    paths = []
    for poly in polys:
        poly = _orient(poly, sign=1.0)  # exterior CCW, interiors CW
        paths.append(_ring_toolpath(poly.exterior.coords, "outline"))
        for ring in poly.interiors:
            paths.append(_ring_toolpath(ring.coords, "outline"))
    return paths


def zigzag_infill(slices: SliceSet, w: float) -> list[ToolPath]:
    """Serpentine infill: horizontal scanlines spaced ``w`` apart, clipped
    to the region inset by ``w``, chained bottom-to-top per component."""
    inset = slices.region().buffer(-w, quad_segs=16)
    paths = []
    for poly in _iter_polygons(inset):
        minx, miny, maxx, maxy = poly.bounds
        ys = np.arange(miny, maxy + 1e-9, w)
        rows = []
        for y in ys:
            line = LineString([(minx - 1.0, y), (maxx + 1.0, y)])
            cut = poly.intersection(line)
            segs = []
            geoms = cut.geoms if isinstance(cut, MultiLineString) else (
                [cut] if isinstance(cut, LineString) and not cut.is_empty else [])
            for g in geoms:
                xs = [c[0] for c in g.coords]
                if max(xs) - min(xs) > 1e-9:
                    segs.append((min(xs), max(xs), y))
            rows.append(sorted(segs))
        paths.extend(_chain_scanlines(rows))
    return paths


def _chain_scanlines(rows) -> list[ToolPath]:
    used = [[False] * len(r) for r in rows]
    paths = []
    for r0 in range(len(rows)):
        for s0 in range(len(rows[r0])):
            if used[r0][s0]:
                continue
            pts = []
            r, s = r0, s0
            left_to_right = True
            while True:
                used[r][s] = True
                x0, x1, y = rows[r][s]
                if left_to_right:
                    pts += [(x0, y), (x1, y)]
                else:
                    pts += [(x1, y), (x0, y)]
                end_x = x1 if left_to_right else x0
                # continue on the next row with an x-overlapping segment
                nxt = None
                if r + 1 < len(rows):
                    best = None
                    for k, (a, b, _) in enumerate(rows[r + 1]):
                        if used[r + 1][k] or min(x1, b) - max(x0, a) < -1e-9:
                            continue
                        d = min(abs(a - end_x), abs(b - end_x))
                        if best is None or d < best[0]:
                            best = (d, k)
                    if best is not None:
                        nxt = best[1]
                if nxt is None:
                    break
                r, s = r + 1, nxt
                left_to_right = not left_to_right
            if len(pts) >= 2:
                paths.append(ToolPath(np.asarray(pts), "infill"))
    return paths


def resample_path(path: ToolPath, ds: float) -> ToolPath:
    """Arc-length resampling at spacing ``ds``; the final segment may be
    shorter so that the last waypoint is preserved."""
    if ds <= 0:
        raise GeomError("ds must be positive")
    wp = path.waypoints
    if len(wp) < 2:
        return ToolPath(wp.copy(), path.role)
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        return ToolPath(wp[:1].copy(), path.role)
    targets = np.arange(0.0, total, ds)
    if total - targets[-1] > 1e-12:
        targets = np.append(targets, total)
    x = np.interp(targets, s, wp[:, 0])
    y = np.interp(targets, s, wp[:, 1])
    return ToolPath(np.stack([x, y], axis=1), path.role)


def rasterize_target(slices: SliceSet, grid: BedGrid) -> np.ndarray:
    """Binary occupancy image of the slice region (even-odd rule), sampled
    at pixel centers.  Returns a (ny, nx) float32 array in {0, 1}."""
    region = slices.region()
    if region.is_empty:
        return np.zeros((grid.ny, grid.nx), dtype=np.float32)
    gx0, gy0, gx1, gy1 = grid.bounds
    rx0, ry0, rx1, ry1 = region.bounds
    if rx0 < gx0 - 1e-9 or ry0 < gy0 - 1e-9 or rx1 > gx1 + 1e-9 or ry1 > gy1 + 1e-9:
        raise OutOfBounds("slice extends beyond the bed grid")
    xs, ys = grid.centers()
    xg, yg = np.meshgrid(xs, ys)
    inside = shapely.contains_xy(region, xg.ravel(), yg.ravel())
    return inside.reshape(grid.ny, grid.nx).astype(np.float32)


def rasterize_paths(paths: list[ToolPath], width: float,
                    grid: BedGrid) -> np.ndarray:
    """Binary image of the bead band the given toolpaths intend to cover:
    each path buffered by half the deposition width.  (ny, nx) float32."""
    lines = [LineString(p.waypoints) for p in paths if len(p.waypoints) >= 2]
    if not lines:
        return np.zeros((grid.ny, grid.nx), dtype=np.float32)
    band = unary_union(lines).buffer(width / 2.0)
    xs, ys = grid.centers()
    xg, yg = np.meshgrid(xs, ys)
    inside = shapely.contains_xy(band, xg.ravel(), yg.ravel())
    return inside.reshape(grid.ny, grid.nx).astype(np.float32)


def plan_paths(slices: SliceSet, config: PlanConfig,
               infill: bool = True) -> list[ToolPath]:
    """Full baseline plan: offset outlines first, then zig-zag infill,
    all resampled at the configured step distance."""
    paths = offset_outline(slices, config.width / 2.0)
    if infill:
        paths += zigzag_infill(slices, config.width)
    return [resample_path(p, config.ds) for p in paths]


# ---------------------------------------------------------------------------
# file formats


def load_stl(path) -> Mesh:
    with open(path, "rb") as f:
        head = f.read(5)
    if head == b"solid":
        try:
            return _load_stl_ascii(path)
        except (ValueError, UnicodeDecodeError):
            pass  # binary files may also start with "solid"
    return _load_stl_binary(path)


def _load_stl_ascii(path) -> Mesh:
    verts, tris = [], []
    index: dict[tuple, int] = {}
    cur = []
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            parts = line.split()
            if parts[:1] == ["vertex"]:
                p = (float(parts[1]), float(parts[2]), float(parts[3]))
                if p not in index:
                    index[p] = len(verts)
                    verts.append(p)
                cur.append(index[p])
                if len(cur) == 3:
                    tris.append(cur)
                    cur = []
    if not tris:
        raise GeomError(f"no facets in {path}")
    return Mesh(np.asarray(verts), np.asarray(tris))


def _load_stl_binary(path) -> Mesh:
    with open(path, "rb") as f:
        f.read(80)
        (count,) = struct.unpack("<I", f.read(4))
        data = np.frombuffer(f.read(count * 50), dtype=np.uint8)
    if len(data) != count * 50:
        raise GeomError("truncated binary STL")
    rec = data.reshape(count, 50)
    tri_pts = rec[:, 12:48].copy().view("<f4").reshape(count, 3, 3).astype(np.float64)
    verts, tris = [], []
    index: dict[tuple, int] = {}
    for t in range(count):
        tri = []
        for k in range(3):
            p = tuple(tri_pts[t, k])
            if p not in index:
                index[p] = len(verts)
                verts.append(p)
            tri.append(index[p])
        tris.append(tri)
    return Mesh(np.asarray(verts), np.asarray(tris))


def write_stl_binary(mesh: Mesh, path):
    tris = mesh.triangles
    v = mesh.vertices
    with open(path, "wb") as f:
        f.write(b"\0" * 80)
        f.write(struct.pack("<I", len(tris)))
        for t in tris:
            f.write(struct.pack("<3f", 0.0, 0.0, 0.0))
            for k in t:
                f.write(struct.pack("<3f", *v[k]))
            f.write(struct.pack("<H", 0))


def load_polygon_json(path) -> SliceSet:
    """Load ``{"outer": [[x,y],...], "holes": [[[x,y],...], ...]}``."""
    with open(path) as f:
        doc = json.load(f)
    polys = [Polygon(np.asarray(doc["outer"]))]
    for h in doc.get("holes", []):
        polys.append(Polygon(np.asarray(h)))
    return orient_slices(polys)


def save_polygon_json(slices: SliceSet, path):
    if len(slices.outer) != 1:
        raise GeomError("polygon JSON stores exactly one outer contour")
    doc = {
        "outer": slices.outer[0].points.tolist(),
        "holes": [h.points.tolist() for h in slices.holes],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def toolpaths_to_json(paths: list[ToolPath]) -> list[dict]:
    return [
        {"role": p.role,
         "waypoints": p.waypoints.tolist(),
         "normals": p.normals.tolist()}
        for p in paths
    ]

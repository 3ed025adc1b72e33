"""Spatial domain, triangulated mesh construction and barycentric projection.

Meshes are built from two regular triangular lattices: a fine one covering
the domain (slightly dilated so every triangle touching the domain is fine)
and a coarser one filling the extension band. The union is Delaunay
triangulated and triangles outside the extended polygon are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import shapely
from scipy.spatial import Delaunay, cKDTree
from shapely.geometry import Polygon

KM_PER_DEGREE = 111.32

__all__ = [
    "Domain",
    "Mesh",
    "MeshError",
    "OutOfMeshError",
    "build_mesh",
    "project",
    "read_mesh",
    "write_mesh",
    "degrees_to_km",
]


class MeshError(ValueError):
    """Invalid domain or mesh construction parameters."""


class OutOfMeshError(ValueError):
    """A point does not fall inside any mesh triangle."""

    def __init__(self, index: int, point):
        self.index = int(index)
        self.point = tuple(float(v) for v in point)
        super().__init__(
            f"point {self.index} at ({self.point[0]:.6g}, {self.point[1]:.6g}) "
            "lies outside the mesh"
        )


@dataclass(frozen=True)
class Domain:
    """Closed study region given by a single boundary polygon.

    Parameters
    ----------
    boundary : array_like, shape (k, 2)
        Polygon vertices, open or closed ring.
    unit : {"km", "degrees"}
        Coordinate unit. Degrees are treated as planar coordinates.
    """

    boundary: np.ndarray
    unit: str = "degrees"

    def __post_init__(self):
        b = np.asarray(self.boundary, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2 or len(b) < 3:
            raise MeshError("domain boundary needs at least 3 (x, y) vertices")
        if not np.all(np.isfinite(b)):
            raise MeshError("domain boundary has non-finite coordinates")
        if self.unit not in ("km", "degrees"):
            raise MeshError(f"unknown unit {self.unit!r}")
        poly = Polygon(b)
        if not poly.is_valid:
            raise MeshError("domain boundary is self-intersecting")
        if poly.area <= 0:
            raise MeshError("domain boundary has zero area")
        object.__setattr__(self, "boundary", b)

    @classmethod
    def rectangle(cls, xmin, ymin, xmax, ymax, unit="degrees"):
        return cls(np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]]), unit)

    @property
    def polygon(self) -> Polygon:
        return Polygon(self.boundary)

    @property
    def area(self) -> float:
        return self.polygon.area

    @property
    def diameter(self) -> float:
        b = self.boundary
        return float(np.max(np.linalg.norm(b[:, None, :] - b[None, :, :], axis=-1)))

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return shapely.intersects_xy(self.polygon, pts[:, 0], pts[:, 1])


def degrees_to_km(coords, mean_latitude: float | None = None) -> np.ndarray:
    """Convert (lon, lat) degrees to planar km at the mean latitude."""
    c = np.asarray(coords, dtype=float)
    lat0 = np.mean(c[:, 1]) if mean_latitude is None else mean_latitude
    out = np.empty_like(c)
    out[:, 0] = c[:, 0] * KM_PER_DEGREE * np.cos(np.deg2rad(lat0))
    out[:, 1] = c[:, 1] * KM_PER_DEGREE
    return out


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with counter-clockwise triangles."""

    vertices: np.ndarray
    triangles: np.ndarray
    interior: np.ndarray = field(default=None)
    _tree: cKDTree = field(default=None, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (n, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (m, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle references a missing vertex")
        area = _signed_areas(v, t)
        flip = area < 0
        if np.any(flip):
            t = t.copy()
            t[flip] = t[flip][:, [0, 2, 1]]
        if np.any(np.abs(area) <= 0):
            raise MeshError("mesh contains degenerate triangles")
        interior = np.ones(len(v), bool) if self.interior is None else np.asarray(self.interior, bool)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "_tree", cKDTree(v[t].mean(axis=1)))
        v.setflags(write=False)
        t.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def edge_lengths(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique edges ``(i, j)`` and their lengths."""
        t = self.triangles
        e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        e = np.unique(e, axis=0)
        d = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        return e, d


def _signed_areas(v, t):
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


_SPACING = 0.8


def _lattice(poly: Polygon, h: float) -> np.ndarray:
    """Triangular lattice points with spacing ``h`` inside ``poly``."""
    xmin, ymin, xmax, ymax = poly.bounds
    dy = h * np.sqrt(3) / 2
    rows = np.arange(ymin, ymax + dy, dy)
    pts = []
    for k, y in enumerate(rows):
        off = 0.5 * h if k % 2 else 0.0
        xs = np.arange(xmin - off, xmax + h, h)
        pts.append(np.column_stack([xs, np.full_like(xs, y)]))
    pts = np.vstack(pts)
    return pts[shapely.contains_xy(poly, pts[:, 0], pts[:, 1])]


def _ring_points(poly: Polygon, h: float) -> np.ndarray:
    ring = poly.exterior
    n = max(int(np.ceil(ring.length / h)), 3)
    d = np.linspace(0.0, ring.length, n, endpoint=False)
    pts = shapely.get_coordinates(shapely.line_interpolate_point(ring, d))
    # always keep polygon corners so the boundary is reproduced exactly
    corners = np.asarray(ring.coords)[:-1]
    return np.vstack([corners, pts])


def build_mesh(
    domain: Domain,
    max_edge: float,
    extension: float = 0.0,
    outer_edge: float | None = None,
    max_vertices: int = 50_000,
) -> Mesh:
    """Triangulate ``domain`` extended by ``extension``.

    Parameters
    ----------
    domain : Domain
    max_edge : float
        Target edge length inside the domain.
    extension : float
        Width of the extension band around the domain.
    outer_edge : float, optional
        Edge length in the extension band, default ``2 * max_edge``.
    max_vertices : int
        Guard against runaway resolution.

    Returns
    -------
    Mesh
    """
    if not max_edge > 0:
        raise MeshError("max_edge must be positive")
    if extension < 0:
        raise MeshError("extension must be non-negative")
    outer_edge = 2.0 * max_edge if outer_edge is None else float(outer_edge)
    if not outer_edge >= max_edge:
        raise MeshError("outer_edge must be at least max_edge")

    poly = domain.polygon
    outer = poly.buffer(extension, join_style="mitre") if extension > 0 else poly
    expected = poly.area / (max_edge**2 * np.sqrt(3) / 2)
    expected += (outer.area - poly.area) / (outer_edge**2 * np.sqrt(3) / 2)
    if expected > max_vertices:
        raise MeshError(
            f"max_edge={max_edge:g} needs about {int(expected)} vertices, cap is {max_vertices}"
        )

    # lattice spacing below the bound leaves slack for boundary transitions
    h_in = _SPACING * max_edge
    h_out = _SPACING * outer_edge
    fine_region = poly.buffer(max_edge, join_style="mitre").intersection(outer)
    fine = _lattice(fine_region, h_in)
    parts = [fine, _ring_points(poly, h_in)]
    if extension > 0:
        band = outer.difference(poly.buffer(1.5 * max_edge, join_style="mitre"))
        if not band.is_empty:
            parts.append(_lattice(band, h_out))
        parts.append(_ring_points(outer, h_out))
    pts = np.vstack(parts)

    # merge near-duplicates
    tol = 1e-3 * max_edge
    keys = np.round(pts / tol).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    pts = pts[np.sort(idx)]
    tree = cKDTree(pts)
    drop = set()
    for i, j in sorted(tree.query_pairs(0.3 * h_in)):
        if i not in drop:
            drop.add(j)
    if drop:
        keep = np.setdiff1d(np.arange(len(pts)), np.fromiter(drop, int))
        pts = pts[keep]
    if len(pts) > max_vertices:
        raise MeshError(f"mesh would have {len(pts)} vertices, cap is {max_vertices}")

    tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12")
    simplices = tri.simplices
    centroids = pts[simplices].mean(axis=1)
    inside = shapely.intersects_xy(outer.buffer(1e-9 * max_edge), centroids[:, 0], centroids[:, 1])
    simplices = simplices[inside]
    area = np.abs(_signed_areas(pts, simplices))
    simplices = simplices[area > 1e-10 * max_edge**2]

    used = np.unique(simplices)
    remap = -np.ones(len(pts), np.int64)
    remap[used] = np.arange(len(used))
    verts = pts[used]
    interior = domain.contains(verts)
    return Mesh(verts, remap[simplices], interior)


def _barycentric(mesh: Mesh, pts: np.ndarray, tri_idx: np.ndarray) -> np.ndarray:
    v = mesh.vertices
    t = mesh.triangles[tri_idx]
    a, b, c = v[t[..., 0]], v[t[..., 1]], v[t[..., 2]]
    det = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (c[..., 0] - a[..., 0]) * (b[..., 1] - a[..., 1])
    px = pts[..., 0] - a[..., 0]
    py = pts[..., 1] - a[..., 1]
    l1 = (px * (c[..., 1] - a[..., 1]) - (c[..., 0] - a[..., 0]) * py) / det
    l2 = ((b[..., 0] - a[..., 0]) * py - px * (b[..., 1] - a[..., 1])) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def project(mesh: Mesh, points, tol: float = 1e-9) -> sp.csr_matrix:
    """Barycentric interpolation matrix from mesh vertices to ``points``.

    Returns a sparse ``(len(points), mesh.n_vertices)`` matrix whose rows
    are convex combinations of the containing triangle's vertices.

    Raises
    ------
    OutOfMeshError
        For the first point not covered by any triangle.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(pts)
    if n == 0:
        return sp.csr_matrix((0, mesh.n_vertices))
    found = -np.ones(n, np.int64)
    weights = np.zeros((n, 3))

    k = min(12, len(mesh.triangles))
    _, cand = mesh._tree.query(pts, k=k)
    cand = cand.reshape(n, k)
    lam = _barycentric(mesh, pts[:, None, :], cand)
    # take the candidate the point is most inside, so a point on a shared
    # edge is not assigned to a neighbour it lies just outside of
    depth = lam.min(axis=-1)
    best = np.argmax(depth, axis=1)
    hit = depth[np.arange(n), best] >= -tol
    found[hit] = cand[hit, best[hit]]
    weights[hit] = lam[hit, best[hit]]

    # exhaustive fallback for the rare misses
    all_tri = np.arange(len(mesh.triangles))
    for i in np.flatnonzero(~hit):
        lam_i = _barycentric(mesh, pts[i][None, :], all_tri)
        j = int(np.argmax(lam_i.min(axis=-1)))
        if lam_i[j].min() < -tol:
            raise OutOfMeshError(i, pts[i])
        found[i] = j
        weights[i] = lam_i[j]

    weights = np.clip(weights, 0.0, 1.0)
    weights /= weights.sum(axis=1, keepdims=True)
    cols = mesh.triangles[found]
    rows = np.repeat(np.arange(n), 3)
    A = sp.csr_matrix((weights.ravel(), (rows, cols.ravel())), shape=(n, mesh.n_vertices))
    A.eliminate_zeros()
    return A


def write_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format.

    The file holds a ``# vertices`` section of ``id,x,y,interior`` lines and
    a ``# triangles`` section of ``v1,v2,v3`` lines (0-based ids).
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# vertices {mesh.n_vertices}\n")
        fh.write("id,x,y,interior\n")
        for i, ((x, y), f) in enumerate(zip(mesh.vertices, mesh.interior)):
            fh.write(f"{i},{float(x)!r},{float(y)!r},{int(f)}\n")
        fh.write(f"# triangles {len(mesh.triangles)}\n")
        fh.write("v1,v2,v3\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a},{b},{c}\n")


def read_mesh(path) -> Mesh:
    lines = Path(path).read_text().splitlines()
    try:
        nv = int(lines[0].split()[2])
        vt = np.array([ln.split(",") for ln in lines[2 : 2 + nv]], dtype=float)
        nt = int(lines[2 + nv].split()[2])
        tt = np.array([ln.split(",") for ln in lines[4 + nv : 4 + nv + nt]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    return Mesh(vt[:, 1:3], tt.reshape(-1, 3), vt[:, 3].astype(bool))

"""Watertight triangle meshes, the point-in-mesh occupancy oracle, and sampling.

Meshes are plain vertex/face arrays.  Everything here is a pure function over
immutable inputs; nothing keeps state, so all of it is safe to call from
parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Normalized shapes live in this centered cube.
UNIT_BOX = (np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5]))


class MeshError(ValueError):
    """Raised for meshes that violate a precondition (open, degenerate, ...)."""


@dataclass
class TriangleMesh:
    """Triangle surface mesh.

    vertices: (V, 3) float64 positions.
    faces: (F, 3) int64 vertex indices, counter-clockwise seen from outside.
    watertight: set by the closedness check in :func:`make_mesh`.
    """

    vertices: np.ndarray
    faces: np.ndarray
    watertight: bool = False

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps raw coordinates into the centered unit cube and back."""

    center: tuple[float, float, float]
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.center)


@dataclass
class OccupancySample:
    """Query positions with binary inside/outside labels."""

    positions: np.ndarray  # (Q, 3) float64
    values: np.ndarray  # (Q,) uint8 in {0, 1}

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.values = np.asarray(self.values)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (Q, 3), got {self.positions.shape}")
        if len(self.positions) != len(self.values):
            raise ValueError("positions and values must have equal length")
        if self.values.size and not np.isin(self.values, (0, 1)).all():
            raise ValueError("values must be binary")
        self.values = self.values.astype(np.uint8)

    def __len__(self) -> int:
        return len(self.positions)


def boundary_edges(faces: np.ndarray) -> np.ndarray:
    """Directed edges whose reverse never occurs: (K, 2) array, empty if closed."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fwd = set(map(tuple, e))
    open_e = [edge for edge in fwd if (edge[1], edge[0]) not in fwd]
    return np.array(sorted(open_e), dtype=np.int64).reshape(-1, 2)


def is_closed(faces: np.ndarray) -> bool:
    """True when every directed edge appears exactly once and its reverse exists."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return False
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges, counts = np.unique(e, axis=0, return_counts=True)
    if (counts != 1).any():
        return False
    fwd = set(map(tuple, edges))
    return all((b, a) in fwd for a, b in fwd)


def make_mesh(vertices: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    """Build a mesh, validating indices and setting the watertight flag."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise MeshError("face index out of range")
    return TriangleMesh(vertices, faces, watertight=is_closed(faces))


def face_normals(mesh: TriangleMesh, normalized: bool = True) -> np.ndarray:
    tri = mesh.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if normalized:
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.maximum(norm, 1e-300)
    return n


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, normalized=False), axis=1)


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed volume via the divergence theorem (positive for outward orientation)."""
    tri = mesh.triangles()
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def bounding_box(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    return mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)


def normalize_to_unit_cube(mesh: TriangleMesh) -> tuple[TriangleMesh, NormalizationTransform]:
    """Center the mesh and scale its longest extent to 1 (so it fits [-0.5, 0.5]^3)."""
    lo, hi = bounding_box(mesh)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshError("mesh has zero extent")
    center = (lo + hi) / 2.0
    tf = NormalizationTransform(tuple(center.tolist()), 1.0 / extent)
    out = TriangleMesh(tf.apply(mesh.vertices), mesh.faces.copy(), mesh.watertight)
    return out, tf


def winding_numbers(mesh: TriangleMesh, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Generalized winding number of each point: ~1 inside, ~0 outside.

    Sum of signed solid angles over faces (van Oosterom-Strackee), divided by
    4*pi.  Exact up to rounding for closed meshes, which makes the 0.5
    threshold extremely stable away from the surface.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    out = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        a = tri[None, :, 0] - p[:, None]  # (n, F, 3)
        b = tri[None, :, 1] - p[:, None]
        c = tri[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        numer = np.einsum("nfi,nfi->nf", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("nfi,nfi->nf", a, b) * lc
            + np.einsum("nfi,nfi->nf", b, c) * la
            + np.einsum("nfi,nfi->nf", c, a) * lb
        )
        omega = 2.0 * np.arctan2(numer, denom)
        out[start : start + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
    return out


def occupancy_query(
    mesh: TriangleMesh, points: np.ndarray, check_watertight: bool = True
) -> np.ndarray:
    """Binary occupancy of each point: 1 strictly inside, 0 outside.

    Points within rounding distance of the surface land on either side; that
    tie is acceptable downstream (soft classification targets).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise ValueError("query points must be finite")
    if check_watertight and not mesh.watertight:
        open_e = boundary_edges(mesh.faces)
        shown = ", ".join(f"({a},{b})" for a, b in open_e[:10])
        more = "" if len(open_e) <= 10 else f" (+{len(open_e) - 10} more)"
        raise MeshError(f"mesh is not watertight; open edges: {shown}{more}")
    return (winding_numbers(mesh, points) > 0.5).astype(np.uint8)


def sample_surface_points(
    mesh: TriangleMesh, count: int, seed: int | np.random.Generator = 0
) -> np.ndarray:
    """Area-weighted uniform samples on the surface, deterministic under seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has zero surface area")
    idx = rng.choice(len(areas), size=count, p=areas / total)
    tri = mesh.triangles()[idx]
    # sqrt trick gives uniform barycentric coordinates
    r1 = np.sqrt(rng.random(count))[:, None]
    r2 = rng.random(count)[:, None]
    return (1 - r1) * tri[:, 0] + r1 * (1 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]


def sample_query_points(
    mesh: TriangleMesh,
    count: int,
    mix: float = 0.5,
    band_sigma: float | None = None,
    seed: int = 0,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> OccupancySample:
    """Query positions for occupancy training targets.

    A ``mix`` fraction is drawn in a Gaussian band around the surface (surface
    point plus isotropic noise, sigma defaulting to 5% of the bbox diagonal),
    the rest uniform in ``bounds`` (the mesh bounding box when omitted).
    Labels come from :func:`occupancy_query`.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must be in [0, 1]")
    rng = np.random.default_rng(seed)
    lo, hi = bounds if bounds is not None else bounding_box(mesh)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if band_sigma is None:
        blo, bhi = bounding_box(mesh)
        band_sigma = 0.05 * float(np.linalg.norm(bhi - blo))
    n_band = int(round(count * mix))
    parts = []
    if n_band:
        on_surface = sample_surface_points(mesh, n_band, rng)
        parts.append(on_surface + rng.normal(0.0, band_sigma, size=(n_band, 3)))
    if count - n_band:
        parts.append(rng.uniform(lo, hi, size=(count - n_band, 3)))
    positions = np.concatenate(parts, axis=0)
    return OccupancySample(positions, occupancy_query(mesh, positions))


def point_mesh_distance(points: np.ndarray, mesh: TriangleMesh, chunk: int = 512) -> np.ndarray:
    """Unsigned distance of each point to the closest triangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e0 = b - a
    e1 = c - a
    nrm = np.cross(e0, e1)
    nn = np.einsum("fi,fi->f", nrm, nrm)
    dot00 = np.einsum("fi,fi->f", e0, e0)
    dot01 = np.einsum("fi,fi->f", e0, e1)
    dot11 = np.einsum("fi,fi->f", e1, e1)
    denom = dot00 * dot11 - dot01 * dot01
    valid = denom > 1e-300

    out = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        w = p[:, None] - a[None]  # (n, F, 3)
        d0w = np.einsum("nfi,fi->nf", w, e0)
        d1w = np.einsum("nfi,fi->nf", w, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (dot11 * d0w - dot01 * d1w) / denom
            t = (dot00 * d1w - dot01 * d0w) / denom
        inside = valid & (s >= 0) & (t >= 0) & (s + t <= 1)
        plane_dist = np.abs(np.einsum("nfi,fi->nf", w, nrm)) / np.sqrt(np.maximum(nn, 1e-300))
        d_edges = np.minimum(
            _point_segment_distance(p, a, b),
            np.minimum(_point_segment_distance(p, b, c), _point_segment_distance(p, a, c)),
        )
        d = np.where(inside, plane_dist, d_edges)
        out[start : start + chunk] = d.min(axis=1)
    return out


def _point_segment_distance(p: np.ndarray, s0: np.ndarray, s1: np.ndarray) -> np.ndarray:
    """Distances (n, F) from points (n, 3) to segments (F, 3)-(F, 3)."""
    d = s1 - s0
    dd = np.einsum("fi,fi->f", d, d)
    w = p[:, None] - s0[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("nfi,fi->nf", w, d) / np.where(dd > 0, dd, 1.0)
    t = np.clip(np.where(dd[None] > 0, t, 0.0), 0.0, 1.0)
    closest = s0[None] + t[..., None] * d[None]
    return np.linalg.norm(p[:, None] - closest, axis=2)


def save_obj(mesh: TriangleMesh, path) -> None:
    """ASCII OBJ with full float64 round-trip precision; byte-deterministic."""
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.faces]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    """Parse v/f lines; polygon faces are fan-triangulated."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return make_mesh(
        np.array(vertices, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
    )

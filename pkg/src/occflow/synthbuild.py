"""Procedural building dataset: mesh generation, scan simulation, on-disk format.

Stands in for large aerial-survey building datasets at desk scale.  Buildings
are watertight prisms with flat, gabled, or hipped roofs over rectangular or
L-shaped footprints; partial clouds mimic airborne scans (dense roofs, sparse
or missing facades, noise along normals).
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import TriangleMesh, MeshError, NormalizationTransform, OccupancySample

log = logging.getLogger(__name__)

ROOF_KINDS = ("flat", "gabled", "hipped")
FOOTPRINT_KINDS = ("rect", "l")


@dataclass(frozen=True)
class BuildingSpec:
    """Parameters of one procedural building (sizes in meters)."""

    width: float = 10.0
    depth: float = 8.0
    height: float = 6.0
    roof: str = "gabled"
    pitch_deg: float = 35.0
    footprint: str = "rect"
    # notch carved from the (+x, +y) corner, as fractions of width/depth
    notch_frac: tuple[float, float] = (0.4, 0.4)
    seed: int = 0

    def validate(self) -> None:
        if min(self.width, self.depth, self.height) <= 0:
            raise ValueError("width, depth, height must be strictly positive")
        if self.roof not in ROOF_KINDS:
            raise ValueError(f"roof must be one of {ROOF_KINDS}")
        if self.footprint not in FOOTPRINT_KINDS:
            raise ValueError(f"footprint must be one of {FOOTPRINT_KINDS}")
        if self.roof != "flat" and not 0 < self.pitch_deg < 80:
            raise ValueError("pitch_deg must be in (0, 80)")
        if self.footprint == "l":
            fw, fd = self.notch_frac
            if not (0 < fw < 1 and 0 < fd < 1):
                raise ValueError("notch fractions must be in (0, 1)")
            if self.roof != "flat":
                raise ValueError("pitched roofs are only generated on rectangular footprints")


def _prism(polygon: np.ndarray, tri2d: list[tuple[int, int, int]], h: float) -> TriangleMesh:
    """Extrude a CCW simple polygon (given with a triangulation) to height h."""
    n = len(polygon)
    bottom = np.column_stack([polygon, np.zeros(n)])
    top = np.column_stack([polygon, np.full(n, h)])
    vertices = np.concatenate([bottom, top])
    faces: list[list[int]] = []
    for a, b, c in tri2d:
        faces.append([a, c, b])  # bottom, outward -z
        faces.append([n + a, n + b, n + c])  # top, outward +z
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n + j], [i, n + j, n + i]]
    return geometry.make_mesh(vertices, faces)


def _rect_polygon(w: float, d: float) -> np.ndarray:
    return np.array([[-w / 2, -d / 2], [w / 2, -d / 2], [w / 2, d / 2], [-w / 2, d / 2]])


def _gabled(w: float, d: float, h: float, pitch_deg: float) -> TriangleMesh:
    # ridge runs along the longer footprint axis
    if d > w:
        m = _gabled(d, w, h, pitch_deg)
        swapped = m.vertices[:, [1, 0, 2]]
        return geometry.make_mesh(swapped, m.faces[:, ::-1])
    ridge_h = h + (d / 2) * np.tan(np.radians(pitch_deg))
    b = np.column_stack([_rect_polygon(w, d), np.zeros(4)])
    t = np.column_stack([_rect_polygon(w, d), np.full(4, h)])
    r = np.array([[-w / 2, 0.0, ridge_h], [w / 2, 0.0, ridge_h]])
    v = np.concatenate([b, t, r])  # 0-3 bottom, 4-7 eave, 8-9 ridge
    faces = [
        [0, 2, 1], [0, 3, 2],  # bottom
        [0, 1, 5], [0, 5, 4],  # wall y=-d/2
        [2, 3, 7], [2, 7, 6],  # wall y=+d/2
        [4, 5, 9], [4, 9, 8],  # roof y<0 side
        [6, 7, 8], [6, 8, 9],  # roof y>0 side
        [1, 2, 6], [1, 6, 9], [1, 9, 5],  # gable end x=+w/2
        [3, 0, 4], [3, 4, 8], [3, 8, 7],  # gable end x=-w/2
    ]
    return geometry.make_mesh(v, faces)


def _hipped(w: float, d: float, h: float, pitch_deg: float) -> TriangleMesh:
    if d > w:
        m = _hipped(d, w, h, pitch_deg)
        swapped = m.vertices[:, [1, 0, 2]]
        return geometry.make_mesh(swapped, m.faces[:, ::-1])
    inset = d / 2  # equal pitch on side and end planes
    ridge_h = h + (d / 2) * np.tan(np.radians(pitch_deg))
    b = np.column_stack([_rect_polygon(w, d), np.zeros(4)])
    t = np.column_stack([_rect_polygon(w, d), np.full(4, h)])
    walls = [
        [0, 2, 1], [0, 3, 2],
        [0, 1, 5], [0, 5, 4],
        [1, 2, 6], [1, 6, 5],
        [2, 3, 7], [2, 7, 6],
        [3, 0, 4], [3, 4, 7],
    ]
    if w - 2 * inset <= 1e-12:  # square footprint degenerates to a pyramid
        apex = np.array([[0.0, 0.0, ridge_h]])
        v = np.concatenate([b, t, apex])
        roof = [[4, 5, 8], [5, 6, 8], [6, 7, 8], [7, 4, 8]]
    else:
        r = np.array([[-w / 2 + inset, 0.0, ridge_h], [w / 2 - inset, 0.0, ridge_h]])
        v = np.concatenate([b, t, r])  # ridge 8 (x<0), 9 (x>0)
        roof = [
            [4, 5, 9], [4, 9, 8],  # side y<0
            [6, 7, 8], [6, 8, 9],  # side y>0
            [5, 6, 9],  # hip end x=+w/2
            [7, 4, 8],  # hip end x=-w/2
        ]
    return geometry.make_mesh(v, walls + roof)


def _l_prism(w: float, d: float, h: float, notch_frac: tuple[float, float]) -> TriangleMesh:
    nw, nd = w * notch_frac[0], d * notch_frac[1]
    poly = np.array(
        [
            [0.0, 0.0],
            [w, 0.0],
            [w, d - nd],
            [w - nw, d - nd],
            [w - nw, d],
            [0.0, d],
        ]
    ) - np.array([w / 2, d / 2])
    # fan from the reflex corner (index 3) triangulates the L exactly
    tris = [(3, 0, 1), (3, 1, 2), (3, 4, 5), (3, 5, 0)]
    return _prism(poly, tris, h)


def generate_building(spec: BuildingSpec) -> TriangleMesh:
    """Watertight mesh for a spec; deterministic (the seed is dataset identity)."""
    spec.validate()
    if spec.footprint == "l":
        mesh = _l_prism(spec.width, spec.depth, spec.height, spec.notch_frac)
    elif spec.roof == "flat":
        mesh = _prism(_rect_polygon(spec.width, spec.depth), [(0, 1, 2), (0, 2, 3)], spec.height)
    elif spec.roof == "gabled":
        mesh = _gabled(spec.width, spec.depth, spec.height, spec.pitch_deg)
    else:
        mesh = _hipped(spec.width, spec.depth, spec.height, spec.pitch_deg)
    if not mesh.watertight or geometry.mesh_volume(mesh) <= 0:
        raise MeshError(f"generated mesh is not a closed outward-oriented solid: {spec}")
    return mesh


def sample_specs(
    count: int,
    seed: int = 0,
    roof_mix: tuple[float, float, float] = (0.25, 0.5, 0.25),
    l_fraction: float = 0.25,
) -> list[BuildingSpec]:
    """Draw a deterministic distribution of building specs."""
    rng = np.random.default_rng(seed)
    probs = np.asarray(roof_mix, dtype=np.float64)
    probs = probs / probs.sum()
    specs = []
    for i in range(count):
        w = rng.uniform(6.0, 20.0)
        d = rng.uniform(6.0, 20.0)
        h = rng.uniform(3.0, 12.0)
        if rng.random() < l_fraction:
            spec = BuildingSpec(
                width=w, depth=d, height=h, roof="flat", footprint="l",
                notch_frac=(rng.uniform(0.25, 0.6), rng.uniform(0.25, 0.6)), seed=i,
            )
        else:
            roof = ROOF_KINDS[rng.choice(3, p=probs)]
            spec = BuildingSpec(
                width=w, depth=d, height=h, roof=roof,
                pitch_deg=rng.uniform(20.0, 50.0), seed=i,
            )
        specs.append(spec)
    return specs


@dataclass(frozen=True)
class SensorMeta:
    """Airborne-style scan parameters (lengths in normalized units)."""

    n_points: int = 320
    noise_sigma: float = 0.005
    facade_dropout: float = 0.5
    facade_density: float = 0.25
    density_gradient: float = 0.3  # relative density loss across the footprint along +x
    min_points: int = 256
    max_retries: int = 8


@dataclass
class PartialCloud:
    """Noisy incomplete scan of a building surface."""

    points: np.ndarray  # (M, 3)
    meta: dict

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


def simulate_partial_scan(mesh: TriangleMesh, sensor: SensorMeta, seed: int = 0) -> PartialCloud:
    """Simulate an airborne scan of a watertight mesh.

    Sampling density per face is proportional to area times the upward normal
    component; facades (near-vertical faces) get a small floor density and are
    dropped entirely with probability ``facade_dropout``.  Ground-facing faces
    are never seen.  Gaussian noise (clipped at 3 sigma) is added along face
    normals, and an optional linear density gradient thins points along +x.
    """
    if not mesh.watertight:
        raise MeshError("scan simulation requires a watertight mesh")
    rng = np.random.default_rng(seed)
    normals = geometry.face_normals(mesh)
    areas = geometry.face_areas(mesh)
    nz = normals[:, 2]
    is_facade = np.abs(nz) < 0.5
    lo, hi = geometry.bounding_box(mesh)
    span = max(hi[0] - lo[0], 1e-12)

    for _ in range(sensor.max_retries):
        keep_facade = rng.random(len(areas)) >= sensor.facade_dropout
        weights = areas * (np.maximum(nz, 0.0) + sensor.facade_density * is_facade * keep_facade)
        total = weights.sum()
        if total <= 0:
            continue
        # oversample, thin by the density gradient, then truncate
        n_draw = max(4 * sensor.n_points, 64)
        idx = rng.choice(len(areas), size=n_draw, p=weights / total)
        tri = mesh.triangles()[idx]
        r1 = np.sqrt(rng.random(n_draw))[:, None]
        r2 = rng.random(n_draw)[:, None]
        pts = (1 - r1) * tri[:, 0] + r1 * (1 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]
        keep_p = 1.0 - sensor.density_gradient * (pts[:, 0] - lo[0]) / span
        kept = rng.random(n_draw) < keep_p
        pts = pts[kept]
        face_n = normals[idx][kept]
        if len(pts) < max(sensor.n_points, sensor.min_points):
            continue
        pts = pts[: sensor.n_points]
        face_n = face_n[: sensor.n_points]
        if sensor.noise_sigma > 0:
            offsets = rng.normal(0.0, sensor.noise_sigma, size=len(pts))
            offsets = np.clip(offsets, -3 * sensor.noise_sigma, 3 * sensor.noise_sigma)
            pts = pts + offsets[:, None] * face_n
        meta = asdict(sensor) | {"seed": int(seed)}
        return PartialCloud(pts, meta)
    raise RuntimeError(
        f"scan simulation produced fewer than {sensor.min_points} points "
        f"after {sensor.max_retries} retries"
    )


# ---------------------------------------------------------------------------
# on-disk format: flat binary arrays with a one-line text header, JSONL manifest

_DTYPES = {"f4": np.float32, "u1": np.uint8}


def write_array(path, array: np.ndarray, dtype: str) -> None:
    """Little-endian flat binary with header ``OFBIN <dtype> <count> <dims> <crc32>``."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    arr = np.ascontiguousarray(array, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    if arr.ndim == 1:
        arr = arr[:, None]
    raw = arr.tobytes()
    header = f"OFBIN {dtype} {arr.shape[0]} {arr.shape[1]} {zlib.crc32(raw):08x}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(raw)


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        raw = fh.read()
    if len(header) != 5 or header[0] != "OFBIN" or header[1] not in _DTYPES:
        raise ValueError(f"{path}: not an OFBIN array file")
    dtype, count, dims, crc = header[1], int(header[2]), int(header[3]), header[4]
    if f"{zlib.crc32(raw):08x}" != crc:
        raise ValueError(f"{path}: checksum mismatch")
    arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    arr = arr.reshape(count, dims)
    return arr[:, 0].copy() if dims == 1 else arr.astype(arr.dtype.newbyteorder("="))


@dataclass
class DatasetRecord:
    """One building: mesh, occupancy sample, partial cloud(s), split tag."""

    id: str
    split: str
    mesh: str  # paths relative to the manifest directory
    queries: str
    labels: str
    clouds: list[str]
    transform: NormalizationTransform
    root: Path | None = None

    def path(self, rel: str) -> Path:
        if self.root is None:
            raise ValueError("record is not attached to a dataset root")
        return self.root / rel

    def load_mesh(self) -> TriangleMesh:
        return geometry.load_obj(self.path(self.mesh))

    def load_sample(self) -> OccupancySample:
        return OccupancySample(read_array(self.path(self.queries)), read_array(self.path(self.labels)))

    def load_cloud(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """One partial cloud; chosen uniformly at random when several exist."""
        if len(self.clouds) == 1 or rng is None:
            rel = self.clouds[0]
        else:
            rel = self.clouds[int(rng.integers(len(self.clouds)))]
        return read_array(self.path(rel)).astype(np.float64)

    def to_json(self) -> str:
        doc = {
            "id": self.id,
            "split": self.split,
            "mesh": self.mesh,
            "queries": self.queries,
            "labels": self.labels,
            "clouds": self.clouds,
            "transform": {"center": list(self.transform.center), "scale": self.transform.scale},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str, root: Path | None = None) -> "DatasetRecord":
        doc = json.loads(line)
        tf = NormalizationTransform(tuple(doc["transform"]["center"]), doc["transform"]["scale"])
        return cls(doc["id"], doc["split"], doc["mesh"], doc["queries"], doc["labels"],
                   list(doc["clouds"]), tf, root)


def write_manifest(records: list[DatasetRecord], out_dir: Path) -> Path:
    path = Path(out_dir) / "manifest.jsonl"
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def load_manifest(out_dir) -> list[DatasetRecord]:
    root = Path(out_dir)
    records = []
    with open(root / "manifest.jsonl", "r", encoding="ascii") as fh:
        for line in fh:
            if line.strip():
                records.append(DatasetRecord.from_json(line, root))
    for rec in records:
        for rel in [rec.mesh, rec.queries, rec.labels, *rec.clouds]:
            if not rec.path(rel).exists():
                raise FileNotFoundError(f"record {rec.id}: missing file {rel}")
    return records


def _assign_splits(n: int, ratios: tuple[float, float, float], rng: np.random.Generator) -> list[str]:
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    tags = ["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test
    order = rng.permutation(n)
    out = [""] * n
    for slot, rec_idx in enumerate(order):
        out[rec_idx] = tags[slot]
    return out


def _store_record(
    rec_id: str,
    mesh_norm: TriangleMesh,
    tf: NormalizationTransform,
    clouds: list[np.ndarray],
    split: str,
    out_dir: Path,
    query_count: int,
    query_mix: float,
    query_seed: int,
) -> DatasetRecord:
    """Normalize-and-write one record.  Labels are recomputed on the float32
    positions actually stored so that the on-disk sample round-trips exactly."""
    rec_dir = out_dir / rec_id
    rec_dir.mkdir(parents=True, exist_ok=True)
    geometry.save_obj(mesh_norm, rec_dir / "mesh.obj")
    mesh_stored = geometry.load_obj(rec_dir / "mesh.obj")

    sample = geometry.sample_query_points(
        mesh_stored, query_count, mix=query_mix, seed=query_seed, bounds=geometry.UNIT_BOX
    )
    positions32 = sample.positions.astype(np.float32)
    labels = geometry.occupancy_query(mesh_stored, positions32.astype(np.float64))
    write_array(rec_dir / "queries.bin", positions32, "f4")
    write_array(rec_dir / "labels.bin", labels, "u1")

    cloud_rels = []
    for k, cloud in enumerate(clouds):
        rel = f"{rec_id}/cloud_{k:02d}.bin"
        write_array(out_dir / rel, cloud.astype(np.float32), "f4")
        cloud_rels.append(rel)

    return DatasetRecord(
        id=rec_id, split=split,
        mesh=f"{rec_id}/mesh.obj", queries=f"{rec_id}/queries.bin", labels=f"{rec_id}/labels.bin",
        clouds=cloud_rels, transform=tf, root=out_dir,
    )


def build_dataset(
    count: int,
    out_dir,
    seed: int = 0,
    sensor: SensorMeta = SensorMeta(),
    roof_mix: tuple[float, float, float] = (0.25, 0.5, 0.25),
    l_fraction: float = 0.25,
    query_count: int = 1000,
    query_mix: float = 0.5,
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[DatasetRecord]:
    """Generate a procedural dataset; bit-reproducible under fixed seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = sample_specs(count, seed=seed, roof_mix=roof_mix, l_fraction=l_fraction)
    split_tags = _assign_splits(count, splits, np.random.default_rng(seed + 1))
    records = []
    for i, spec in enumerate(specs):
        rec_id = f"building_{i:04d}"
        try:
            mesh = generate_building(spec)
            mesh_norm, tf = geometry.normalize_to_unit_cube(mesh)
            child = np.random.SeedSequence([seed, i])
            scan_seed, query_seed = (int(s.generate_state(1)[0]) for s in child.spawn(2))
            cloud = simulate_partial_scan(mesh_norm, sensor, seed=scan_seed)
            rec = _store_record(
                rec_id, mesh_norm, tf, [cloud.points], split_tags[i], out_dir,
                query_count, query_mix, query_seed,
            )
        except Exception as exc:
            raise RuntimeError(f"failed to build record {rec_id}") from exc
        records.append(rec)
    write_manifest(records, out_dir)
    return records


def _load_cloud_file(path: Path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=np.float64, usecols=(0, 1, 2), ndmin=2)
    if pts.size == 0:
        raise ValueError(f"{path}: empty cloud")
    return pts


def ingest_external(
    mesh_dir,
    cloud_dir,
    out_dir,
    seed: int = 0,
    query_count: int = 1000,
    query_mix: float = 0.5,
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[list[DatasetRecord], dict]:
    """Ingest external mesh (.obj) / cloud (.xyz) pairs matched by file stem.

    A mesh ``name.obj`` pairs with ``name.xyz`` plus any ``name.<k>.xyz``
    variants; all matched clouds are stored and one is picked at random per
    training access.  Pairs are normalized jointly by the mesh bounding box.
    Non-watertight meshes are skipped with a warning.
    """
    mesh_dir, cloud_dir, out_dir = Path(mesh_dir), Path(cloud_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meshes = {p.stem: p for p in sorted(mesh_dir.glob("*.obj"))}
    clouds: dict[str, list[Path]] = {}
    for p in sorted(cloud_dir.glob("*.xyz")):
        stem = p.stem
        base, dot, suffix = stem.rpartition(".")
        if dot and suffix.isdigit():
            stem = base
        clouds.setdefault(stem, []).append(p)

    matched = sorted(set(meshes) & set(clouds))
    summary = {
        "matched": len(matched),
        "mesh_only": sorted(set(meshes) - set(clouds)),
        "cloud_only": sorted(set(clouds) - set(meshes)),
        "skipped_non_watertight": 0,
    }
    if not matched:
        raise ValueError("no mesh/cloud pairs share a file stem")

    usable = []
    for stem in matched:
        mesh = geometry.load_obj(meshes[stem])
        if not mesh.watertight:
            log.warning("skipping %s: mesh is not watertight", stem)
            summary["skipped_non_watertight"] += 1
            continue
        usable.append((stem, mesh))

    split_tags = _assign_splits(len(usable), splits, np.random.default_rng(seed + 1))
    records = []
    for i, (stem, mesh) in enumerate(usable):
        mesh_norm, tf = geometry.normalize_to_unit_cube(mesh)
        cloud_arrays = [tf.apply(_load_cloud_file(p)) for p in clouds[stem]]
        query_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        rec = _store_record(
            stem, mesh_norm, tf, cloud_arrays, split_tags[i], out_dir,
            query_count, query_mix, query_seed,
        )
        records.append(rec)
    write_manifest(records, out_dir)
    for name in summary["mesh_only"]:
        log.warning("unmatched mesh (no cloud): %s", name)
    for name in summary["cloud_only"]:
        log.warning("unmatched cloud (no mesh): %s", name)
    return records, summary

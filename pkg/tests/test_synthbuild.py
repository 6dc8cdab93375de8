import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from occflow import geometry, synthbuild
from occflow.synthbuild import BuildingSpec, SensorMeta


def obj_bytes(spec):
    mesh = synthbuild.generate_building(spec)
    import io, tempfile, os
    path = tempfile.mktemp(suffix=".obj")
    geometry.save_obj(mesh, path)
    data = Path(path).read_bytes()
    os.unlink(path)
    return data


def test_flat_roof_unit_cube_volume():
    mesh = synthbuild.generate_building(BuildingSpec(1.0, 1.0, 1.0, roof="flat"))
    assert geometry.mesh_volume(mesh) == pytest.approx(1.0, abs=1e-12)
    assert mesh.watertight


@pytest.mark.parametrize("w,d", [(12.0, 8.0), (8.0, 12.0)])
def test_gabled_volume_closed_form(w, d):
    mesh = synthbuild.generate_building(
        BuildingSpec(width=w, depth=d, height=5.0, roof="gabled", pitch_deg=45.0)
    )
    short, long_ = min(w, d), max(w, d)
    expect = w * d * 5.0 + short * long_ * (short / 2) / 2
    assert geometry.mesh_volume(mesh) == pytest.approx(expect, abs=1e-9)


def test_hipped_volume_closed_form():
    w, d, h, pitch = 12.0, 8.0, 5.0, 30.0
    mesh = synthbuild.generate_building(
        BuildingSpec(width=w, depth=d, height=h, roof="hipped", pitch_deg=pitch)
    )
    ridge_h = (d / 2) * np.tan(np.radians(pitch))
    expect = w * d * h + ridge_h * d * (w / 2 - d / 6)
    assert geometry.mesh_volume(mesh) == pytest.approx(expect, abs=1e-9)


def test_l_footprint_volume():
    spec = BuildingSpec(width=10.0, depth=8.0, height=4.0, roof="flat",
                        footprint="l", notch_frac=(0.4, 0.5))
    mesh = synthbuild.generate_building(spec)
    assert geometry.mesh_volume(mesh) == pytest.approx((10 * 8 - 4 * 4) * 4, abs=1e-9)
    assert mesh.watertight


def test_generation_is_byte_deterministic():
    spec = BuildingSpec(width=9.5, depth=7.25, height=6.0, roof="hipped", pitch_deg=33.0)
    assert obj_bytes(spec) == obj_bytes(spec)


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        synthbuild.generate_building(BuildingSpec(width=-1.0))
    with pytest.raises(ValueError):
        synthbuild.generate_building(BuildingSpec(roof="dome"))
    with pytest.raises(ValueError):
        synthbuild.generate_building(BuildingSpec(roof="gabled", footprint="l"))


def test_scan_facade_dropout_one_keeps_only_roof(cube_mesh):
    cloud = synthbuild.simulate_partial_scan(
        cube_mesh, SensorMeta(noise_sigma=0.0, facade_dropout=1.0), seed=1
    )
    assert np.allclose(cloud.points[:, 2], 0.5, atol=1e-12)


def test_scan_zero_noise_points_on_surface(gabled_normalized):
    cloud = synthbuild.simulate_partial_scan(
        gabled_normalized, SensorMeta(noise_sigma=0.0, facade_dropout=0.0), seed=2
    )
    assert geometry.point_mesh_distance(cloud.points, gabled_normalized).max() < 1e-9


def test_scan_noise_statistics(gabled_normalized):
    sensor = SensorMeta(noise_sigma=0.01)
    cloud = synthbuild.simulate_partial_scan(gabled_normalized, sensor, seed=3)
    d = geometry.point_mesh_distance(cloud.points, gabled_normalized)
    # half-normal mean of |N(0, sigma)| with slack; clipping only shrinks it
    assert d.mean() <= sensor.noise_sigma * np.sqrt(2 / np.pi) * 1.1
    assert d.max() <= 3 * sensor.noise_sigma + 1e-9
    assert len(cloud) >= sensor.min_points


def test_scan_deterministic(gabled_normalized):
    a = synthbuild.simulate_partial_scan(gabled_normalized, SensorMeta(), seed=9)
    b = synthbuild.simulate_partial_scan(gabled_normalized, SensorMeta(), seed=9)
    assert np.array_equal(a.points, b.points)


def test_scan_impossible_sensor_errors(cube_mesh):
    # gradient thinning keeps almost nothing, far below the minimum
    sensor = SensorMeta(n_points=2048, min_points=2048, facade_dropout=1.0,
                        density_gradient=50.0, max_retries=2)
    with pytest.raises(RuntimeError, match="retries"):
        synthbuild.simulate_partial_scan(cube_mesh, sensor, seed=0)


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_counts_and_reproducibility(tmp_path):
    recs1 = synthbuild.build_dataset(10, tmp_path / "a", seed=3)
    recs2 = synthbuild.build_dataset(10, tmp_path / "b", seed=3)
    assert len(recs1) == 10
    manifest = (tmp_path / "a" / "manifest.jsonl").read_text().strip().splitlines()
    assert len(manifest) == 10
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_split_ratios_partition():
    rng = np.random.default_rng(0)
    tags = synthbuild._assign_splits(100, (0.8, 0.1, 0.1), rng)
    assert tags.count("train") == 80
    assert tags.count("val") == 10
    assert tags.count("test") == 10


def test_records_round_trip_occupancy(small_dataset):
    for rec in small_dataset[:4]:
        mesh = rec.load_mesh()
        sample = rec.load_sample()
        assert len(sample) == 1000
        relabeled = geometry.occupancy_query(mesh, sample.positions)
        assert np.array_equal(relabeled, sample.values)


def test_cloud_points_stay_near_box(small_dataset):
    for rec in small_dataset:
        pts = rec.load_cloud()
        sigma = SensorMeta().noise_sigma
        assert (np.abs(pts) <= 0.5 + 3 * sigma).all()


def test_manifest_load_validates_files(tmp_path, small_dataset):
    root = small_dataset[0].root
    records = synthbuild.load_manifest(root)
    assert [r.id for r in records] == [r.id for r in small_dataset]
    missing = tmp_path / "broken"
    missing.mkdir()
    (missing / "manifest.jsonl").write_text(records[0].to_json() + "\n")
    with pytest.raises(FileNotFoundError):
        synthbuild.load_manifest(missing)


def test_array_file_checksum(tmp_path):
    path = tmp_path / "x.bin"
    arr = np.arange(12, dtype=np.float32).reshape(4, 3)
    synthbuild.write_array(path, arr, "f4")
    assert np.array_equal(synthbuild.read_array(path), arr)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        synthbuild.read_array(path)


# --- external ingestion -----------------------------------------------------


def _write_external_pair(mesh_dir, cloud_dir, stem, mesh, n_clouds=1):
    geometry.save_obj(mesh, mesh_dir / f"{stem}.obj")
    rng = np.random.default_rng(hash(stem) % 2**32)
    for k in range(n_clouds):
        pts = geometry.sample_surface_points(mesh, 300, seed=k)
        name = f"{stem}.xyz" if k == 0 else f"{stem}.{k}.xyz"
        np.savetxt(cloud_dir / name, pts)


def test_ingest_external_pairs_and_normalization(tmp_path, gabled_mesh):
    mesh_dir = tmp_path / "meshes"; mesh_dir.mkdir()
    cloud_dir = tmp_path / "clouds"; cloud_dir.mkdir()
    _write_external_pair(mesh_dir, cloud_dir, "house", gabled_mesh)
    records, summary = synthbuild.ingest_external(mesh_dir, cloud_dir, tmp_path / "out")
    assert len(records) == 1 and summary["matched"] == 1
    cloud = records[0].load_cloud()
    assert (np.abs(cloud) <= 0.5 + 1e-6).all()


def test_ingest_two_clouds_selected_uniformly(tmp_path, gabled_mesh):
    mesh_dir = tmp_path / "meshes"; mesh_dir.mkdir()
    cloud_dir = tmp_path / "clouds"; cloud_dir.mkdir()
    _write_external_pair(mesh_dir, cloud_dir, "twin", gabled_mesh, n_clouds=2)
    records, _ = synthbuild.ingest_external(mesh_dir, cloud_dir, tmp_path / "out")
    rec = records[0]
    assert len(rec.clouds) == 2
    rng = np.random.default_rng(0)
    first = synthbuild.read_array(rec.path(rec.clouds[0]))
    n = 10_000
    hits = sum(
        np.array_equal(rec.load_cloud(rng).astype(np.float32), first) for _ in range(n)
    )
    sigma = np.sqrt(n * 0.25)
    assert abs(hits - n / 2) < 3 * sigma


def test_ingest_reports_unmatched_and_skips_open_meshes(tmp_path, gabled_mesh, cube_mesh):
    mesh_dir = tmp_path / "meshes"; mesh_dir.mkdir()
    cloud_dir = tmp_path / "clouds"; cloud_dir.mkdir()
    _write_external_pair(mesh_dir, cloud_dir, "ok", gabled_mesh)
    geometry.save_obj(gabled_mesh, mesh_dir / "lonely.obj")  # mesh-only stem
    open_mesh = geometry.make_mesh(cube_mesh.vertices, cube_mesh.faces[:-1])
    _write_external_pair(mesh_dir, cloud_dir, "open", open_mesh)
    records, summary = synthbuild.ingest_external(mesh_dir, cloud_dir, tmp_path / "out")
    assert [r.id for r in records] == ["ok"]
    assert summary["mesh_only"] == ["lonely"]
    assert summary["skipped_non_watertight"] == 1


def test_ingest_empty_intersection_errors(tmp_path, gabled_mesh):
    mesh_dir = tmp_path / "meshes"; mesh_dir.mkdir()
    cloud_dir = tmp_path / "clouds"; cloud_dir.mkdir()
    geometry.save_obj(gabled_mesh, mesh_dir / "a.obj")
    np.savetxt(cloud_dir / "b.xyz", np.zeros((10, 3)))
    with pytest.raises(ValueError, match="stem"):
        synthbuild.ingest_external(mesh_dir, cloud_dir, tmp_path / "out")

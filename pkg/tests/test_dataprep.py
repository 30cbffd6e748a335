"""Dataset prep: normalization, scene box, split, manifest round-trips."""

import json

import numpy as np
import pytest
from PIL import Image

from bathyfield.dataprep import (
    Camera,
    DatasetBundle,
    MaskLabel,
    MaskMismatch,
    SchemaError,
    build_dataset,
    decode_mask,
    derive_scene_box,
    encode_mask,
    look_at_camera,
    normalize_scene,
    read_manifest,
    split_dataset,
    write_manifest,
)
from bathyfield.geom import SimilarityTransform, apply_similarity
from bathyfield.synthscene import SyntheticScene, Trajectory, render_dataset


def toy_rig(n_cams=6, z_lo=10.0, z_hi=20.0, radius=20.0):
    cams = []
    for k in range(n_cams):
        a = 2 * np.pi * k / n_cams
        z = z_lo + (z_hi - z_lo) * k / max(n_cams - 1, 1)
        eye = (radius * np.cos(a), radius * np.sin(a), z)
        cams.append(look_at_camera(f"cam_{k:03d}", eye, (0, 0, 0),
                                   64, 64, 55.0))
    return cams


def toy_markers(tilt=0.0, n=12):
    rng = np.random.default_rng(1)
    xy = rng.uniform(-10, 10, size=(n, 2))
    z = tilt * xy[:, 0]
    return np.column_stack([xy, z])


class TestCamera:
    def test_pixel_rays_unit_and_center(self):
        cam = look_at_camera("c", (0, 0, 5.0), (0, 0, 0), 64, 48, 60.0)
        o, d = cam.pixel_rays(np.array([31.5]), np.array([23.5]))
        np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0,
                                   atol=1e-12)
        np.testing.assert_allclose(d[0], [0, 0, -1.0], atol=1e-12)
        np.testing.assert_allclose(o[0], [0, 0, 5.0])

    def test_pixel_rays_opencv_axes(self):
        cam = look_at_camera("c", (0, 0, 5.0), (0, 0, 0), 64, 64, 60.0)
        _, d = cam.pixel_rays(np.array([60.0]), np.array([31.5]))
        # nadir fallback keeps camera x aligned with world +x
        assert d[0, 0] > 0
        assert abs(d[0, 1]) < 1e-12

    def test_elevation(self):
        nadir = look_at_camera("n", (0, 0, 5.0), (0, 0, 0), 8, 8, 50.0)
        assert abs(nadir.elevation_deg() - 90.0) < 1e-9
        oblique = look_at_camera("o", (10, 0, 10.0), (0, 0, 0), 8, 8, 50.0)
        assert abs(oblique.elevation_deg() - 45.0) < 1e-9

    def test_rotation_orthonormal(self):
        cam = look_at_camera("c", (3, -7, 9.0), (1, 2, 0), 8, 8, 50.0)
        R = cam.rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_camera_json_round_trip(self):
        cam = look_at_camera("c", (3, -7, 9.0), (1, 2, 0), 32, 16, 50.0)
        back = Camera.from_json(cam.to_json())
        np.testing.assert_allclose(back.camera_to_world,
                                   cam.camera_to_world, atol=0)
        assert (back.cam_id, back.width, back.height) == ("c", 32, 16)


class TestNormalizeScene:
    def test_identity_like_scene(self):
        cams = toy_rig(radius=0.8, z_lo=0.5, z_hi=0.9)
        markers = toy_markers() * 0.08
        norm, cams_n, markers_n, plane_n = normalize_scene(cams, markers)
        np.testing.assert_allclose(norm.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(plane_n.normal, [0, 0, 1], atol=1e-9)

    def test_everything_lands_in_unit_cube(self):
        cams = toy_rig()
        markers = toy_markers()
        norm, cams_n, markers_n, plane_n = normalize_scene(cams, markers)
        centers = np.stack([c.center for c in cams_n])
        coords = np.vstack([centers, markers_n])
        assert np.max(np.abs(coords)) <= 1.0 + 1e-12
        # scale is exactly 1/max-abs coordinate after rotation+centering
        rot = np.vstack([np.stack([c.center for c in cams]), markers]) \
            @ norm.rotation.T
        centered = rot - (np.stack([c.center for c in cams])
                          @ norm.rotation.T).mean(axis=0)
        assert abs(norm.scale - 1.0 / np.max(np.abs(centered))) < 1e-12

    def test_tilted_plane_becomes_horizontal(self):
        cams = toy_rig()
        markers = toy_markers(tilt=0.1)
        _, cams_n, _, plane_n = normalize_scene(cams, markers)
        np.testing.assert_allclose(plane_n.normal, [0, 0, 1], atol=1e-10)
        for c in cams_n:
            assert c.center[2] > plane_n.intercept

    def test_camera_rays_consistent_with_transform(self):
        cams = toy_rig()
        markers = toy_markers(tilt=0.05)
        norm, cams_n, _, _ = normalize_scene(cams, markers)
        o0, d0 = cams[2].pixel_rays(np.array([10.0]), np.array([20.0]))
        o1, d1 = cams_n[2].pixel_rays(np.array([10.0]), np.array([20.0]))
        np.testing.assert_allclose(o1, apply_similarity(norm, o0),
                                   atol=1e-12)
        np.testing.assert_allclose(d1, d0 @ norm.rotation.T, atol=1e-12)


class TestSceneBox:
    def test_arithmetic_example(self):
        mats = []
        for x, y, z in [(-1, -0.5, 0.4), (1, 0.5, 0.6), (1, -0.5, 0.5),
                        (-1, 0.5, 0.5)]:
            M = np.eye(4)
            M[:3, 3] = (x, y, z)
            mats.append(Camera(f"c{len(mats)}", 8, 8, 4, 4, 4, 4, M))
        markers = np.array([[0.1, 0.3, 0.0], [0.3, -0.3, 0.0],
                            [-0.1, 0.0, 0.0]])
        box = derive_scene_box(mats, markers)
        np.testing.assert_allclose(box.size, [2.0, 1.0, 0.6], atol=1e-12)
        np.testing.assert_allclose(box.center, [0.1, 0.0, 0.0], atol=1e-12)

    def test_center_equals_marker_centroid(self):
        cams = toy_rig()
        markers = toy_markers()
        _, cams_n, markers_n, _ = normalize_scene(cams, markers)
        box = derive_scene_box(cams_n, markers_n)
        np.testing.assert_allclose(box.center, markers_n.mean(axis=0),
                                   atol=1e-9)


class TestSplit:
    def test_survey_sized_split(self):
        train, val = split_dataset(130, 0.9, seed=0)
        assert len(train) == 117 and len(val) == 13
        assert sorted(train + val) == list(range(130))
        assert not set(train) & set(val)

    def test_small(self):
        train, val = split_dataset(10, 0.9, seed=3)
        assert len(train) == 9 and len(val) == 1

    def test_deterministic(self):
        a = split_dataset(50, 0.8, seed=7)
        b = split_dataset(50, 0.8, seed=7)
        assert a == b
        c = split_dataset(50, 0.8, seed=8)
        assert a != c

    def test_stratified_by_elevation(self):
        elev = np.array([90.0] * 30 + [30.0] * 100)
        train, val = split_dataset(130, 0.9, seed=1, elevations_deg=elev)
        nadir_train = sum(1 for i in train if i < 30)
        assert nadir_train == 27  # 90% of each band
        assert len(train) == 117

    def test_val_never_empty(self):
        train, val = split_dataset(5, 0.9, seed=0)
        assert len(val) >= 1

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            split_dataset(10, 1.0, seed=0)


class TestMaskCodec:
    def test_round_trip(self):
        labels = np.array([[0, 1, 2], [2, 1, 0]], dtype=np.uint8)
        assert (decode_mask(encode_mask(labels)) == labels).all()

    def test_threshold_rule(self):
        vals = np.array([[0, 50, 127, 129, 200, 255, 128]], dtype=np.uint8)
        got = decode_mask(vals)
        assert got[0, 0] == MaskLabel.LAND
        assert got[0, 1] == MaskLabel.LAND
        assert got[0, 2] == MaskLabel.LAND  # 127/255 < 0.5
        assert got[0, 3] == MaskLabel.WATER
        assert got[0, 4] == MaskLabel.WATER
        assert got[0, 5] == MaskLabel.WATER
        assert got[0, 6] == MaskLabel.IGNORE


@pytest.fixture(scope="module")
def synth_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    scene = SyntheticScene()
    cams = Trajectory(n_ring=12, n_nadir=2).cameras(32, 32)
    raw = render_dataset(scene, cams, root / "raw")
    bundle = build_dataset(raw / "cameras.json", raw / "markers.json",
                           raw / "images", root / "prepped",
                           masks_dir=raw / "masks", train_fraction=0.75,
                           seed=11)
    return root, bundle


class TestManifest:
    def test_round_trip(self, synth_dataset):
        root, bundle = synth_dataset
        back = read_manifest(root / "prepped")
        np.testing.assert_allclose(back.markers, bundle.markers, atol=1e-12)
        np.testing.assert_allclose(back.water_plane.normal,
                                   bundle.water_plane.normal, atol=1e-12)
        assert back.water_plane.n_water == bundle.water_plane.n_water
        np.testing.assert_allclose(back.scene_box.min, bundle.scene_box.min,
                                   atol=1e-12)
        np.testing.assert_allclose(back.norm.rotation, bundle.norm.rotation,
                                   atol=1e-12)
        assert abs(back.norm.scale - bundle.norm.scale) < 1e-12
        assert back.split_train == bundle.split_train
        assert back.split_val == bundle.split_val
        for a, b in zip(back.cameras, bundle.cameras):
            np.testing.assert_allclose(a.camera_to_world, b.camera_to_world,
                                       atol=1e-12)

    def test_bundle_invariants(self, synth_dataset):
        _, bundle = synth_dataset
        centers = np.stack([c.center for c in bundle.cameras])
        assert np.max(np.abs(centers)) <= 1.05
        np.testing.assert_allclose(bundle.scene_box.center,
                                   bundle.markers.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(bundle.water_plane.normal, [0, 0, 1],
                                   atol=1e-9)
        for c in bundle.cameras:
            assert c.center[2] > bundle.water_plane.intercept
        # markers and camera footprints inside the box
        assert bundle.scene_box.padded(1e-9).contains(bundle.markers).all()

    def test_load_image_and_mask(self, synth_dataset):
        _, bundle = synth_dataset
        img = bundle.load_image(0)
        msk = bundle.load_mask(0)
        assert img.shape == (32, 32, 3)
        assert msk.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(msk)) <= {0, 1, 2}

    def test_missing_field_schema_error(self, synth_dataset, tmp_path):
        root, _ = synth_dataset
        obj = json.loads((root / "prepped" / "manifest.json").read_text())
        del obj["water_plane"]
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "manifest.json").write_text(json.dumps(obj))
        with pytest.raises(SchemaError):
            read_manifest(bad)

    def test_mask_size_mismatch(self, synth_dataset, tmp_path):
        import shutil
        root, _ = synth_dataset
        bad = tmp_path / "bad2"
        shutil.copytree(root / "prepped", bad)
        first_mask = sorted((bad / "masks").iterdir())[0]
        Image.new("L", (8, 8)).save(first_mask)
        with pytest.raises(MaskMismatch):
            read_manifest(bad)

    def test_missing_mask_file(self, synth_dataset, tmp_path):
        import shutil
        root, _ = synth_dataset
        bad = tmp_path / "bad3"
        shutil.copytree(root / "prepped", bad)
        sorted((bad / "masks").iterdir())[0].unlink()
        with pytest.raises(MaskMismatch):
            read_manifest(bad)

    def test_write_requires_pairing(self, synth_dataset, tmp_path):
        root, bundle = synth_dataset
        import dataclasses
        clipped = dataclasses.replace(
            bundle, mask_paths=bundle.mask_paths[:-1])
        with pytest.raises(MaskMismatch):
            write_manifest(clipped, root / "prepped")
        write_manifest(bundle, root / "prepped")  # intact bundle still ok

    def test_relative_out_dir(self, synth_dataset, tmp_path, monkeypatch):
        # manifest paths must relativize even when out_dir is cwd-relative
        root, _ = synth_dataset
        monkeypatch.chdir(tmp_path)
        bundle = build_dataset(root / "raw" / "cameras.json",
                               root / "raw" / "markers.json",
                               root / "raw" / "images", "rel/out",
                               masks_dir=root / "raw" / "masks")
        back = read_manifest("rel/out")
        assert back.masks_enabled
        assert back.load_image(0).shape[2] == 3
        assert len(back.cameras) == len(bundle.cameras)

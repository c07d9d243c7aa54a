"""Synthetic generation, resampling, crop construction, and both on-disk
formats (tracklet container, KITTI scene directory)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opstrack.data import (CropConfig, SynthConfig, Tracklet, build_search_area,
                           build_template, generate_synthetic, jitter_box,
                           load_kitti_tracklet, load_tracklet, resample_indices,
                           save_tracklet, tracklet_seeds)
from opstrack.errors import (DataFormatError, EmptyRegionError,
                             InvalidArgumentError)
from opstrack.geometry import BBox3D, PointCloud, box_in_frame, points_in_box


class TestSyntheticGenerator:
    def test_zero_clutter_all_points_inside_gt(self):
        cfg = SynthConfig(num_frames=6, clutter_points=0, seed=3)
        tracklet = generate_synthetic(cfg)
        for pc, gt in tracklet.frames:
            assert points_in_box(pc, gt).all()

    def test_same_seed_bitwise_identical(self):
        cfg = SynthConfig(num_frames=5, seed=11)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        for (pa, ga), (pb, gb) in zip(a.frames, b.frames):
            assert np.array_equal(pa.points, pb.points)
            assert np.array_equal(ga.center, gb.center)

    def test_constant_velocity_closed_form(self):
        cfg = SynthConfig(num_frames=7, velocity=(1.0, 0.0, 0.0), yaw_rate=0.0,
                          seed=2)
        tracklet = generate_synthetic(cfg)
        c0 = tracklet.gt(0).center
        for t in range(7):
            np.testing.assert_allclose(tracklet.gt(t).center,
                                       c0 + np.array([t, 0.0, 0.0]), atol=0)

    def test_clutter_stays_outside_object(self):
        cfg = SynthConfig(num_frames=4, clutter_points=80, seed=9)
        tracklet = generate_synthetic(cfg)
        for pc, gt in tracklet.frames:
            inside = points_in_box(pc, gt)
            # every inside point is an object-shell point, strictly within
            shell = pc.points[inside]
            assert shell.shape[0] >= 5

    def test_tracklet_needs_two_frames(self):
        with pytest.raises(InvalidArgumentError):
            SynthConfig(num_frames=1)
        with pytest.raises(InvalidArgumentError):
            Tracklet([(PointCloud(np.zeros((1, 3))),
                       BBox3D((0, 0, 0), (1, 1, 1), 0))])

    def test_seed_spawning_is_order_independent(self):
        seeds = tracklet_seeds(123, 8)
        assert seeds == tracklet_seeds(123, 8)
        assert len(set(seeds)) == 8


class TestResampling:
    @given(st.integers(1, 200), st.integers(1, 200))
    @settings(max_examples=60, deadline=None)
    def test_exact_count_always(self, n, count):
        idx = resample_indices(n, count, np.random.default_rng(0))
        assert idx.shape == (count,)
        assert idx.min() >= 0 and idx.max() < n

    @given(st.integers(1, 50), st.integers(51, 200))
    @settings(max_examples=40, deadline=None)
    def test_duplication_preserves_distinct_set(self, n, count):
        idx = resample_indices(n, count, np.random.default_rng(1))
        assert set(idx.tolist()) == set(range(n))

    def test_discard_is_subset_without_replacement(self):
        idx = resample_indices(100, 40, np.random.default_rng(2))
        assert len(set(idx.tolist())) == 40

    def test_empty_input_rejected(self):
        with pytest.raises(InvalidArgumentError):
            resample_indices(0, 5, np.random.default_rng(0))


@pytest.fixture
def clean_tracklet():
    return generate_synthetic(SynthConfig(num_frames=5, clutter_points=0,
                                          velocity=(0.1, 0.0, 0.0), yaw_rate=0.0,
                                          seed=21))


class TestTemplate:
    def test_template_size_and_membership(self, clean_tracklet, rng):
        cfg = CropConfig(template_size=64, search_size=128)
        prev = clean_tracklet.gt(0)
        template = build_template(clean_tracklet, 1, prev, cfg, rng)
        assert len(template) == 64
        # jitter off, clutter 0: every template point is object-canonical
        gt_canon = box_in_frame(prev, prev)
        assert points_in_box(template, gt_canon).all()

    def test_occluded_previous_frame_falls_back_to_first_crop(self, clean_tracklet, rng):
        cfg = CropConfig(template_size=32, search_size=64)
        far_box = BBox3D((100.0, 100.0, 0.0), clean_tracklet.gt(1).size, 0.0)
        template = build_template(clean_tracklet, 2, far_box, cfg, rng)
        assert len(template) == 32
        gt0_canon = box_in_frame(clean_tracklet.gt(0), clean_tracklet.gt(0))
        assert points_in_box(template, gt0_canon).all()

    def test_both_crops_empty_raises(self, rng):
        empty_frames = [(PointCloud(np.full((3, 3), 50.0)),
                         BBox3D((0, 0, 0), (1, 1, 1), 0.0)) for _ in range(3)]
        tracklet = Tracklet(empty_frames)
        with pytest.raises(EmptyRegionError) as err:
            build_template(tracklet, 1, tracklet.gt(0),
                           CropConfig(template_size=8, search_size=8), rng)
        assert err.value.kind == "template"

    def test_discard_and_duplicate_paths(self, clean_tracklet, rng):
        prev = clean_tracklet.gt(0)
        small = build_template(clean_tracklet, 1, prev,
                               CropConfig(template_size=16, search_size=32), rng)
        big = build_template(clean_tracklet, 1, prev,
                             CropConfig(template_size=2048, search_size=2048), rng)
        assert len(small) == 16
        assert len(big) == 2048

    def test_frame_zero_rejected(self, clean_tracklet, rng):
        with pytest.raises(InvalidArgumentError):
            build_template(clean_tracklet, 0, clean_tracklet.gt(0),
                           CropConfig(), rng)


class TestSearchArea:
    def test_retains_object_and_resamples(self, clean_tracklet, rng):
        cfg = CropConfig(template_size=32, search_size=96)
        search = build_search_area(clean_tracklet.cloud(1), clean_tracklet.gt(1),
                                   cfg, rng)
        assert len(search) == 96
        gt_canon = box_in_frame(clean_tracklet.gt(1), clean_tracklet.gt(1))
        assert points_in_box(search, gt_canon).all()  # clutter-free scene

    def test_enlargement_covers_nearby_offsets(self, clean_tracklet, rng):
        # a previous box 1.5 m off still captures the object (offset 2 m)
        cfg = CropConfig(template_size=32, search_size=96)
        gt = clean_tracklet.gt(1)
        off_box = BBox3D(gt.center + np.array([1.5, 0, 0]), gt.size, gt.yaw)
        search = build_search_area(clean_tracklet.cloud(1), off_box, cfg, rng)
        gt_canon = box_in_frame(gt, off_box)
        assert points_in_box(search, gt_canon).sum() > 0

    def test_far_box_contains_no_object_points(self, rng):
        tracklet = generate_synthetic(SynthConfig(num_frames=3, clutter_points=60,
                                                  seed=4, scene_half_extent=8.0))
        gt = tracklet.gt(1)
        far = BBox3D(gt.center + np.array([7.0, 0, 0]), gt.size, gt.yaw)
        cfg = CropConfig(template_size=32, search_size=64)
        search = build_search_area(tracklet.cloud(1), far, cfg, rng)
        gt_canon = box_in_frame(gt, far)
        assert points_in_box(search, gt_canon).sum() == 0  # recall oracle: 0

    def test_empty_region_raises(self, rng):
        cloud = PointCloud(np.full((5, 3), 100.0))
        with pytest.raises(EmptyRegionError) as err:
            build_search_area(cloud, BBox3D((0, 0, 0), (2, 2, 2), 0.0),
                              CropConfig(), rng)
        assert err.value.kind == "search"

    def test_z_band_filters_vertical_outliers(self, rng):
        pts = np.array([[0.0, 0, 0], [0.0, 0, 5.0]])
        cfg = CropConfig(template_size=4, search_size=4)
        search = build_search_area(PointCloud(pts), BBox3D((0, 0, 0), (2, 2, 2), 0.0),
                                   cfg, rng)
        assert np.all(np.abs(search.points[:, 2]) <= cfg.search_z_band)


class TestJitter:
    def test_jitter_within_configured_bounds(self, rng):
        cfg = CropConfig()
        box = BBox3D((1, 2, 3), (4, 2, 1.5), 0.5)
        for _ in range(50):
            j = jitter_box(box, cfg, rng)
            assert np.all(np.abs(j.center[:2] - box.center[:2]) <= cfg.jitter_xy)
            assert j.center[2] == box.center[2]
            assert abs(j.yaw - box.yaw) <= np.deg2rad(cfg.jitter_yaw_deg) + 1e-12


class TestTrackletContainer:
    def test_roundtrip_bit_exact(self, tmp_path, small_tracklet):
        path = tmp_path / "t.txt"
        save_tracklet(path, small_tracklet)
        loaded = load_tracklet(path)
        assert loaded.category == small_tracklet.category
        assert len(loaded) == len(small_tracklet)
        for (pa, ga), (pb, gb) in zip(small_tracklet.frames, loaded.frames):
            assert np.array_equal(pa.points, pb.points)
            assert np.array_equal(ga.center, gb.center)
            assert ga.yaw == gb.yaw

    def test_corrupt_container_names_path(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("opstrack-tracklet 1\ncategory x\nframes 2\nframe 0\n"
                        "box 0 0 0 1 1 1 0\npoints 2\n0 0 0\n")
        with pytest.raises(DataFormatError, match="bad.txt"):
            load_tracklet(path)

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "v9.txt"
        path.write_text("opstrack-tracklet 9\n")
        with pytest.raises(DataFormatError):
            load_tracklet(path)


# ---------------------------------------------------------------------------
# KITTI fixture: canonical axis-permutation calibration, two frames, one car
# ---------------------------------------------------------------------------

CALIB = ("Tr_velo_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n"
         "R_rect: 1 0 0 0 1 0 0 0 1\n")
# cam (x, y, z) -> velo (z, -x, -y) under this calibration


def write_kitti_scene(root, labels, clouds):
    scene = root / "scene_0000"
    (scene / "velodyne").mkdir(parents=True)
    (scene / "calib.txt").write_text(CALIB)
    (scene / "labels.txt").write_text(labels)
    for frame, pts in clouds.items():
        arr = np.asarray(pts, dtype="<f4")
        arr.tofile(scene / "velodyne" / f"{frame:06d}.bin")
    return scene


@pytest.fixture
def kitti_scene(tmp_path):
    # track 1: Car at cam (2, 1, 10) / (2.5, 1, 11), h=1.5 w=1.6 l=3.9, ry=0.3
    labels = (
        "0 1 Car 0 0 0.0 0 0 50 50 1.5 1.6 3.9 2.0 1.0 10.0 0.3\n"
        "1 1 Car 0 0 0.0 0 0 50 50 1.5 1.6 3.9 2.5 1.0 11.0 0.3\n"
        "0 2 Pedestrian 0 0 0.0 0 0 10 10 1.8 0.6 0.8 -3.0 1.2 8.0 0.0\n"
        "1 7 UnknownThing 0 0 0.0 0 0 10 10 1.0 1.0 1.0 0.0 0.0 5.0 0.0\n"
    )
    clouds = {
        0: [[10.0, -2.0, -0.25, 0.5], [10.5, -2.2, -0.3, 0.1], [50.0, 0.0, 0.0, 0.9]],
        1: [[11.0, -2.5, -0.25, 0.4], [11.2, -2.4, -0.2, 0.2], [50.0, 0.0, 0.0, 0.9]],
    }
    return write_kitti_scene(tmp_path, labels, clouds)


class TestKittiLoader:
    def test_fixture_parses_to_expected_track(self, kitti_scene):
        tracklet = load_kitti_tracklet(kitti_scene, track_id=1)
        assert len(tracklet) == 2
        assert tracklet.category == "Car"
        # cam (2, 1, 10) -> velo (10, -2, -1), bottom center lifted by h/2
        np.testing.assert_allclose(tracklet.gt(0).center, [10.0, -2.0, -0.25],
                                   atol=1e-12)
        np.testing.assert_allclose(tracklet.gt(0).size, [3.9, 1.6, 1.5])
        assert tracklet.gt(0).yaw == pytest.approx(-0.3 - np.pi / 2)
        np.testing.assert_allclose(tracklet.gt(1).center, [11.0, -2.5, -0.25],
                                   atol=1e-12)
        assert len(tracklet.cloud(0)) == 3
        assert tracklet.cloud(0).intensity is not None
        # the labeled object point sits inside the loaded box
        assert points_in_box(tracklet.cloud(0), tracklet.gt(0))[0]

    def test_unknown_category_skipped_with_warning(self, kitti_scene):
        with pytest.warns(UserWarning, match="UnknownThing"):
            with pytest.raises(InvalidArgumentError):
                load_kitti_tracklet(kitti_scene, track_id=7)

    def test_single_frame_track_rejected(self, kitti_scene):
        # track 2 appears once; the tracklet invariant rejects it
        with pytest.raises(InvalidArgumentError):
            load_kitti_tracklet(kitti_scene, track_id=2)

    def test_corrupt_point_file_named(self, tmp_path):
        labels = ("0 1 Car 0 0 0.0 0 0 50 50 1.5 1.6 3.9 2.0 1.0 10.0 0.3\n"
                  "1 1 Car 0 0 0.0 0 0 50 50 1.5 1.6 3.9 2.5 1.0 11.0 0.3\n")
        scene = write_kitti_scene(tmp_path, labels, {0: [[0, 0, 0, 0]]})
        # frame 1 bin: 5 floats, not a multiple of the 4-float record
        np.array([1, 2, 3, 4, 5], dtype="<f4").tofile(
            scene / "velodyne" / "000001.bin")
        with pytest.raises(DataFormatError, match="000001.bin"):
            load_kitti_tracklet(scene, track_id=1)

    def test_missing_files_named(self, tmp_path, kitti_scene):
        with pytest.raises(DataFormatError, match="labels.txt"):
            load_kitti_tracklet(tmp_path / "nowhere", track_id=1)
        (kitti_scene / "velodyne" / "000000.bin").unlink()
        with pytest.raises(DataFormatError, match="000000.bin"):
            load_kitti_tracklet(kitti_scene, track_id=1)

    def test_truncated_label_line_rejected(self, tmp_path):
        scene = tmp_path / "scene_bad"
        (scene / "velodyne").mkdir(parents=True)
        (scene / "calib.txt").write_text(CALIB)
        (scene / "labels.txt").write_text("0 1 Car 0 0\n")
        with pytest.raises(DataFormatError, match="labels.txt"):
            load_kitti_tracklet(scene, track_id=1)

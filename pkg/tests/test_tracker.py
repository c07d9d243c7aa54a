"""End-to-end loop: fallbacks, determinism, training mechanics, reports."""

import numpy as np
import pytest

from opstrack.data import SynthConfig, Tracklet, generate_synthetic
from opstrack.errors import ConfigError, InvalidArgumentError
from opstrack.geometry import BBox3D, PointCloud
from opstrack.nn import load_checkpoint, state_hash
from opstrack.tracker import (TrackNet, TrainReport, aggregate_metrics,
                              compare_sampling, config_from_dict, config_hash,
                              config_to_dict, evaluate, run_tracklet, track_frame,
                              train)
from tests.conftest import tiny_tracker_config


def far_cloud_tracklet(n_frames=4):
    """Every frame's points sit far from the GT boxes: all crops come up
    empty, exercising the whole fallback chain."""
    frames = []
    for t in range(n_frames):
        pts = np.full((30, 3), 60.0) + t
        frames.append((PointCloud(pts),
                       BBox3D((0.1 * t, 0.0, 0.8), (3.0, 1.6, 1.5), 0.0)))
    return Tracklet(frames, "synthetic")


class TestConfig:
    def test_roundtrip_through_dict(self, tiny_config):
        data = config_to_dict(tiny_config)
        rebuilt = config_from_dict(data)
        assert config_hash(rebuilt) == config_hash(tiny_config)

    def test_unknown_keys_listed(self):
        with pytest.raises(ConfigError, match="no_such_knob"):
            config_from_dict({"no_such_knob": 1})
        with pytest.raises(ConfigError, match="bev"):
            config_from_dict({"bev": {"voxel_sizes": 0.3}})

    def test_inconsistent_chain_rejected(self):
        with pytest.raises(ConfigError, match="m2"):
            tiny_tracker_config(sampling=__import__("opstrack.tracker",
                                                    fromlist=["SamplingConfig"])
                                .SamplingConfig(m2=512, feature_dim=16))

    def test_hash_changes_with_content(self, tiny_config):
        other = tiny_tracker_config(epochs=99)
        assert config_hash(other) != config_hash(tiny_config)


class TestTrackFrame:
    def test_deterministic_given_fixed_inputs(self, tiny_config, small_tracklet, rng):
        from opstrack.data import build_search_area, build_template

        model = TrackNet(tiny_config)
        prev = small_tracklet.gt(0)
        template = build_template(small_tracklet, 1, prev, tiny_config.crop,
                                  np.random.default_rng(1))
        search = build_search_area(small_tracklet.cloud(1), prev, tiny_config.crop,
                                   np.random.default_rng(2))
        box_a, diag_a = track_frame(model, template, search, prev)
        box_b, diag_b = track_frame(model, template, search, prev)
        np.testing.assert_array_equal(box_a.center, box_b.center)
        assert box_a.yaw == box_b.yaw
        np.testing.assert_array_equal(diag_a["scores"], diag_b["scores"])

    def test_inherits_previous_box_size(self, tiny_config, small_tracklet):
        from opstrack.data import build_search_area, build_template

        model = TrackNet(tiny_config)
        prev = small_tracklet.gt(0)
        template = build_template(small_tracklet, 1, prev, tiny_config.crop,
                                  np.random.default_rng(1))
        search = build_search_area(small_tracklet.cloud(1), prev, tiny_config.crop,
                                   np.random.default_rng(2))
        box, _ = track_frame(model, template, search, prev)
        np.testing.assert_array_equal(box.size, prev.size)


class TestRunTracklet:
    def test_gt_oracle_scores_perfect(self, tiny_config, small_tracklet):
        model = TrackNet(tiny_config)
        result = run_tracklet(model, small_tracklet, tiny_config, oracle="gt")
        from opstrack.geometry import ope_metrics

        succ, prec = ope_metrics(result)
        assert succ == pytest.approx(100.0)
        assert prec == pytest.approx(100.0)

    def test_result_covers_all_frames_diags_tracked_only(self, tiny_config,
                                                         small_tracklet):
        model = TrackNet(tiny_config)
        result, diags = run_tracklet(model, small_tracklet, tiny_config,
                                     collect_diags=True)
        assert result.num_frames == len(small_tracklet)
        assert len(diags) == len(small_tracklet) - 1
        assert result.ious[0] == 1.0 and result.distances[0] == 0.0

    def test_all_empty_regions_fall_back_to_first_gt(self, tiny_config):
        tracklet = far_cloud_tracklet()
        model = TrackNet(tiny_config)
        result, diags = run_tracklet(model, tracklet, tiny_config,
                                     collect_diags=True)
        gt0 = tracklet.gt(0)
        for box in result.boxes:
            np.testing.assert_array_equal(box.center, gt0.center)
        assert all(d["fallback"] for d in diags)

    def test_deterministic_under_repeat(self, tiny_config, small_tracklet):
        model = TrackNet(tiny_config)
        a = run_tracklet(model, small_tracklet, tiny_config, seed=3)
        b = run_tracklet(model, small_tracklet, tiny_config, seed=3)
        np.testing.assert_array_equal(a.ious, b.ious)
        np.testing.assert_array_equal(a.distances, b.distances)


class TestEvaluate:
    def test_frame_weighted_aggregation_fixture(self):
        # 10 frames at success 100 + 30 frames at success 0 -> mean 25
        report = aggregate_metrics([("car", 10, 100.0, 100.0),
                                    ("car", 30, 0.0, 0.0)])
        assert report.overall[1] == pytest.approx(25.0)
        assert report.overall[2] == pytest.approx(25.0)
        assert report.rows[0][1] == 40

    def test_single_perfect_tracklet(self, tiny_config, small_tracklet):
        model = TrackNet(tiny_config)
        report = evaluate(model, [small_tracklet], tiny_config, oracle="gt")
        assert report.overall[1] == pytest.approx(100.0)

    def test_permutation_invariant(self, tiny_config):
        tracklets = [generate_synthetic(SynthConfig(num_frames=3, seed=s,
                                                    clutter_points=10))
                     for s in (1, 2, 3)]
        model = TrackNet(tiny_config)
        fwd = evaluate(model, tracklets, tiny_config, seed=5)
        rev = evaluate(model, tracklets[::-1], tiny_config, seed=5)
        assert fwd.overall == rev.overall

    def test_inference_never_mutates_parameters(self, tiny_config, small_tracklet):
        model = TrackNet(tiny_config)
        before = state_hash(model.state_dict())
        evaluate(model, [small_tracklet], tiny_config)
        assert state_hash(model.state_dict()) == before

    def test_tsv_shape(self, tiny_config, small_tracklet, tmp_path):
        model = TrackNet(tiny_config)
        report = evaluate(model, [small_tracklet], tiny_config, oracle="gt")
        text = report.to_tsv(tmp_path / "metrics.tsv")
        lines = text.strip().splitlines()
        assert lines[0] == "category\tframes\tsuccess\tprecision"
        assert lines[-1].startswith("overall\t")


class TestTraining:
    def make_set(self, n=3):
        return [generate_synthetic(SynthConfig(num_frames=4, seed=s,
                                               clutter_points=15,
                                               velocity=(0.15, 0.0, 0.0),
                                               yaw_rate=0.0))
                for s in range(n)]

    def test_two_epoch_run_writes_reports_and_checkpoints(self, tmp_path):
        cfg = tiny_tracker_config(epochs=2, batch_size=3, val_every=1)
        model = TrackNet(cfg)
        tracklets = self.make_set()
        report = train(model, tracklets[:2], tracklets[2:], cfg,
                       out_dir=tmp_path)
        assert len(report.records) == 2
        assert (tmp_path / "last.ckpt").exists()
        assert (tmp_path / "train_report.jsonl").exists()
        rec = report.records[0]
        assert rec["lr"] == pytest.approx(cfg.optim.learning_rate)
        assert np.isfinite(rec["loss_total"])
        assert rec["val_success"] is not None
        loaded = TrainReport.from_jsonl(tmp_path / "train_report.jsonl")
        assert loaded.records[0]["epoch"] == 1

    def test_checkpoint_epoch_and_hash_recorded(self, tmp_path):
        cfg = tiny_tracker_config(epochs=1, batch_size=2)
        model = TrackNet(cfg)
        train(model, self.make_set(2), [], cfg, out_dir=tmp_path)
        _, manifest = load_checkpoint(tmp_path / "last.ckpt")
        assert manifest["epoch"] == 1
        assert manifest["config_hash"] == config_hash(cfg)

    def test_resume_reproduces_next_epoch_loss(self, tmp_path):
        """A reloaded checkpoint (parameters + optimizer moments) reproduces
        the following epoch's loss within float32 round-off."""
        from opstrack.tracker import split_optim_state

        tracklets = self.make_set(2)
        cfg2 = tiny_tracker_config(epochs=2, batch_size=2, val_every=10)
        straight = TrackNet(cfg2)
        full = train(straight, tracklets, [], cfg2, out_dir=tmp_path / "a")

        cfg1 = tiny_tracker_config(epochs=1, batch_size=2, val_every=10)
        first = TrackNet(cfg1)
        train(first, tracklets, [], cfg1, out_dir=tmp_path / "b")
        state, manifest = load_checkpoint(tmp_path / "b" / "last.ckpt")
        model_state, optim_state = split_optim_state(state)
        resumed = TrackNet(cfg2)
        resumed.load_state_dict(model_state)
        report = train(resumed, tracklets, [], cfg2, out_dir=tmp_path / "c",
                       start_epoch=manifest["epoch"] + 1,
                       optim_state=optim_state)
        assert report.records[0]["epoch"] == 2
        assert report.records[0]["loss_total"] == pytest.approx(
            full.records[1]["loss_total"], rel=1e-4)

    def test_empty_training_set_rejected(self, tiny_config):
        with pytest.raises(InvalidArgumentError):
            train(TrackNet(tiny_config), [], [], tiny_config)


class TestCompareSampling:
    def test_rows_per_strategy_per_scene_and_determinism(self, tiny_config):
        tracklets = [generate_synthetic(SynthConfig(num_frames=3, seed=s,
                                                    clutter_points=30))
                     for s in (11, 12)]
        model = TrackNet(tiny_config)
        a = compare_sampling(model, tracklets, tiny_config, seed=4)
        b = compare_sampling(model, tracklets, tiny_config, seed=4)
        assert a.rows == b.rows
        assert a.mean_recall == b.mean_recall
        strategies = {r[0] for r in a.rows}
        scenes = {r[1] for r in a.rows}
        assert strategies == {"ops", "random", "fps"}
        assert scenes == {0, 1}
        assert len(a.rows) == 6
        for s in strategies:
            assert s in a.ope

    def test_kept_count_matches_config(self, tiny_config):
        tracklets = [generate_synthetic(SynthConfig(num_frames=3, seed=1,
                                                    clutter_points=30))]
        model = TrackNet(tiny_config)
        report = compare_sampling(model, tracklets, tiny_config, seed=0)
        assert all(kept == tiny_config.sampling.m2 for _, _, _, kept in report.rows)

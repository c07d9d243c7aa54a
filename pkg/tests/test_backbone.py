"""Set abstraction and the weight-shared Siamese backbone."""

import numpy as np
import pytest

from opstrack.autodiff import Tensor
from opstrack.backbone import (Backbone, BackboneConfig, SeedSet, SetAbstraction,
                               furthest_point_sampling)
from opstrack.errors import ConfigError, InvalidArgumentError
from opstrack.geometry import PointCloud


def make_rng():
    return np.random.default_rng(0)


class TestSetAbstraction:
    def test_no_decimation_full_radius_shape_contract(self, rng):
        # out_count = k with a radius covering everything: centers are the
        # input coords and every center pools the whole cloud
        pts = rng.uniform(-0.2, 0.2, size=(6, 3))
        sa = SetAbstraction(0, (8, 4), radius=10.0, max_samples=6, rng=make_rng())
        sa.eval()
        out = sa(SeedSet(pts), out_count=6)
        assert out.coords.shape == (6, 3)
        assert out.features.shape == (6, 4)
        np.testing.assert_array_equal(out.coords, pts)

    def test_coincident_points_pool_identically(self):
        # all points at one location: relative coords vanish, so every
        # center's pooled feature row is the same vector
        pts = np.tile([[0.3, -0.1, 0.6]], (6, 1))
        sa = SetAbstraction(0, (8, 4), radius=1.0, max_samples=6, rng=make_rng())
        sa.eval()
        out = sa(SeedSet(pts), out_count=6)
        np.testing.assert_allclose(out.features.data,
                                   np.broadcast_to(out.features.data[0], (6, 4)),
                                   atol=1e-12)

    def test_single_point_cloud(self):
        sa = SetAbstraction(0, (4,), radius=0.5, max_samples=4, rng=make_rng())
        sa.eval()
        out = sa(SeedSet(np.array([[1.0, 2.0, 3.0]])), out_count=1)
        np.testing.assert_array_equal(out.coords, [[1.0, 2.0, 3.0]])
        assert np.all(np.isfinite(out.features.data))

    def test_two_clusters_get_one_center_each(self, rng):
        a = rng.normal(scale=0.1, size=(20, 3))
        b = rng.normal(scale=0.1, size=(20, 3)) + np.array([10.0, 0, 0])
        sa = SetAbstraction(0, (4,), radius=0.8, max_samples=8, rng=make_rng())
        out = sa(SeedSet(np.vstack([a, b])), out_count=2)
        sides = out.coords[:, 0] > 5.0
        assert sides.sum() == 1  # exactly one center in the far cluster

    def test_rejects_oversized_out_count(self):
        sa = SetAbstraction(0, (4,), radius=0.5, max_samples=4, rng=make_rng())
        with pytest.raises(InvalidArgumentError):
            sa(SeedSet(np.zeros((3, 3))), out_count=5)

    def test_feature_dim_checked(self, rng):
        sa = SetAbstraction(8, (4,), radius=0.5, max_samples=4, rng=make_rng())
        seeds = SeedSet(rng.normal(size=(5, 3)), Tensor(rng.normal(size=(5, 2))))
        with pytest.raises(InvalidArgumentError):
            sa(seeds, out_count=2)

    def test_neighbor_order_invariance(self, rng):
        """Max-pooled features depend on the neighbor set, not its order."""
        pts = rng.uniform(-1, 1, size=(12, 3))
        sa = SetAbstraction(0, (6, 5), radius=5.0, max_samples=12, rng=make_rng())
        sa.eval()
        out_a = sa(SeedSet(pts), out_count=4)
        perm = rng.permutation(12)
        start_b = int(np.flatnonzero(perm == 0)[0])
        out_b = sa(SeedSet(pts[perm]), out_count=4, fps_start=start_b)
        order_a = np.lexsort(out_a.coords.T)
        order_b = np.lexsort(out_b.coords.T)
        np.testing.assert_allclose(out_a.coords[order_a], out_b.coords[order_b],
                                   atol=0)
        np.testing.assert_allclose(out_a.features.data[order_a],
                                   out_b.features.data[order_b], atol=1e-9)


class TestBackboneConfig:
    def test_radii_must_increase(self):
        with pytest.raises(ConfigError):
            BackboneConfig(radii=(0.5, 0.5, 0.7))

    def test_per_layer_tuples_aligned(self):
        with pytest.raises(ConfigError):
            BackboneConfig(radii=(0.3, 0.5), search_counts=(512, 256, 256))


class TestBackbone:
    def small_backbone(self):
        cfg = BackboneConfig(search_counts=(32, 16, 16), template_counts=(16, 8, 8),
                             mlp_widths=((8, 16), (16, 16), (16, 16)), max_samples=8)
        return Backbone(cfg, make_rng()), cfg

    def test_output_shapes_small(self, rng):
        bb, cfg = self.small_backbone()
        bb.eval()
        q, r = bb(PointCloud(rng.uniform(-1, 1, (64, 3))),
                  PointCloud(rng.uniform(-3, 3, (128, 3))))
        assert q.coords.shape == (8, 3) and q.features.shape == (8, 16)
        assert r.coords.shape == (16, 3) and r.features.shape == (16, 16)

    def test_full_profile_shape_contract(self, rng):
        # default profile: 512-template/1024-search in, (128, 3+128) and
        # (256, 3+128) seed sets out
        bb = Backbone(BackboneConfig(), make_rng())
        bb.eval()
        q, r = bb(PointCloud(rng.uniform(-2, 2, (512, 3))),
                  PointCloud(rng.uniform(-4, 4, (1024, 3))))
        assert q.coords.shape == (128, 3) and q.features.shape == (128, 128)
        assert r.coords.shape == (256, 3) and r.features.shape == (256, 128)

    def test_weight_sharing_between_branches(self, rng):
        bb, _ = self.small_backbone()
        bb.eval()
        template = PointCloud(rng.uniform(-1, 1, (64, 3)))
        search = PointCloud(rng.uniform(-1, 1, (128, 3)))
        q0, r0 = bb(template, search)
        # one shared parameter nudge changes both branches
        first = bb.layers[0].mlp.layers[0].weight
        first.data = first.data + 0.05
        q1, r1 = bb(template, search)
        assert not np.allclose(q0.features.data, q1.features.data)
        assert not np.allclose(r0.features.data, r1.features.data)

    def test_identical_inputs_identical_seeds(self, rng):
        """Same cloud through both branches with equal counts: the Siamese
        property makes the outputs coincide."""
        cfg = BackboneConfig(search_counts=(16, 8, 8), template_counts=(16, 8, 8),
                             mlp_widths=((8, 16), (16, 16), (16, 16)), max_samples=8)
        bb = Backbone(cfg, make_rng())
        bb.eval()
        cloud = PointCloud(rng.uniform(-1, 1, (32, 3)))
        q, r = bb(cloud, cloud)
        np.testing.assert_array_equal(q.coords, r.coords)
        np.testing.assert_array_equal(q.features.data, r.features.data)

    def test_degenerate_cloud_stays_finite(self):
        bb, _ = self.small_backbone()
        bb.eval()
        q, r = bb(PointCloud(np.zeros((64, 3))), PointCloud(np.zeros((128, 3))))
        assert np.all(np.isfinite(q.features.data))
        assert np.all(np.isfinite(r.features.data))

    def test_gradients_reach_every_layer(self, rng):
        bb, _ = self.small_backbone()
        q, r = bb(PointCloud(rng.uniform(-1, 1, (64, 3))),
                  PointCloud(rng.uniform(-1, 1, (128, 3))))
        (q.features.sum() + r.features.sum()).backward()
        for name, p in bb.named_parameters():
            assert p.grad is not None, name


def test_fps_wrapper_accepts_cloud_and_array(rng):
    pts = rng.uniform(-1, 1, (20, 3))
    idx_a = furthest_point_sampling(PointCloud(pts), 5)
    idx_b = furthest_point_sampling(pts, 5)
    np.testing.assert_array_equal(idx_a, idx_b)


def test_randomized_fps_start_behind_config(rng):
    cfg = BackboneConfig(search_counts=(16, 8, 8), template_counts=(16, 8, 8),
                         mlp_widths=((8,), (8,), (8,)), max_samples=4,
                         fps_random_start=True)
    bb = Backbone(cfg, make_rng())
    bb.eval()
    cloud = PointCloud(rng.uniform(-1, 1, (32, 3)))
    q1, _ = bb(cloud, cloud, rng=np.random.default_rng(1))
    q2, _ = bb(cloud, cloud, rng=np.random.default_rng(2))
    q3, _ = bb(cloud, cloud, rng=np.random.default_rng(1))
    assert not np.array_equal(q1.coords, q2.coords)  # start varies with rng
    np.testing.assert_array_equal(q1.coords, q3.coords)  # same rng, same run

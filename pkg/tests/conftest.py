import numpy as np
import pytest

from opstrack import kernels
from opstrack.backbone import BackboneConfig
from opstrack.data import CropConfig, SynthConfig, generate_synthetic
from opstrack.localization import BevConfig
from opstrack.tracker import SamplingConfig, TrackerConfig


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def tiny_tracker_config(**overrides) -> TrackerConfig:
    """A desk-test-sized tracker: same wiring as the default profile, small
    counts so a forward pass is milliseconds."""
    base = dict(
        crop=CropConfig(template_size=32, search_size=64),
        backbone=BackboneConfig(
            radii=(0.3, 0.5, 0.7),
            search_counts=(32, 16, 16),
            template_counts=(16, 8, 8),
            mlp_widths=((8, 16), (16, 16), (16, 16)),
            max_samples=8,
        ),
        sampling=SamplingConfig(m2=8, feature_dim=16, max_samples=8),
        bev=BevConfig(channels=16, trunk_channels=8),
        dtype="float64",
        epochs=2,
        batch_size=4,
    )
    base.update(overrides)
    return TrackerConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_tracker_config()


@pytest.fixture
def small_tracklet():
    return generate_synthetic(SynthConfig(num_frames=4, clutter_points=20,
                                          velocity=(0.2, 0.1, 0.0),
                                          yaw_rate=0.01, seed=5))

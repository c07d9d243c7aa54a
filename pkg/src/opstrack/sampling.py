"""Object-preserved sampling: labels from GT boxes, smooth targets, the focal
classification loss, top-k candidate selection, local feature aggregation,
baseline samplers (random / furthest-point), and the recall-rate metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import SeedSet, ball_query, furthest_point_sampling
from .errors import InvalidArgumentError
from .geometry import BBox3D, points_in_box
from .highlight import HighlightedSeeds
from .nn import MlpBlock, Module, grouped_maxpool

SCORE_CLAMP = 1e-7  # keeps log() finite on saturated sigmoid outputs


@dataclass
class HighlightLabels:
    """Hard one-hot labels and their smoothed counterparts.

    Smoothing perturbs each label by epsilon / m toward the opposite class:
    y' = y - eps/m where y = 1 and y' = y + eps/m where y = 0.
    """

    y: np.ndarray
    y_smooth: np.ndarray
    epsilon: float

    @property
    def m(self) -> int:
        return self.y.shape[0]


def make_labels(coords: np.ndarray, gt: BBox3D, epsilon: float) -> HighlightLabels:
    """Label a seed 1 iff its coordinate lies inside the GT box."""
    if epsilon < 0:
        raise InvalidArgumentError("label smoothing epsilon must be >= 0")
    y = points_in_box(coords, gt).astype(np.float64)
    m = y.shape[0]
    shift = epsilon / m
    y_smooth = np.where(y == 1.0, y - shift, y + shift)
    return HighlightLabels(y, y_smooth, epsilon)


def focal_loss(scores: Tensor, labels: HighlightLabels, alpha: float = 2.0) -> Tensor:
    """Focal classification loss against smooth one-hot targets, summed over
    seeds; nonnegative and zero in the hard-label limit of perfect scores.

    Each seed contributes both class terms weighted by its smooth target
    mass:  -[y' (1-p)^a log p + (1-y') p^a log(1-p)].  Writing the background
    weight as the complementary mass (1 - y') rather than the raw smooth
    value is what keeps background seeds supervised at all; with the raw
    value their weight would be eps/m ~ 4e-4 and the classifier could never
    learn to reject clutter.
    """
    if alpha < 0:
        raise InvalidArgumentError("focal alpha must be >= 0")
    if scores.shape[0] != labels.m:
        raise InvalidArgumentError("scores/labels length mismatch")
    p = ad.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    w_pos = Tensor(labels.y_smooth)
    w_neg = Tensor(1.0 - labels.y_smooth)
    pos = w_pos * (1.0 - p) ** alpha * ad.log(p)
    neg = w_neg * p ** alpha * ad.log(1.0 - p)
    return -((pos + neg).sum())


def select_candidates(scores, m2: int) -> np.ndarray:
    """Indices of the ``m2`` largest scores; ties break toward lower index."""
    values = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if m2 > values.shape[0]:
        raise InvalidArgumentError(
            f"cannot select {m2} candidates from {values.shape[0]} seeds")
    order = np.argsort(-values, kind="stable")
    return order[:m2]


class CandidateAggregator(Module):
    """One set-abstraction step over the highlighted seeds: candidates are
    ball-query centers, neighborhoods are pooled through a shared MLP."""

    def __init__(self, d1: int, d2: int, rng: np.random.Generator,
                 dtype=np.float64, radius: float = 0.7, max_samples: int = 32,
                 hidden: tuple = ()):
        super().__init__()
        self.d1 = d1
        self.d2 = d2
        self.radius = radius
        self.max_samples = max_samples
        self.mlp = MlpBlock([3 + d1, *hidden, d2], rng, dtype,
                            use_batchnorm=True, final_activation="relu",
                            final_batchnorm=True)

    def forward(self, seeds: HighlightedSeeds, candidates: np.ndarray) -> SeedSet:
        centers = seeds.coords[candidates]
        neighbors = ball_query(centers, seeds.coords, self.radius, self.max_samples)
        rel = seeds.coords[neighbors] - centers[:, None, :]
        k, s = neighbors.shape
        lifted = ad.concat([Tensor(rel.reshape(k * s, 3).astype(seeds.features.dtype)),
                            seeds.features[neighbors.reshape(-1)]], axis=1)
        pooled = grouped_maxpool(self.mlp(lifted), s)
        return SeedSet(centers, pooled)

    __call__ = forward


def baseline_sample(kind: str, seeds: HighlightedSeeds, m2: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Unsupervised samplers compared against score-based selection:
    ``random`` (uniform without replacement) and ``fps`` (geometry greedy)."""
    if m2 > seeds.k:
        raise InvalidArgumentError(f"cannot sample {m2} of {seeds.k} seeds")
    if kind == "random":
        return rng.choice(seeds.k, size=m2, replace=False)
    if kind == "fps":
        return furthest_point_sampling(seeds.coords, m2)
    raise InvalidArgumentError(f"unknown baseline sampler {kind!r}")


def recall_rate(kept: np.ndarray, labels: HighlightLabels) -> float:
    """Fraction of object seeds that survive sampling; vacuously 1.0 when the
    scene holds no object seeds."""
    obj = np.flatnonzero(labels.y == 1.0)
    if obj.size == 0:
        return 1.0
    return float(np.intersect1d(kept, obj).size / obj.size)

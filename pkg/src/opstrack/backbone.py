"""Weight-shared Siamese feature backbone.

Three sample-and-group stages turn a raw cloud into seeds: furthest point
sampling picks centers, ball query gathers neighborhoods, and a shared MLP
plus max-pool produces per-center features.  Both branches (template and
search) run through the same layer objects, so every parameter is shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ConfigError, InvalidArgumentError
from .geometry import PointCloud
from .nn import MlpBlock, Module, grouped_maxpool


@dataclass
class SeedSet:
    """Downsampled points with feature vectors; the pipeline currency.

    ``coords`` is a plain (k, 3) array, ``features`` a (k, d) tensor (or
    None for a raw cloud, treated as d = 0).
    """

    coords: np.ndarray
    features: Tensor | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if self.features is not None and self.features.shape[0] != self.coords.shape[0]:
            raise InvalidArgumentError("coords/features row mismatch in SeedSet")

    @property
    def k(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    @classmethod
    def from_cloud(cls, pc: PointCloud) -> "SeedSet":
        return cls(pc.points)


@dataclass(frozen=True)
class BackboneConfig:
    radii: tuple = (0.3, 0.5, 0.7)
    search_counts: tuple = (512, 256, 256)
    template_counts: tuple = (256, 128, 128)
    mlp_widths: tuple = ((32, 64), (128,), (128,))
    max_samples: int = 8
    fps_start: int = 0
    fps_random_start: bool = False  # draw the start index per call instead

    def __post_init__(self):
        n = len(self.radii)
        if not (len(self.search_counts) == len(self.template_counts)
                == len(self.mlp_widths) == n):
            raise ConfigError("backbone per-layer tuples must share one length")
        if any(a >= b for a, b in zip(self.radii, self.radii[1:])):
            raise ConfigError(f"query radii must be strictly increasing: {self.radii}")
        if self.max_samples < 1:
            raise ConfigError("max_samples must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.mlp_widths[-1][-1]


def furthest_point_sampling(pc, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of ``k`` distinct indices (first pick =
    ``start``, default 0 for determinism)."""
    coords = pc.points if isinstance(pc, PointCloud) else np.asarray(pc)
    return kernels.furthest_point_indices(coords, k, start)


def ball_query(centers: np.ndarray, coords: np.ndarray, radius: float,
               max_samples: int) -> np.ndarray:
    return kernels.ball_query(centers, coords, radius, max_samples)


class SetAbstraction(Module):
    """One sample-and-group stage: FPS centers, ball-query neighborhoods,
    shared MLP over (relative coords ++ neighbor features), max-pool."""

    def __init__(self, in_dim: int, widths, radius: float, max_samples: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_dim = in_dim
        self.radius = radius
        self.max_samples = max_samples
        self.dtype = dtype
        self.mlp = MlpBlock([3 + in_dim, *widths], rng, dtype,
                            use_batchnorm=True, final_activation="relu",
                            final_batchnorm=True)

    def forward(self, seeds: SeedSet, out_count: int, fps_start: int = 0) -> SeedSet:
        if seeds.d != self.in_dim:
            raise InvalidArgumentError(
                f"set abstraction expects feature dim {self.in_dim}, got {seeds.d}")
        if out_count > seeds.k:
            raise InvalidArgumentError(
                f"cannot sample {out_count} centers from {seeds.k} seeds")
        if out_count == seeds.k:
            centers_idx = np.arange(seeds.k)  # refinement stage, no decimation
        else:
            centers_idx = furthest_point_sampling(seeds.coords, out_count, fps_start)
        centers = seeds.coords[centers_idx]
        neighbors = ball_query(centers, seeds.coords, self.radius, self.max_samples)
        rel = (seeds.coords[neighbors] - centers[:, None, :]).astype(self.dtype)
        k, s = neighbors.shape
        lifted = Tensor(rel.reshape(k * s, 3))
        if seeds.features is not None:
            gathered = seeds.features[neighbors.reshape(-1)]
            lifted = ad.concat([lifted, gathered], axis=1)
        h = self.mlp(lifted)
        pooled = grouped_maxpool(h, s)
        return SeedSet(centers, pooled)

    __call__ = forward


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.layers = []
        in_dim = 0
        for widths, radius in zip(cfg.mlp_widths, cfg.radii):
            self.layers.append(SetAbstraction(in_dim, widths, radius,
                                              cfg.max_samples, rng, dtype))
            in_dim = widths[-1]

    def run_branch(self, pc: PointCloud, counts,
                   rng: np.random.Generator | None = None) -> SeedSet:
        seeds = SeedSet.from_cloud(pc)
        for layer, count in zip(self.layers, counts):
            if self.cfg.fps_random_start and rng is not None:
                start = int(rng.integers(seeds.k))
            else:
                start = self.cfg.fps_start
            seeds = layer(seeds, count, start)
        return seeds

    def forward(self, template: PointCloud, search: PointCloud,
                rng: np.random.Generator | None = None):
        """Returns (template seeds Q, search seeds R), both branches
        evaluated with the same parameters."""
        q = self.run_branch(template, self.cfg.template_counts, rng)
        r = self.run_branch(search, self.cfg.search_counts, rng)
        return q, r

    __call__ = forward

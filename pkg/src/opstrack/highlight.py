"""Object highlighting: feature-targeted transformation, adaptive
(consistent + discrepant) cross-correlation against the template seeds,
cross-attention augmentation, and per-seed highlighting scores.

Layout notes.  The feature-targeted transform runs two independent MLPs
across the *seed axis* of the transposed seed tensor (rows = 3 coordinate
channels + d feature channels), so each output row is a mixed seed whose
first three channels are blended coordinates with no geometric meaning;
they ride along as plain features.  Cosine similarity and the subtracted
difference both operate on the d feature channels only - the true template
coordinates re-enter through the gather concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor, make_op
from .autodiff import _accum as _accum_grad
from .backbone import SeedSet
from .errors import ConfigError, InvalidArgumentError
from .nn import CrossAttentionBlock, MlpBlock, Module

COSINE_NORM_EPS = 1e-24  # under the sqrt: zero-norm rows yield cosine 0, not NaN


@dataclass
class HighlightedSeeds:
    """Search-area seeds after augmentation: original coordinates, new features."""

    coords: np.ndarray
    features: Tensor

    def __post_init__(self):
        if self.coords.shape[0] != self.features.shape[0]:
            raise InvalidArgumentError("coords/features row mismatch")

    @property
    def k(self) -> int:
        return self.coords.shape[0]


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities, (rows of a) x (rows of b)."""
    an = a / ad.sqrt((a * a).sum(axis=1, keepdims=True) + COSINE_NORM_EPS)
    bn = b / ad.sqrt((b * b).sum(axis=1, keepdims=True) + COSINE_NORM_EPS)
    return ad.matmul(an, bn.T)


class FeatureTargetedTransform(Module):
    """Two independent seed-axis MLPs producing the half-size subsets."""

    def __init__(self, m1: int, d1: int, rng: np.random.Generator,
                 dtype=np.float64, hidden: tuple | None = None):
        super().__init__()
        if m1 % 2 != 0:
            raise ConfigError(f"seed count must be even to split, got {m1}")
        self.m1 = m1
        self.d1 = d1
        widths = [m1, *(hidden if hidden is not None else (m1, m1)), m1 // 2]
        self.mlp_a = MlpBlock(widths, rng, dtype, use_batchnorm=True)
        self.mlp_b = MlpBlock(widths, rng, dtype, use_batchnorm=True)

    def forward(self, seeds: SeedSet):
        if seeds.k != self.m1 or seeds.d != self.d1:
            raise InvalidArgumentError(
                f"transform configured for ({self.m1}, {self.d1}) seeds, "
                f"got ({seeds.k}, {seeds.d})")
        full = ad.concat([Tensor(seeds.coords.astype(seeds.features.dtype)),
                          seeds.features], axis=1)
        transposed = full.T  # (3 + d1, m1)
        return self.mlp_a(transposed).T, self.mlp_b(transposed).T

    __call__ = forward


class ConsistentXCorr(Module):
    """For each subset seed, gather the most cosine-similar template seed and
    fuse [r_j, s_kj, q_k, x_k] through an MLP."""

    def __init__(self, d1: int, rng: np.random.Generator, dtype=np.float64,
                 hidden: int = 128):
        super().__init__()
        self.d1 = d1
        self.mlp = MlpBlock([d1 + 1 + d1 + 3, hidden, d1], rng, dtype,
                            use_batchnorm=True)

    def forward(self, q: SeedSet, subset: Tensor) -> Tensor:
        if q.k == 0:
            raise InvalidArgumentError("template seed set is empty")
        rf = subset[:, 3:]
        if rf.shape[1] != self.d1 or q.d != self.d1:
            raise InvalidArgumentError("feature width mismatch in consistent branch")
        sim = cosine_matrix(q.features, rf)  # (n1, m)
        k_idx = np.argmax(sim.data, axis=0)
        m = rf.shape[0]
        s_kj = sim[k_idx, np.arange(m)].reshape(m, 1)
        q_k = q.features[k_idx]
        x_k = Tensor(q.coords[k_idx].astype(rf.dtype))
        return self.mlp(ad.concat([rf, s_kj, q_k, x_k], axis=1))

    __call__ = forward


class DiscrepantXCorr(Module):
    """Learned difference weighting: d_ij = MLP(q_i - r_j) over feature
    channels, pooled as max_i (q_i * d_ij), then an output MLP."""

    def __init__(self, d1: int, rng: np.random.Generator, dtype=np.float64,
                 hidden: int = 128):
        super().__init__()
        self.d1 = d1
        self.diff_mlp = MlpBlock([d1, d1], rng, dtype)
        self.out_mlp = MlpBlock([d1, hidden, d1], rng, dtype, use_batchnorm=True)

    def forward(self, q: SeedSet, subset: Tensor) -> Tensor:
        if q.k == 0:
            raise InvalidArgumentError("template seed set is empty")
        rf = subset[:, 3:]
        if rf.shape[1] != self.d1 or q.d != self.d1:
            raise InvalidArgumentError("feature width mismatch in discrepant branch")
        qf = q.features
        # the difference map is one affine layer, so MLP(q_i - r_j) factors
        # into per-seed projections: qW - rW + bias (n + m matmul rows
        # instead of n * m); the pairwise product-and-pool runs as one fused
        # kernel with a closed-form subgradient to the winning template seed
        lin = self.diff_mlp.layers[0]
        qw = ad.matmul(qf, lin.weight)
        rw = ad.matmul(rf, lin.weight)
        bias = lin.bias
        pooled_data, amax = kernels.pairwise_diff_pool(qf.data, qw.data, rw.data,
                                                       bias.data)

        def bwd(g):
            g_qf, g_qw, g_rw, g_b = kernels.pairwise_diff_pool_bwd(
                np.ascontiguousarray(g), qf.data, qw.data, rw.data, bias.data,
                amax)
            _accum_grad(qf, g_qf)
            _accum_grad(qw, g_qw)
            _accum_grad(rw, g_rw)
            _accum_grad(bias, g_b)

        pooled = make_op(pooled_data, (qf, qw, rw, bias), bwd)
        return self.out_mlp(pooled)

    __call__ = forward


class ObjectAugmentation(Module):
    """Concatenate the two cross-correlated subsets, build differentiation
    features against the original seeds, and fuse through cross-attention
    with a learned position embedding of the raw seed coordinates."""

    def __init__(self, d1: int, rng: np.random.Generator, dtype=np.float64,
                 pos_hidden: int = 64, pos_gain: float = 3.0):
        super().__init__()
        self.d1 = d1
        self.delta_mlp = MlpBlock([d1, d1, d1], rng, dtype, use_batchnorm=True)
        self.pos_mlp = MlpBlock([3, pos_hidden, d1], rng, dtype)
        self.attention = CrossAttentionBlock(d1, 1, rng, dtype)
        # identity-initialized projections with an amplified position code
        # start the attention near-diagonal, so each augmented row reflects
        # its own seed from the first step instead of a global average
        eye = np.eye(d1, dtype=dtype)
        for lin in (self.attention.wq, self.attention.wk, self.attention.wv,
                    self.attention.wo):
            lin.weight.data = eye.copy()
            lin.bias.data = np.zeros(d1, dtype=dtype)
        self.pos_mlp.layers[-1].weight.data = (
            self.pos_mlp.layers[-1].weight.data * pos_gain)

    def forward(self, seeds: SeedSet, corr_a: Tensor, corr_b: Tensor) -> HighlightedSeeds:
        fused = ad.concat([corr_a, corr_b], axis=0)
        if fused.shape != (seeds.k, self.d1):
            raise InvalidArgumentError(
                f"cross-correlated seeds {fused.shape} do not cover the "
                f"{seeds.k} search seeds")
        delta = self.delta_mlp(fused - seeds.features)
        pos = self.pos_mlp(Tensor(seeds.coords.astype(fused.dtype)))
        out = self.attention(fused + pos, delta + pos, delta + pos)
        return HighlightedSeeds(seeds.coords, out)

    __call__ = forward


class ScoreHead(Module):
    """Per-seed objectness in (0, 1): 3-layer MLP ending in a sigmoid."""

    def __init__(self, d1: int, rng: np.random.Generator, dtype=np.float64,
                 hidden: tuple = (128, 128)):
        super().__init__()
        self.mlp = MlpBlock([d1, *hidden, 1], rng, dtype, use_batchnorm=True,
                            final_activation="sigmoid")

    def forward(self, seeds: HighlightedSeeds) -> Tensor:
        return self.mlp(seeds.features).reshape(seeds.k)

    __call__ = forward


class ObjectHighlighter(Module):
    """Full highlighting stage: transform, both correlations, augmentation,
    and the score head.  Coordinates pass through bitwise untouched."""

    def __init__(self, m1: int, d1: int, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.m1 = m1
        self.d1 = d1
        self.transform = FeatureTargetedTransform(m1, d1, rng, dtype)
        self.consistent = ConsistentXCorr(d1, rng, dtype)
        self.discrepant = DiscrepantXCorr(d1, rng, dtype)
        self.augment = ObjectAugmentation(d1, rng, dtype)
        self.score_head = ScoreHead(d1, rng, dtype)

    def forward(self, q: SeedSet, r: SeedSet):
        subset_a, subset_b = self.transform(r)
        corr_a = self.consistent(q, subset_a)
        corr_b = self.discrepant(q, subset_b)
        highlighted = self.augment(r, corr_a, corr_b)
        scores = self.score_head(highlighted)
        return highlighted, scores

    __call__ = forward

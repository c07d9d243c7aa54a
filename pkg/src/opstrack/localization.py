"""Box localization on a bird's-eye-view grid.

Object-preserved seeds are voxelized (average pooled) into a dense H x W x c
feature map; a small convolutional trunk feeds four heads predicting stacked
center maps, a sub-cell offset field, and per-cell z / rotation values.  GT
construction, the five loss terms, and box decoding live here too.

Grid convention: cell (u, v) covers x in [x_min + u*r, x_min + (u+1)*r) and
y likewise; continuous cell coordinates are u = (x - x_min) / r.  Map arrays
are indexed [u, v], so a flat row-major argmax tie resolves to the lowest
(u, v) pair.

Head-map dump container (``*.maps``): ``b"OPSMAPS1"`` magic, uint32 entry
count, then per entry a uint32 name length, the UTF-8 name, a uint32 ndim,
uint32 dims, and the raw little-endian float32 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, scatter_mean
from .backbone import SeedSet
from .errors import (DataFormatError, DivergenceError, EmptyRegionError,
                     InvalidArgumentError)
from .geometry import BBox3D, box_to_world, points_in_box
from .nn import Conv2d, Module

SOFT_ARGMAX_EPS = 1e-12  # under the sqrt in the distance of Eq-style center loss


@dataclass(frozen=True)
class BevConfig:
    x_range: tuple = (-4.8, 4.8)
    y_range: tuple = (-4.8, 4.8)
    voxel_size: float = 0.3
    channels: int = 128
    num_center_maps: int = 4
    offset_window: int = 1
    trunk_channels: int = 32
    wrap_theta: bool = True  # plain L1 on the rotation error when False
    offset_natural_targets: bool = True  # target p~ - c instead of p~ - p^c + delta

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise InvalidArgumentError("voxel_size must be > 0")
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise InvalidArgumentError("empty BEV range")
        if self.num_center_maps < 2:
            raise InvalidArgumentError("need at least two stacked center maps")

    @property
    def grid_h(self) -> int:
        return int(np.floor((self.x_range[1] - self.x_range[0]) / self.voxel_size))

    @property
    def grid_w(self) -> int:
        return int(np.floor((self.y_range[1] - self.y_range[0]) / self.voxel_size))


@dataclass
class BevGrid:
    cfg: BevConfig
    features: Tensor  # (H, W, c); empty cells are zero vectors
    counts: np.ndarray  # (H, W) member counts

    @property
    def h(self) -> int:
        return self.cfg.grid_h

    @property
    def w(self) -> int:
        return self.cfg.grid_w

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        u = int(np.floor((x - self.cfg.x_range[0]) / self.cfg.voxel_size))
        v = int(np.floor((y - self.cfg.y_range[0]) / self.cfg.voxel_size))
        return u, v

    def continuous_cell(self, x: float, y: float) -> tuple[float, float]:
        u = (x - self.cfg.x_range[0]) / self.cfg.voxel_size
        v = (y - self.cfg.y_range[0]) / self.cfg.voxel_size
        return u, v

    def cell_center_world(self, u, v):
        x = self.cfg.x_range[0] + (np.asarray(u) + 0.5) * self.cfg.voxel_size
        y = self.cfg.y_range[0] + (np.asarray(v) + 0.5) * self.cfg.voxel_size
        return x, y


def voxelize(seeds: SeedSet, cfg: BevConfig) -> BevGrid:
    """Average-pool seed features into grid cells; out-of-range seeds drop."""
    H, W = cfg.grid_h, cfg.grid_w
    r = cfg.voxel_size
    u = np.floor((seeds.coords[:, 0] - cfg.x_range[0]) / r).astype(np.int64)
    v = np.floor((seeds.coords[:, 1] - cfg.y_range[0]) / r).astype(np.int64)
    keep = (u >= 0) & (u < H) & (v >= 0) & (v < W)
    if not keep.any():
        raise EmptyRegionError("grid")
    cells = u[keep] * W + v[keep]
    kept_features = seeds.features[np.flatnonzero(keep)]
    means, counts = scatter_mean(kept_features, cells, H * W)
    return BevGrid(cfg, means.reshape(H, W, cfg.channels), counts.reshape(H, W))


def make_center_map(gt: BBox3D, grid: BevGrid) -> np.ndarray:
    """Target heatmap: 1/(d+1) inside the GT footprint (d = cell distance to
    the discrete center, which always scores exactly 1), zero outside."""
    u0, v0 = grid.cell_of(gt.center[0], gt.center[1])
    if not (0 <= u0 < grid.h and 0 <= v0 < grid.w):
        raise InvalidArgumentError(
            f"GT center cell ({u0}, {v0}) is outside the {grid.h}x{grid.w} grid")
    uu, vv = np.meshgrid(np.arange(grid.h), np.arange(grid.w), indexing="ij")
    cx, cy = grid.cell_center_world(uu.reshape(-1), vv.reshape(-1))
    centers = np.column_stack([cx, cy, np.full(cx.size, gt.center[2])])
    inside = points_in_box(centers, gt).reshape(grid.h, grid.w)
    d = np.sqrt((uu - u0) ** 2 + (vv - v0) ** 2)
    gt_map = np.where(inside, 1.0 / (d + 1.0), 0.0)
    gt_map[u0, v0] = 1.0
    return gt_map


@dataclass
class HeadMaps:
    center_logits: Tensor  # (H, W, n)
    center: Tensor  # sigmoid of the logits
    offset: Tensor  # (H, W, 2)
    z: Tensor  # (H, W)
    theta: Tensor  # (H, W)


class LocalizationHead(Module):
    """Shared 3x3 conv trunk plus four per-task 3x3 conv heads."""

    def __init__(self, cfg: BevConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        t = cfg.trunk_channels
        self.trunk = Conv2d(cfg.channels, t, 3, rng, dtype)
        self.center_head = Conv2d(t, cfg.num_center_maps, 3, rng, dtype)
        self.offset_head = Conv2d(t, 2, 3, rng, dtype)
        self.z_head = Conv2d(t, 1, 3, rng, dtype)
        self.theta_head = Conv2d(t, 1, 3, rng, dtype)
        # offsets start at the mean sub-cell target
        self.offset_head.bias.data = np.full(2, 0.5, dtype=dtype)

    def forward(self, grid: BevGrid) -> HeadMaps:
        h = ad.relu(self.trunk(grid.features))
        logits = self.center_head(h)
        H, W = grid.h, grid.w
        return HeadMaps(
            center_logits=logits,
            center=ad.sigmoid(logits),
            offset=self.offset_head(h),
            z=self.z_head(h).reshape(H, W),
            theta=self.theta_head(h).reshape(H, W),
        )

    __call__ = forward


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

CENTER_FOCAL_ALPHA = 2.0
CENTER_FOCAL_BETA = 4.0
_CLAMP = 1e-7


def center_loss(pred: Tensor, gt_map: np.ndarray) -> Tensor:
    """Penalty-reduced focal heatmap loss on the first center map.

    Cells where the target is exactly 1 are positives; all others are
    weighted down by (1 - target)^beta.  Normalized by the positive count.
    """
    if pred.shape != gt_map.shape:
        raise InvalidArgumentError(
            f"center map shape mismatch {pred.shape} vs {gt_map.shape}")
    p = ad.clip(pred, _CLAMP, 1.0 - _CLAMP)
    pos_mask = (gt_map == 1.0).astype(gt_map.dtype)
    neg_mask = 1.0 - pos_mask
    n_pos = max(pos_mask.sum(), 1.0)
    pos = Tensor(pos_mask) * (1.0 - p) ** CENTER_FOCAL_ALPHA * ad.log(p)
    neg = (Tensor(neg_mask * (1.0 - gt_map) ** CENTER_FOCAL_BETA)
           * p ** CENTER_FOCAL_ALPHA * ad.log(1.0 - p))
    return -((pos + neg).sum()) * (1.0 / n_pos)


def soft_argmax_2d(logits: Tensor) -> Tensor:
    """Differentiable (u, v) expectation under a softmax over all cells."""
    H, W = logits.shape
    weights = ad.softmax(logits.reshape(H * W), axis=-1)
    uu, vv = np.meshgrid(np.arange(H, dtype=logits.dtype),
                         np.arange(W, dtype=logits.dtype), indexing="ij")
    eu = (weights * Tensor(uu.reshape(-1))).sum()
    ev = (weights * Tensor(vv.reshape(-1))).sum()
    return ad.concat([eu.reshape(1), ev.reshape(1)], axis=0)


def loc_loss(center_logits: Tensor, p_c: tuple[int, int]) -> Tensor:
    """Mean Euclidean distance between the discrete GT center and the
    soft-argmax centers of the trailing stacked maps (all but the first)."""
    n = center_logits.shape[2]
    if n < 2:
        raise InvalidArgumentError("loc_loss needs at least two stacked maps")
    target = np.array(p_c, dtype=center_logits.dtype)
    total = None
    for i in range(1, n):
        est = soft_argmax_2d(center_logits[:, :, i])
        delta = est - Tensor(target)
        dist = ad.sqrt((delta * delta).sum() + SOFT_ARGMAX_EPS)
        total = dist if total is None else total + dist
    return total * (1.0 / (n - 1))


def offset_loss(offset: Tensor, p_c: tuple[int, int], p_tilde: tuple[float, float],
                window: int, natural_targets: bool = True) -> Tensor:
    """L1 supervision of the offset field on the (2l+1)^2 square around the
    discrete center; cells falling off the grid are skipped.

    With ``natural_targets`` each supervised cell c regresses the vector to
    the continuous center, p~ - c, which is continuous in the object position
    and is exactly what :func:`decode_box` adds to the argmax cell (so an
    off-by-one argmax still decodes correctly).  The alternative sign
    convention, target = (p~ - p^c) + delta, jumps by whole cells whenever
    the center crosses a cell boundary; it is kept selectable for the strict
    reading but its delta != 0 targets are unlearnable sawtooths.  Both forms
    agree on the window center.
    """
    if window < 0:
        raise InvalidArgumentError("offset window must be >= 0")
    H, W, _ = offset.shape
    du = p_tilde[0] - p_c[0]
    dv = p_tilde[1] - p_c[1]
    sign = -1.0 if natural_targets else 1.0
    total = None
    for dx in range(-window, window + 1):
        for dy in range(-window, window + 1):
            u, v = p_c[0] + dx, p_c[1] + dy
            if not (0 <= u < H and 0 <= v < W):
                continue
            target = Tensor(np.array([du + sign * dx, dv + sign * dy],
                                     dtype=offset.dtype))
            err = ad.absolute(offset[u, v] - target).sum()
            total = err if total is None else total + err
    return total


def scalar_losses(z_map: Tensor, theta_map: Tensor, gt_z: float, gt_theta: float,
                  p_c: tuple[int, int], wrap_theta: bool = True):
    """L1 errors of the z and rotation maps read at the GT center cell.

    The rotation error is wrapped into [0, pi] by default so a prediction of
    pi - 0.1 against a target of -pi + 0.1 scores 0.2 rather than 2pi - 0.2;
    set ``wrap_theta=False`` for the plain L1 reading.
    """
    u, v = p_c
    z_err = ad.absolute(z_map[u, v] - gt_z)
    diff = theta_map[u, v] - gt_theta
    if wrap_theta:
        # round() is piecewise constant, so treating it as data keeps the
        # gradient equal to the plain difference away from the wrap points
        shift = 2 * np.pi * np.round(diff.data / (2 * np.pi))
        diff = diff - float(shift)
    theta_err = ad.absolute(diff)
    return z_err, theta_err


@dataclass(frozen=True)
class LossWeights:
    lambda_group: float = 1.0  # center + loc + offset + theta
    lambda_z: float = 2.0
    lambda_cls: float = 0.5

    def __post_init__(self):
        if min(self.lambda_group, self.lambda_z, self.lambda_cls) < 0:
            raise InvalidArgumentError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    cls: float
    center: float
    loc: float
    off: float
    z: float
    theta: float
    total: float

    def as_dict(self):
        return {"cls": self.cls, "center": self.center, "loc": self.loc,
                "off": self.off, "z": self.z, "theta": self.theta,
                "total": self.total}


def total_loss(cls: Tensor, center: Tensor, loc: Tensor, off: Tensor, z: Tensor,
               theta: Tensor, weights: LossWeights):
    """Weighted sum of the six terms; returns (scalar tensor, breakdown)."""
    parts = {"cls": cls, "center": center, "loc": loc, "off": off,
             "z": z, "theta": theta}
    for name, t in parts.items():
        if not np.isfinite(t.data):
            raise DivergenceError(f"loss term {name!r} is non-finite")
    total = (weights.lambda_group * (center + loc + off + theta)
             + weights.lambda_z * z + weights.lambda_cls * cls)
    breakdown = LossBreakdown(cls.item(), center.item(), loc.item(), off.item(),
                              z.item(), theta.item(), total.item())
    return total, breakdown


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def decode_box(maps: HeadMaps, grid: BevGrid, box_size: np.ndarray,
               frame: BBox3D | None = None) -> BBox3D:
    """Turn head maps into a box: argmax cell of the first center map (flat
    row-major, so ties take the lowest (u, v)), plus the predicted sub-cell
    offset, z, and rotation read at that cell.  The size is inherited from
    the first-frame GT box; ``frame`` transforms the result back to world
    coordinates.

    The argmax is restricted to cells that hold at least one seed: a box
    center can only sit in point-bearing space, and unoccupied cells carry
    extrapolated heatmap values (border cells in particular see the convs'
    zero padding and can drift above weak true peaks).
    """
    center0 = maps.center.data[:, :, 0]
    occupied = grid.counts > 0
    if occupied.any():
        masked = np.where(occupied, center0, -np.inf)
    else:
        masked = center0
    flat = int(np.argmax(masked))
    u0, v0 = divmod(flat, grid.w)
    off = maps.offset.data[u0, v0]
    u = u0 + float(off[0])
    v = v0 + float(off[1])
    x = grid.cfg.x_range[0] + u * grid.cfg.voxel_size
    y = grid.cfg.y_range[0] + v * grid.cfg.voxel_size
    z = float(maps.z.data[u0, v0])
    yaw = float(maps.theta.data[u0, v0])
    box = BBox3D(np.array([x, y, z]), np.asarray(box_size, dtype=np.float64), yaw)
    return box if frame is None else box_to_world(box, frame)


# ---------------------------------------------------------------------------
# head-map debug dump
# ---------------------------------------------------------------------------

_MAPS_MAGIC = b"OPSMAPS1"


def dump_head_maps(path, named_maps: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(_MAPS_MAGIC)
        fh.write(struct.pack("<I", len(named_maps)))
        for name, arr in named_maps.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_head_maps(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read map dump {path}: {exc}") from exc
    if raw[:8] != _MAPS_MAGIC:
        raise DataFormatError(f"{path} is not a head-map dump")
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
            if arr.size != n:
                raise DataFormatError(f"truncated payload for {name!r} in {path}")
            pos += 4 * n
            out[name] = arr.reshape(shape).copy()
    except struct.error as exc:
        raise DataFormatError(f"corrupt head-map dump {path}") from exc
    return out

"""Tracklet sources and crop construction.

Two loaders produce :class:`Tracklet` objects: a parametric synthetic
generator (ground truth exact by construction) and a KITTI-format reader.
Template and search-area construction implements the fixed-size resampling
and augmentation recipe used by the tracker.

Synthetic tracklet container (one file per tracklet)
----------------------------------------------------
Line-oriented text, whitespace-delimited::

    opstrack-tracklet 1
    category <tag>
    frames <T>
    frame <t>
    box <cx> <cy> <cz> <length> <width> <height> <yaw>
    points <n>
    <x> <y> <z>
    ...

Floats are written with ``repr`` so re-reading is bit exact.

KITTI scene directory layout
----------------------------
``scene_dir/velodyne/{frame:06d}.bin`` - consecutive little-endian float32
quadruples (x, y, z, intensity) in the velodyne frame.
``scene_dir/labels.txt`` - whitespace-delimited tracking labels, one object
per line: ``frame track_id type truncated occluded alpha bbox_left bbox_top
bbox_right bbox_bottom height width length x y z rotation_y`` with the
location at the box bottom center in rectified camera coordinates.
``scene_dir/calib.txt`` - ``key: v1 v2 ...`` lines; ``Tr_velo_cam`` (12
values, row-major 3x4) maps velodyne to camera coordinates and ``R_rect``
(9 values) is the optional rectifying rotation.  Boxes are converted to the
velodyne frame at load: center lifted by height/2, yaw = -rotation_y - pi/2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, EmptyRegionError, InvalidArgumentError
from .geometry import BBox3D, PointCloud, canonicalize, normalize_angle, points_in_box

KITTI_CATEGORIES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting",
                    "Cyclist", "Tram", "Misc")


@dataclass
class Tracklet:
    frames: list  # [(PointCloud, BBox3D), ...]
    category: str = "unknown"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise InvalidArgumentError(
                f"a tracklet needs at least 2 frames, got {len(self.frames)}")

    def __len__(self):
        return len(self.frames)

    def cloud(self, t: int) -> PointCloud:
        return self.frames[t][0]

    def gt(self, t: int) -> BBox3D:
        return self.frames[t][1]


@dataclass(frozen=True)
class CropConfig:
    template_size: int = 512
    search_size: int = 1024
    search_offset: float = 2.0
    search_z_band: float = 1.5
    jitter_xy: float = 0.3
    jitter_yaw_deg: float = 5.0

    def __post_init__(self):
        if self.template_size <= 0 or self.search_size <= 0:
            raise InvalidArgumentError("crop sizes must be positive")
        if self.search_offset <= 0:
            raise InvalidArgumentError("search_offset must be > 0")


@dataclass(frozen=True)
class SynthConfig:
    """Parametric scene description for the synthetic tracklet generator.

    ``velocity``/``yaw_rate`` of ``None`` are drawn per tracklet from
    ``speed_range``/``yaw_rate_range``.  Everything is reproducible from
    ``seed``.
    """

    num_frames: int = 10
    length_range: tuple = (3.2, 4.6)
    width_range: tuple = (1.6, 2.0)
    height_range: tuple = (1.4, 1.8)
    object_points_range: tuple = (90, 150)
    clutter_points: int = 40
    velocity: tuple | None = None
    yaw_rate: float | None = None
    speed_range: tuple = (0.05, 0.25)
    yaw_rate_range: tuple = (-0.02, 0.02)
    dropout: float = 0.05
    scene_half_extent: float = 6.0
    seed: int = 0
    category: str = "synthetic"

    def __post_init__(self):
        if self.num_frames < 2:
            raise InvalidArgumentError("num_frames must be >= 2")
        if self.clutter_points < 0 or self.dropout < 0 or self.dropout >= 1:
            raise InvalidArgumentError("densities must be >= 0 and dropout < 1")


def _sample_shell(rng: np.random.Generator, size: np.ndarray, n: int) -> np.ndarray:
    """Points on the box surface, pulled 0.5% toward the center so membership
    tests are robust to rotation round-off."""
    l, w, h = size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        if axis == 0:
            pts[m] = np.column_stack([np.full(m.sum(), sign * l / 2), u[m] * w, v[m] * h])
        elif axis == 1:
            pts[m] = np.column_stack([u[m] * l, np.full(m.sum(), sign * w / 2), v[m] * h])
        else:
            pts[m] = np.column_stack([u[m] * l, v[m] * w, np.full(m.sum(), sign * h / 2)])
    return pts * 0.995


def generate_synthetic(cfg: SynthConfig) -> Tracklet:
    """Cuboid-shell object moving under a constant velocity / yaw-rate model,
    plus uniform background clutter rejected from the (slightly enlarged)
    object box.  GT boxes are exact by construction."""
    rng = np.random.default_rng(cfg.seed)
    size = np.array([rng.uniform(*cfg.length_range),
                     rng.uniform(*cfg.width_range),
                     rng.uniform(*cfg.height_range)])
    start = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), size[2] / 2])
    yaw0 = rng.uniform(-np.pi, np.pi)
    if cfg.velocity is not None:
        vel = np.asarray(cfg.velocity, dtype=np.float64)
    else:
        heading = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(*cfg.speed_range)
        vel = np.array([speed * np.cos(heading), speed * np.sin(heading), 0.0])
    yaw_rate = cfg.yaw_rate if cfg.yaw_rate is not None else rng.uniform(*cfg.yaw_rate_range)

    frames = []
    for t in range(cfg.num_frames):
        center = start + t * vel
        yaw = normalize_angle(yaw0 + t * yaw_rate)
        gt = BBox3D(center.copy(), size.copy(), yaw)
        n_obj = int(rng.integers(cfg.object_points_range[0],
                                 cfg.object_points_range[1] + 1))
        local = _sample_shell(rng, size, n_obj)
        c, s = np.cos(yaw), np.sin(yaw)
        world = np.empty_like(local)
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + center[0]
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + center[1]
        world[:, 2] = local[:, 2] + center[2]
        if cfg.dropout > 0:
            keep = rng.random(n_obj) >= cfg.dropout
            if keep.sum() < 5:  # never let a frame lose the whole object
                keep[:5] = True
            world = world[keep]
        clutter = _sample_clutter(rng, cfg, gt, center)
        pts = np.vstack([world, clutter]) if clutter.size else world
        frames.append((PointCloud(pts), gt))
    return Tracklet(frames, cfg.category)


def _sample_clutter(rng, cfg: SynthConfig, gt: BBox3D, center: np.ndarray) -> np.ndarray:
    if cfg.clutter_points == 0:
        return np.zeros((0, 3))
    reject_box = gt.enlarged(0.15, 0.15, 0.15)
    out = []
    needed = cfg.clutter_points
    for _ in range(64):
        cand = np.column_stack([
            rng.uniform(center[0] - cfg.scene_half_extent,
                        center[0] + cfg.scene_half_extent, needed),
            rng.uniform(center[1] - cfg.scene_half_extent,
                        center[1] + cfg.scene_half_extent, needed),
            rng.uniform(0.0, 2.5, needed),
        ])
        cand = cand[~points_in_box(cand, reject_box)]
        if cand.size:
            out.append(cand)
            needed -= cand.shape[0]
        if needed <= 0:
            break
    return np.vstack(out)[:cfg.clutter_points] if out else np.zeros((0, 3))


def tracklet_seeds(root_seed: int, count: int) -> list[int]:
    """Independent per-tracklet seeds derived from one root seed, so parallel
    and serial dataset builds agree."""
    ss = np.random.SeedSequence(root_seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]


# ---------------------------------------------------------------------------
# tracklet text container
# ---------------------------------------------------------------------------

def save_tracklet(path, tracklet: Tracklet):
    lines = ["opstrack-tracklet 1", f"category {tracklet.category}",
             f"frames {len(tracklet)}"]
    for t, (pc, gt) in enumerate(tracklet.frames):
        lines.append(f"frame {t}")
        vals = [*gt.center, *gt.size, gt.yaw]
        lines.append("box " + " ".join(repr(float(v)) for v in vals))
        lines.append(f"points {len(pc)}")
        for p in pc.points:
            lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_tracklet(path) -> Tracklet:
    path = Path(path)
    try:
        tokens = path.read_text().split("\n")
    except OSError as exc:
        raise DataFormatError(f"cannot read tracklet file {path}: {exc}") from exc
    it = iter(tokens)

    def expect(tag):
        line = next(it, "").split()
        if not line or line[0] != tag:
            raise DataFormatError(f"{path}: expected {tag!r}, got {line!r}")
        return line[1:]

    head = expect("opstrack-tracklet")
    if head != ["1"]:
        raise DataFormatError(f"{path}: unsupported container version {head}")
    category = expect("category")[0]
    n_frames = int(expect("frames")[0])
    frames = []
    try:
        for t in range(n_frames):
            expect("frame")
            box_vals = [float(v) for v in expect("box")]
            if len(box_vals) != 7:
                raise DataFormatError(f"{path}: frame {t} box needs 7 numbers")
            n_pts = int(expect("points")[0])
            pts = np.empty((n_pts, 3))
            for i in range(n_pts):
                row = next(it, "").split()
                if len(row) != 3:
                    raise DataFormatError(f"{path}: frame {t} point row {i} malformed")
                pts[i] = [float(v) for v in row]
            frames.append((PointCloud(pts),
                           BBox3D(box_vals[:3], box_vals[3:6], box_vals[6])))
    except (ValueError, StopIteration) as exc:
        raise DataFormatError(f"{path}: corrupt tracklet container: {exc}") from exc
    return Tracklet(frames, category)


# ---------------------------------------------------------------------------
# KITTI-format reader
# ---------------------------------------------------------------------------

def _load_velodyne(path: Path) -> PointCloud:
    if not path.exists():
        raise DataFormatError(f"missing point file {path}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise DataFormatError(
            f"corrupt point file {path}: {raw.size} floats is not a multiple of 4")
    pts = raw.reshape(-1, 4)
    return PointCloud(pts[:, :3].astype(np.float64), pts[:, 3].astype(np.float64))


def _load_calib(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (Tr_velo_cam 3x4, R_rect 3x3)."""
    if not path.exists():
        raise DataFormatError(f"missing calibration file {path}")
    tr = None
    rect = np.eye(3)
    for line in path.read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        vals = rest.split()
        if key in ("Tr_velo_cam", "Tr_velo_to_cam"):
            if len(vals) != 12:
                raise DataFormatError(f"corrupt calibration {path}: {key} needs 12 values")
            tr = np.array([float(v) for v in vals]).reshape(3, 4)
        elif key in ("R_rect", "R0_rect"):
            if len(vals) != 9:
                raise DataFormatError(f"corrupt calibration {path}: {key} needs 9 values")
            rect = np.array([float(v) for v in vals]).reshape(3, 3)
    if tr is None:
        raise DataFormatError(f"calibration {path} lacks Tr_velo_cam")
    return tr, rect


def _cam_to_velo(xyz_cam: np.ndarray, tr: np.ndarray, rect: np.ndarray) -> np.ndarray:
    unrect = np.linalg.solve(rect, xyz_cam)
    return np.linalg.solve(tr[:, :3], unrect - tr[:, 3])


def load_kitti_tracklet(scene_dir, track_id: int) -> Tracklet:
    """Load one object track from a KITTI-format scene directory.

    Label lines whose type is not a known KITTI category are skipped with a
    warning.  A track with fewer than two labeled frames is rejected by the
    Tracklet invariant.
    """
    scene = Path(scene_dir)
    label_path = scene / "labels.txt"
    if not label_path.exists():
        raise DataFormatError(f"missing label file {label_path}")
    tr, rect = _load_calib(scene / "calib.txt")

    frames = []
    category = "unknown"
    for lineno, line in enumerate(label_path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 17:
            raise DataFormatError(
                f"corrupt label file {label_path}: line {lineno} has {len(parts)} fields")
        frame_idx, tid = int(parts[0]), int(parts[1])
        if tid != track_id:
            continue
        obj_type = parts[2]
        if obj_type == "DontCare":
            continue
        if obj_type not in KITTI_CATEGORIES:
            warnings.warn(f"{label_path}:{lineno}: skipping unknown category "
                          f"{obj_type!r}", stacklevel=2)
            continue
        category = obj_type
        h, w, l = (float(parts[10]), float(parts[11]), float(parts[12]))
        xyz_cam = np.array([float(parts[13]), float(parts[14]), float(parts[15])])
        ry = float(parts[16])
        center = _cam_to_velo(xyz_cam, tr, rect)
        center[2] += h / 2.0  # label gives the bottom center
        box = BBox3D(center, (l, w, h), -ry - np.pi / 2.0)
        cloud = _load_velodyne(scene / "velodyne" / f"{frame_idx:06d}.bin")
        frames.append((frame_idx, cloud, box))

    frames.sort(key=lambda f: f[0])
    return Tracklet([(cloud, box) for _, cloud, box in frames], category)


# ---------------------------------------------------------------------------
# template / search construction
# ---------------------------------------------------------------------------

def resample_indices(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices realizing random discard (n > count) or duplication
    (n < count).  Duplication keeps every distinct input point."""
    if n <= 0:
        raise InvalidArgumentError("cannot resample an empty set")
    if n == count:
        return np.arange(n)
    if n > count:
        return rng.choice(n, size=count, replace=False)
    extra = rng.choice(n, size=count - n, replace=True)
    return np.concatenate([np.arange(n), extra])


def jitter_box(box: BBox3D, cfg: CropConfig, rng: np.random.Generator) -> BBox3D:
    """Training augmentation: uniform horizontal offset and yaw perturbation."""
    j = cfg.jitter_xy
    dyaw = np.deg2rad(cfg.jitter_yaw_deg)
    center = box.center + np.array([rng.uniform(-j, j), rng.uniform(-j, j), 0.0])
    return BBox3D(center, box.size.copy(), box.yaw + rng.uniform(-dyaw, dyaw))


def build_template(tracklet: Tracklet, frame_idx: int, prev_box: BBox3D,
                   cfg: CropConfig, rng: np.random.Generator) -> PointCloud:
    """Union of the first-frame GT crop and the previous-frame crop around
    ``prev_box`` (jittered GT while training, predicted box at inference),
    each canonicalized to its own box so the object shapes overlay, then
    resampled to exactly ``template_size`` points."""
    if frame_idx < 1:
        raise InvalidArgumentError("template construction needs frame_idx >= 1")
    first_cloud, first_gt = tracklet.frames[0]
    crops = []
    mask0 = points_in_box(first_cloud, first_gt)
    if mask0.any():
        crops.append(canonicalize(PointCloud(first_cloud.points[mask0]), first_gt).points)
    prev_cloud = tracklet.cloud(frame_idx - 1)
    mask_p = points_in_box(prev_cloud, prev_box)
    if mask_p.any():
        crops.append(canonicalize(PointCloud(prev_cloud.points[mask_p]), prev_box).points)
    if not crops:
        raise EmptyRegionError("template")
    merged = np.vstack(crops)
    idx = resample_indices(merged.shape[0], cfg.template_size, rng)
    return PointCloud(merged[idx])


def build_search_area(cloud: PointCloud, prev_box: BBox3D, cfg: CropConfig,
                      rng: np.random.Generator) -> PointCloud:
    """Points within ``prev_box`` enlarged by ``search_offset`` on the x/y
    half-extents (z passes a fixed +-``search_z_band`` band), canonicalized
    to the box frame and resampled to exactly ``search_size`` points."""
    canon = canonicalize(cloud, prev_box)
    hx = prev_box.size[0] / 2.0 + cfg.search_offset
    hy = prev_box.size[1] / 2.0 + cfg.search_offset
    pts = canon.points
    mask = ((np.abs(pts[:, 0]) <= hx) & (np.abs(pts[:, 1]) <= hy)
            & (np.abs(pts[:, 2]) <= cfg.search_z_band))
    if not mask.any():
        raise EmptyRegionError("search")
    region = pts[mask]
    idx = resample_indices(region.shape[0], cfg.search_size, rng)
    return PointCloud(region[idx])

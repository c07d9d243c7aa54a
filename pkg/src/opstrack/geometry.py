"""Oriented 3-D boxes, point membership, rotated IoU, rigid-frame transforms,
and the one-pass-evaluation metric pair.

Conventions: boxes are (center, size, yaw) with ``size = (length, width,
height)``, length along the box's local x axis, yaw a right-handed rotation
about world z, normalized to (-pi, pi].  Membership tests are boundary
inclusive, so points exactly on a face count as inside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgumentError


def normalize_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    wrapped = np.remainder(theta + np.pi, 2 * np.pi) - np.pi
    if wrapped == -np.pi:
        wrapped = np.pi
    return float(wrapped)


@dataclass
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise InvalidArgumentError("point cloud contains non-finite coordinates")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.points.shape[0]:
                raise InvalidArgumentError("intensity length does not match points")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class BBox3D:
    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.center)) and np.all(np.isfinite(self.size))):
            raise InvalidArgumentError("box has non-finite fields")
        if np.any(self.size <= 0):
            raise InvalidArgumentError(f"box size components must be > 0: {self.size}")
        self.yaw = normalize_angle(float(self.yaw))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def enlarged(self, dx: float, dy: float, dz: float = 0.0) -> "BBox3D":
        return BBox3D(self.center.copy(),
                      self.size + 2.0 * np.array([dx, dy, dz]), self.yaw)

    def corners_bev(self) -> np.ndarray:
        """(4, 2) footprint corners, counterclockwise."""
        hl, hw = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


def points_in_box(pc: PointCloud | np.ndarray, box: BBox3D) -> np.ndarray:
    """Boolean mask of points inside the yaw-rotated box (boundary inclusive)."""
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if pts.size == 0:
        return np.zeros(0, dtype=bool)
    return kernels.box_mask(pts, box.center, box.size, box.yaw)


def canonicalize(pc: PointCloud, frame: BBox3D) -> PointCloud:
    """Express ``pc`` in the frame where ``frame``'s center is the origin and
    its yaw is zero.  Rigid: pairwise distances are preserved."""
    pts = pc.points - frame.center
    c, s = np.cos(-frame.yaw), np.sin(-frame.yaw)
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    out[:, 2] = pts[:, 2]
    return PointCloud(out, None if pc.intensity is None else pc.intensity.copy())


def box_in_frame(box: BBox3D, frame: BBox3D) -> BBox3D:
    """``box`` expressed in ``frame``'s canonical coordinates."""
    d = box.center - frame.center
    c, s = np.cos(-frame.yaw), np.sin(-frame.yaw)
    center = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]])
    return BBox3D(center, box.size.copy(), box.yaw - frame.yaw)


def box_to_world(box: BBox3D, frame: BBox3D) -> BBox3D:
    """Inverse of :func:`box_in_frame`."""
    c, s = np.cos(frame.yaw), np.sin(frame.yaw)
    x, y, z = box.center
    center = np.array([c * x - s * y, s * x + c * y, z]) + frame.center
    return BBox3D(center, box.size.copy(), box.yaw + frame.yaw)


# ---------------------------------------------------------------------------
# rotated IoU via convex polygon clipping
# ---------------------------------------------------------------------------

def _clip_polygon(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``poly`` left of (or on) the directed edge a->b."""
    edge = b - a
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        side_p = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        side_q = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        inside_p = side_p >= -1e-12
        inside_q = side_q >= -1e-12
        if inside_p:
            out.append(p)
        if inside_p != inside_q:
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return out


def _polygon_area(poly: list) -> float:
    if len(poly) < 3:
        return 0.0
    arr = np.array(poly)
    x, y = arr[:, 0], arr[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_area(subject: BBox3D, clipper: BBox3D) -> float:
    poly = [p for p in subject.corners_bev()]
    cb = clipper.corners_bev()
    for i in range(4):
        poly = _clip_polygon(poly, cb[i], cb[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(poly)


def bev_intersection_area(a: BBox3D, b: BBox3D) -> float:
    # averaging both clip orders makes the result exactly symmetric
    return 0.5 * (_clip_area(a, b) + _clip_area(b, a))


def iou3d(a: BBox3D, b: BBox3D) -> float:
    """Intersection over union of two oriented boxes.

    Overlap is an exact rotated-rectangle intersection in the x-y plane times
    the z extent overlap.  Symmetric; 1 for identical boxes, 0 for disjoint.
    Volumes are taken from the same footprint-area representation as the
    intersection, so identical boxes score exactly 1.0.
    """
    if a.volume <= 0 or b.volume <= 0:
        raise InvalidArgumentError("iou3d is undefined for zero-volume boxes")
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    z_overlap = min(za1, zb1) - max(za0, zb0)
    if z_overlap <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * z_overlap
    # volumes reuse the footprint-area and z-endpoint arithmetic of the
    # intersection so that identical boxes divide out to exactly 1.0
    vol_a = _polygon_area(list(a.corners_bev())) * (za1 - za0)
    vol_b = _polygon_area(list(b.corners_bev())) * (zb1 - zb0)
    union = vol_a + vol_b - inter
    return float(np.clip(inter / union, 0.0, 1.0))


def center_distance(a: BBox3D, b: BBox3D) -> float:
    return float(np.linalg.norm(a.center - b.center))


# ---------------------------------------------------------------------------
# one pass evaluation
# ---------------------------------------------------------------------------

OPE_GRID_POINTS = 101
PRECISION_MAX_METERS = 2.0


@dataclass
class TrackResult:
    """Per-frame predictions with their IoU and center distance vs GT."""

    boxes: list = field(default_factory=list)
    ious: np.ndarray = field(default_factory=lambda: np.zeros(0))
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.ious = np.asarray(self.ious, dtype=np.float64).reshape(-1)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if self.ious.shape != self.distances.shape:
            raise InvalidArgumentError("ious/distances length mismatch")
        if np.any((self.ious < 0) | (self.ious > 1)):
            raise InvalidArgumentError("IoU values must lie in [0, 1]")
        if np.any(self.distances < 0):
            raise InvalidArgumentError("distances must be >= 0")

    @property
    def num_frames(self) -> int:
        return self.ious.shape[0]


def ope_metrics(result: TrackResult) -> tuple[float, float]:
    """(success, precision) percentages on fixed 101-point threshold grids.

    Success averages the fraction of frames with IoU >= t over t in [0, 1];
    because the grid includes the t = 0 endpoint, an all-zero-IoU run scores
    100/101, not 0.  Precision averages the fraction of frames with center
    distance <= e over e in [0, 2 m].
    """
    if result.num_frames == 0:
        raise InvalidArgumentError("ope_metrics needs at least one frame")
    t = np.linspace(0.0, 1.0, OPE_GRID_POINTS)
    e = np.linspace(0.0, PRECISION_MAX_METERS, OPE_GRID_POINTS)
    success = (result.ious[None, :] >= t[:, None]).mean() * 100.0
    precision = (result.distances[None, :] <= e[:, None]).mean() * 100.0
    return float(success), float(precision)

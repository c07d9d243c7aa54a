"""Hot geometric kernels: numba-jitted loops with a pure-numpy fallback.

Backend selection
-----------------
The env var ``OPSTRACK_KERNELS`` picks the implementation at import time:
``"numba"`` (default when numba is importable) or ``"numpy"``.
:func:`set_backend` switches at runtime; ``benchmarks/bench_kernels.py``
times one against the other.

Both backends are written from the same scalar recurrences, in the same
evaluation order, so they return identical indices (tested).  Distances are
compared as squared values; ties resolve to the lowest index in both paths.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from .errors import InvalidArgumentError

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on numba-free installs
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


_VALID_BACKENDS = ("numba", "numpy")
_backend = os.environ.get("OPSTRACK_KERNELS", "numba" if HAVE_NUMBA else "numpy")
if _backend not in _VALID_BACKENDS:
    warnings.warn(f"unknown OPSTRACK_KERNELS={_backend!r}, using numpy", stacklevel=1)
    _backend = "numpy"
if _backend == "numba" and not HAVE_NUMBA:
    warnings.warn("numba not importable, falling back to numpy kernels", stacklevel=1)
    _backend = "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _VALID_BACKENDS:
        raise InvalidArgumentError(f"backend must be one of {_VALID_BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise InvalidArgumentError("numba backend requested but numba is not installed")
    _backend = name


# ---------------------------------------------------------------------------
# furthest point sampling
# ---------------------------------------------------------------------------

def _fps_numpy(coords: np.ndarray, k: int, start: int) -> np.ndarray:
    n = coords.shape[0]
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    out = np.empty(k, dtype=np.int64)
    # min squared distance to the chosen set; chosen points are pinned to -1
    # so they can never win the argmax again (keeps indices distinct even on
    # fully duplicated clouds).
    dist = np.full(n, np.inf, dtype=coords.dtype)
    sel = start
    for i in range(k):
        out[i] = sel
        dist[sel] = -1.0
        dx = x - x[sel]
        dy = y - y[sel]
        dz = z - z[sel]
        d2 = dx * dx + dy * dy + dz * dz
        np.minimum(dist, np.where(dist < 0, dist, d2), out=dist)
        if i + 1 < k:
            sel = int(np.argmax(dist))
    return out


@njit(cache=True)
def _fps_numba(coords, k, start):  # pragma: no cover - jitted
    n = coords.shape[0]
    out = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf, dtype=coords.dtype)
    sel = start
    for i in range(k):
        out[i] = sel
        dist[sel] = -1.0
        cx = coords[sel, 0]
        cy = coords[sel, 1]
        cz = coords[sel, 2]
        best = -1.0
        nxt = 0
        for j in range(n):
            if dist[j] >= 0.0:
                dx = coords[j, 0] - cx
                dy = coords[j, 1] - cy
                dz = coords[j, 2] - cz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < dist[j]:
                    dist[j] = d2
            if dist[j] > best:
                best = dist[j]
                nxt = j
        if i + 1 < k:
            sel = nxt
    return out


def furthest_point_indices(coords: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``k`` distinct point indices, seeded at ``start``."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"fps requires 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= start < n:
        raise InvalidArgumentError(f"fps start index {start} out of range for n={n}")
    if _backend == "numba":
        return _fps_numba(coords, k, start)
    return _fps_numpy(coords, k, start)


# ---------------------------------------------------------------------------
# ball query
# ---------------------------------------------------------------------------

def _ball_query_numpy(centers, coords, radius, max_samples):
    k = centers.shape[0]
    r2 = radius * radius
    out = np.empty((k, max_samples), dtype=np.int64)
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    for i in range(k):
        dx = x - centers[i, 0]
        dy = y - centers[i, 1]
        dz = z - centers[i, 2]
        d2 = dx * dx + dy * dy + dz * dz
        hits = np.flatnonzero(d2 <= r2)[:max_samples]
        if hits.size == 0:
            hits = np.array([np.argmin(d2)], dtype=np.int64)
        out[i, : hits.size] = hits
        out[i, hits.size:] = hits[0]
    return out


@njit(cache=True)
def _ball_query_numba(centers, coords, radius, max_samples):  # pragma: no cover
    k = centers.shape[0]
    n = coords.shape[0]
    r2 = radius * radius
    out = np.empty((k, max_samples), dtype=np.int64)
    for i in range(k):
        cx = centers[i, 0]
        cy = centers[i, 1]
        cz = centers[i, 2]
        found = 0
        best = np.inf
        nearest = 0
        for j in range(n):
            dx = coords[j, 0] - cx
            dy = coords[j, 1] - cy
            dz = coords[j, 2] - cz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
                nearest = j
            if d2 <= r2 and found < max_samples:
                out[i, found] = j
                found += 1
        if found == 0:
            out[i, 0] = nearest
            found = 1
        first = out[i, 0]
        for s in range(found, max_samples):
            out[i, s] = first
    return out


def ball_query(centers: np.ndarray, coords: np.ndarray, radius: float,
               max_samples: int) -> np.ndarray:
    """Indices of up to ``max_samples`` points within ``radius`` of each center.

    Neighbors are taken in ascending index order.  A center with no point in
    range falls back to its single nearest point; rows shorter than
    ``max_samples`` are padded by repeating the first neighbor.
    """
    if radius <= 0:
        raise InvalidArgumentError(f"ball query radius must be > 0, got {radius}")
    if max_samples < 1:
        raise InvalidArgumentError("max_samples must be >= 1")
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if _backend == "numba":
        return _ball_query_numba(centers, coords, float(radius), max_samples)
    return _ball_query_numpy(centers, coords, float(radius), max_samples)


# ---------------------------------------------------------------------------
# oriented-box membership
# ---------------------------------------------------------------------------

def _box_mask_numpy(points, cx, cy, cz, hx, hy, hz, c, s):
    dx = points[:, 0] - cx
    dy = points[:, 1] - cy
    dz = points[:, 2] - cz
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= hx) & (np.abs(ly) <= hy) & (np.abs(dz) <= hz)


@njit(cache=True)
def _box_mask_numba(points, cx, cy, cz, hx, hy, hz, c, s):  # pragma: no cover
    n = points.shape[0]
    out = np.empty(n, dtype=np.bool_)
    for i in range(n):
        dx = points[i, 0] - cx
        dy = points[i, 1] - cy
        dz = points[i, 2] - cz
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        out[i] = (abs(lx) <= hx) and (abs(ly) <= hy) and (abs(dz) <= hz)
    return out


def box_mask(points: np.ndarray, center, size, yaw: float) -> np.ndarray:
    """Boundary-inclusive membership of points in a yaw-rotated box."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.size == 0:
        return np.zeros(0, dtype=bool)
    c = np.cos(yaw)
    s = np.sin(yaw)
    hx, hy, hz = size[0] / 2.0, size[1] / 2.0, size[2] / 2.0
    args = (points, float(center[0]), float(center[1]), float(center[2]),
            float(hx), float(hy), float(hz), float(c), float(s))
    if _backend == "numba":
        return _box_mask_numba(*args)
    return _box_mask_numpy(*args)


# ---------------------------------------------------------------------------
# voxel scatter
# ---------------------------------------------------------------------------

def _scatter_add_numpy(values, cells, num_cells):
    sums = np.zeros((num_cells, values.shape[1]), dtype=values.dtype)
    counts = np.zeros(num_cells, dtype=np.int64)
    np.add.at(sums, cells, values)
    np.add.at(counts, cells, 1)
    return sums, counts


@njit(cache=True)
def _scatter_add_numba(values, cells, num_cells):  # pragma: no cover
    m, c = values.shape
    sums = np.zeros((num_cells, c), dtype=values.dtype)
    counts = np.zeros(num_cells, dtype=np.int64)
    for i in range(m):
        cell = cells[i]
        counts[cell] += 1
        for j in range(c):
            sums[cell, j] += values[i, j]
    return sums, counts


def scatter_add(values: np.ndarray, cells: np.ndarray, num_cells: int):
    """Per-cell sums and member counts; rows of ``values`` land in ``cells``."""
    values = np.ascontiguousarray(values)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    if values.shape[0] != cells.shape[0]:
        raise InvalidArgumentError("values and cells must align on axis 0")
    if _backend == "numba":
        return _scatter_add_numba(values, cells, num_cells)
    return _scatter_add_numpy(values, cells, num_cells)


# ---------------------------------------------------------------------------
# fused batch-norm / activation passes (the dense-layer hot path)
# ---------------------------------------------------------------------------
# act codes: 0 = none, 1 = relu, 2 = sigmoid

ACT_NONE, ACT_RELU, ACT_SIGMOID = 0, 1, 2


def _apply_act_numpy(y, act):
    if act == ACT_RELU:
        return np.where(y > 0, y, y.dtype.type(0))
    if act == ACT_SIGMOID:
        return 1.0 / (1.0 + np.exp(-np.clip(y, -88, 88)))
    return y


@njit(inline="always")
def _act_scalar(y, act):  # pragma: no cover
    if act == 1:
        return y if y > 0 else y * 0
    if act == 2:
        return 1.0 / (1.0 + np.exp(-y))
    return y


def _bn_act_train_fwd_numpy(z, gamma, beta, eps):
    mu = z.mean(axis=0)
    centered = z - mu
    var = (centered * centered).mean(axis=0)
    std = np.sqrt(var + eps)
    xhat = centered / std
    y = xhat * gamma + beta
    return y, xhat, std, mu, var


@njit(cache=True)
def _bn_act_train_fwd_numba(z, gamma, beta, eps, act):  # pragma: no cover
    n, d = z.shape
    mu = np.zeros(d, dtype=z.dtype)
    var = np.zeros(d, dtype=z.dtype)
    for i in range(n):
        for j in range(d):
            mu[j] += z[i, j]
    for j in range(d):
        mu[j] /= n
    for i in range(n):
        for j in range(d):
            diff = z[i, j] - mu[j]
            var[j] += diff * diff
    std = np.empty(d, dtype=z.dtype)
    for j in range(d):
        var[j] /= n
        std[j] = np.sqrt(var[j] + eps)
    xhat = np.empty_like(z)
    y = np.empty_like(z)
    for i in range(n):
        for j in range(d):
            xh = (z[i, j] - mu[j]) / std[j]
            xhat[i, j] = xh
            y[i, j] = _act_scalar(xh * gamma[j] + beta[j], act)
    return y, xhat, std, mu, var


def bn_act_train_fwd(z, gamma, beta, eps, act):
    """Batch stats + normalize + affine + activation in one pass.

    Returns (out, xhat, std, mean, var); mean/var feed the running buffers.
    """
    if _backend == "numba":
        return _bn_act_train_fwd_numba(np.ascontiguousarray(z), gamma, beta,
                                       z.dtype.type(eps), act)
    y, xhat, std, mu, var = _bn_act_train_fwd_numpy(z, gamma, beta, eps)
    return _apply_act_numpy(y, act), xhat, std, mu, var


def _bn_act_eval_fwd_numpy(z, gamma, beta, rmean, rvar, eps):
    std = np.sqrt(rvar + eps)
    xhat = (z - rmean) / std
    return xhat * gamma + beta, xhat, std


@njit(cache=True)
def _bn_act_eval_fwd_numba(z, gamma, beta, rmean, rvar, eps, act):  # pragma: no cover
    n, d = z.shape
    std = np.empty(d, dtype=z.dtype)
    for j in range(d):
        std[j] = np.sqrt(rvar[j] + eps)
    xhat = np.empty_like(z)
    y = np.empty_like(z)
    for i in range(n):
        for j in range(d):
            xh = (z[i, j] - rmean[j]) / std[j]
            xhat[i, j] = xh
            y[i, j] = _act_scalar(xh * gamma[j] + beta[j], act)
    return y, xhat, std


def bn_act_eval_fwd(z, gamma, beta, rmean, rvar, eps, act):
    if _backend == "numba":
        return _bn_act_eval_fwd_numba(
            np.ascontiguousarray(z), gamma, beta,
            rmean.astype(z.dtype), rvar.astype(z.dtype), z.dtype.type(eps), act)
    y, xhat, std = _bn_act_eval_fwd_numpy(z, gamma, beta, rmean, rvar, eps)
    return _apply_act_numpy(y, act), xhat, std


def _act_bwd_numpy(g, out, act):
    if act == ACT_RELU:
        return g * (out > 0)
    if act == ACT_SIGMOID:
        return g * out * (1.0 - out)
    return g


def _bn_bwd_numpy(gy, xhat, std, gamma, training):
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    if training:
        n = gy.shape[0]
        gz = (gamma / std) * (gy - gbeta / n - xhat * (ggamma / n))
    else:
        gz = gy * (gamma / std)
    return gz, ggamma, gbeta


@njit(cache=True)
def _bn_act_bwd_numba(g, out, xhat, std, gamma, act, training):  # pragma: no cover
    n, d = g.shape
    ggamma = np.zeros(d, dtype=g.dtype)
    gbeta = np.zeros(d, dtype=g.dtype)
    gy = np.empty_like(g)
    for i in range(n):
        for j in range(d):
            gv = g[i, j]
            if act == 1:
                gv = gv if out[i, j] > 0 else g.dtype.type(0)
            elif act == 2:
                gv = gv * out[i, j] * (1.0 - out[i, j])
            gy[i, j] = gv
            ggamma[j] += gv * xhat[i, j]
            gbeta[j] += gv
    gz = np.empty_like(g)
    if training:
        for i in range(n):
            for j in range(d):
                gz[i, j] = (gamma[j] / std[j]) * (
                    gy[i, j] - gbeta[j] / n - xhat[i, j] * ggamma[j] / n)
    else:
        for i in range(n):
            for j in range(d):
                gz[i, j] = gy[i, j] * gamma[j] / std[j]
    return gz, ggamma, gbeta


def bn_act_bwd(g, out, xhat, std, gamma, act, training):
    """Backward through activation + batch norm; returns (gz, ggamma, gbeta)."""
    if _backend == "numba":
        return _bn_act_bwd_numba(np.ascontiguousarray(g), out, xhat, std,
                                 gamma, act, training)
    gy = _act_bwd_numpy(g, out, act)
    return _bn_bwd_numpy(gy, xhat, std, gamma, training)


def act_bwd(g, out, act):
    return _act_bwd_numpy(g, out, act)


# ---------------------------------------------------------------------------
# pairwise difference pooling (discrepant correlation inner loop)
# ---------------------------------------------------------------------------
# pooled[j, k] = max_i qf[i, k] * (qw[i, k] - rw[j, k] + b[k])

def _pairwise_diff_pool_numpy(qf, qw, rw, b):
    weights = qw[:, None, :] - rw[None, :, :] + b
    prod = qf[:, None, :] * weights
    amax = np.argmax(prod, axis=0)
    pooled = np.take_along_axis(prod, amax[None, :, :], axis=0)[0]
    return pooled, amax.astype(np.int64)


@njit(cache=True)
def _pairwise_diff_pool_numba(qf, qw, rw, b):  # pragma: no cover
    n, d = qf.shape
    m = rw.shape[0]
    pooled = np.empty((m, d), dtype=qf.dtype)
    amax = np.empty((m, d), dtype=np.int64)
    for j in range(m):
        for k in range(d):
            best = qf[0, k] * (qw[0, k] - rw[j, k] + b[k])
            arg = 0
            for i in range(1, n):
                val = qf[i, k] * (qw[i, k] - rw[j, k] + b[k])
                if val > best:
                    best = val
                    arg = i
            pooled[j, k] = best
            amax[j, k] = arg
    return pooled, amax


def pairwise_diff_pool(qf, qw, rw, b):
    """Max over template seeds of qf * (qw - rw + b); returns (pooled, argmax)."""
    if _backend == "numba":
        return _pairwise_diff_pool_numba(np.ascontiguousarray(qf),
                                         np.ascontiguousarray(qw),
                                         np.ascontiguousarray(rw),
                                         np.ascontiguousarray(b))
    return _pairwise_diff_pool_numpy(qf, qw, rw, b)


def _pairwise_diff_pool_bwd_numpy(g, qf, qw, rw, b, amax):
    m, d = g.shape
    cols = np.arange(d)
    w_sel = qw[amax, cols] - rw + b  # (m, d) winning difference weights
    qf_sel = qf[amax, cols]
    g_qf = np.zeros_like(qf)
    g_qw = np.zeros_like(qw)
    np.add.at(g_qf, (amax, np.broadcast_to(cols, (m, d))), g * w_sel)
    np.add.at(g_qw, (amax, np.broadcast_to(cols, (m, d))), g * qf_sel)
    g_rw = -g * qf_sel
    g_b = (g * qf_sel).sum(axis=0)
    return g_qf, g_qw, g_rw, g_b


@njit(cache=True)
def _pairwise_diff_pool_bwd_numba(g, qf, qw, rw, b, amax):  # pragma: no cover
    m, d = g.shape
    g_qf = np.zeros_like(qf)
    g_qw = np.zeros_like(qw)
    g_rw = np.empty_like(rw)
    g_b = np.zeros(d, dtype=qf.dtype)
    for j in range(m):
        for k in range(d):
            i = amax[j, k]
            gv = g[j, k]
            w = qw[i, k] - rw[j, k] + b[k]
            q = qf[i, k]
            g_qf[i, k] += gv * w
            g_qw[i, k] += gv * q
            g_rw[j, k] = -gv * q
            g_b[k] += gv * q
    return g_qf, g_qw, g_rw, g_b


def pairwise_diff_pool_bwd(g, qf, qw, rw, b, amax):
    if _backend == "numba":
        return _pairwise_diff_pool_bwd_numba(np.ascontiguousarray(g), qf, qw,
                                             rw, b, amax)
    return _pairwise_diff_pool_bwd_numpy(g, qf, qw, rw, b, amax)


# ---------------------------------------------------------------------------
# neighbor max pooling over fixed-size groups
# ---------------------------------------------------------------------------

def _maxpool_rows_numpy(h, s):
    k = h.shape[0] // s
    grouped = h.reshape(k, s, h.shape[1])
    amax = np.argmax(grouped, axis=1)
    pooled = np.take_along_axis(grouped, amax[:, None, :], axis=1)[:, 0]
    return pooled, amax.astype(np.int64)


@njit(cache=True)
def _maxpool_rows_numba(h, s):  # pragma: no cover
    rows, d = h.shape
    k = rows // s
    pooled = np.empty((k, d), dtype=h.dtype)
    amax = np.empty((k, d), dtype=np.int64)
    for c in range(k):
        base = c * s
        for j in range(d):
            best = h[base, j]
            arg = 0
            for i in range(1, s):
                v = h[base + i, j]
                if v > best:
                    best = v
                    arg = i
            pooled[c, j] = best
            amax[c, j] = arg
    return pooled, amax


def maxpool_rows(h, s):
    """Per-column max over consecutive groups of ``s`` rows; first-argmax ties."""
    if h.shape[0] % s != 0:
        raise InvalidArgumentError("row count must be divisible by group size")
    if _backend == "numba":
        return _maxpool_rows_numba(np.ascontiguousarray(h), s)
    return _maxpool_rows_numpy(h, s)


def _maxpool_rows_bwd_numpy(g, amax, s):
    k, d = g.shape
    out = np.zeros((k * s, d), dtype=g.dtype)
    grouped = out.reshape(k, s, d)
    np.put_along_axis(grouped, amax[:, None, :], g[:, None, :], axis=1)
    return out


@njit(cache=True)
def _maxpool_rows_bwd_numba(g, amax, s):  # pragma: no cover
    k, d = g.shape
    out = np.zeros((k * s, d), dtype=g.dtype)
    for c in range(k):
        base = c * s
        for j in range(d):
            out[base + amax[c, j], j] = g[c, j]
    return out


def maxpool_rows_bwd(g, amax, s):
    if _backend == "numba":
        return _maxpool_rows_bwd_numba(np.ascontiguousarray(g), amax, s)
    return _maxpool_rows_bwd_numpy(g, amax, s)


def warmup() -> None:
    """Trigger jit compilation of every kernel (no-op on the numpy backend)."""
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    furthest_point_indices(pts, 2)
    ball_query(pts[:1], pts, 0.5, 2)
    box_mask(pts, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
    scatter_add(pts, np.array([0, 1, 0]), 4)
    for dtype in (np.float32, np.float64):
        z = np.ones((4, 3), dtype=dtype)
        one = np.ones(3, dtype=dtype)
        out, xhat, std, _, _ = bn_act_train_fwd(z, one, one * 0, 1e-5, ACT_RELU)
        bn_act_eval_fwd(z, one, one * 0, one * 0, one, 1e-5, ACT_NONE)
        bn_act_bwd(z.copy(), out, xhat, std, one, ACT_RELU, True)

"""Learnable blocks: MLPs, batch norm, cross-attention, 2-D convolution,
the Adam optimizer with its step-decay schedule, finite-difference gradient
checking, and the checkpoint container.

Checkpoint format (``*.ckpt``)
------------------------------
``b"OPSCKPT1"`` magic, a little-endian uint64 header length, a UTF-8 JSON
header, then the concatenated payload.  The header carries a manifest
(``config_hash``, ``epoch``) plus one entry per array:
``{"path", "shape", "offset"}``.  Payloads are raw little-endian float32,
written in entry order.  Parameters and buffers (batch-norm statistics)
share the same namespace.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, make_op
from .errors import CheckpointError, DivergenceError, InvalidArgumentError

ACTIVATIONS = ("none", "relu", "sigmoid")


class Module:
    """Parameter container with torch-flavoured attribute discovery.

    Tensors assigned as attributes with ``requires_grad`` are parameters;
    child modules (directly, or inside plain lists/tuples) are traversed
    recursively.  Non-differentiable state goes through
    :meth:`register_buffer`.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray):
        if name not in self._buffers:
            raise InvalidArgumentError(f"unknown buffer {name!r}")
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, self._buffers[name]
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_state(self):
        yield from self.named_parameters()
        yield from self.named_buffers()

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for path, val in self.named_state():
            out[path] = val.data.copy() if isinstance(val, Tensor) else val.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own_params = dict(self.named_parameters())
        own_buffers = {}
        for name, child in [("", self)] + [(n, c) for n, c in self._walk_modules()]:
            prefix = name + "." if name else ""
            for bname in child._buffers:
                own_buffers[prefix + bname] = (child, bname)
        for path, arr in state.items():
            if path in own_params:
                p = own_params.pop(path)
                if tuple(p.shape) != tuple(arr.shape):
                    raise CheckpointError(f"shape mismatch for {path}: "
                                          f"{arr.shape} vs {p.shape}")
                p.data = np.asarray(arr, dtype=p.dtype)
            elif path in own_buffers:
                child, bname = own_buffers.pop(path)
                cur = child._buffers[bname]
                child.set_buffer(bname, np.asarray(arr, dtype=cur.dtype).reshape(cur.shape))
            else:
                raise CheckpointError(f"unexpected entry {path!r} in checkpoint")
        if own_params:
            missing = sorted(own_params)
            raise CheckpointError(f"checkpoint missing parameters: {missing[:5]}...")

    def _walk_modules(self, prefix: str = ""):
        for name, child in self._children():
            full = prefix + name
            yield full, child
            yield from child._walk_modules(full + ".")


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(_uniform_init(rng, (in_dim, out_dim), in_dim, dtype),
                             requires_grad=True)
        self.bias = (Tensor(_uniform_init(rng, (out_dim,), in_dim, dtype),
                            requires_grad=True) if bias else None)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise InvalidArgumentError(
                f"linear layer expects width {self.in_dim}, got {x.shape[-1]}")
        if x.ndim != 2:
            return ad.matmul(x, self.weight) + self.bias if self.bias is not None \
                else ad.matmul(x, self.weight)
        # fused x @ W + b: one tape node instead of two
        x_t, w, b = x, self.weight, self.bias
        out_data = x.data @ w.data
        if b is not None:
            out_data += b.data

        def bwd(g):
            if x_t.requires_grad:
                _accum_nn(x_t, g @ w.data.T)
            if w.requires_grad:
                _accum_nn(w, x_t.data.T @ g)
            if b is not None and b.requires_grad:
                _accum_nn(b, g.sum(axis=0))

        parents = (x_t, w) if b is None else (x_t, w, b)
        return make_op(out_data, parents, bwd)

    __call__ = forward


class BatchNorm1d(Module):
    """Normalizes over axis 0 of a (rows, channels) matrix.

    Training uses biased batch statistics and updates the running estimates
    with momentum 0.1; eval mode applies the frozen statistics, so repeated
    eval calls on the same input agree bitwise.
    """

    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(dim, dtype=dtype))
        self.register_buffer("running_var", np.ones(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise InvalidArgumentError(
                f"batch norm expects width {self.dim}, got {x.shape[-1]}")
        gamma, beta = self.gamma, self.beta
        if self.training:
            n = x.shape[0]
            mu = x.data.mean(axis=0)
            centered = x.data - mu
            var = (centered * centered).mean(axis=0)
            std = np.sqrt(var + self.eps)
            xhat = centered / std
            m = self.momentum
            self.set_buffer("running_mean", (1 - m) * self.running_mean + m * mu)
            self.set_buffer("running_var", (1 - m) * self.running_var + m * var)

            def bwd_train(g):
                # closed-form batch-norm backward (biased batch statistics)
                if gamma.requires_grad:
                    _accum_nn(gamma, (g * xhat).sum(axis=0))
                if beta.requires_grad:
                    _accum_nn(beta, g.sum(axis=0))
                if x.requires_grad:
                    gx = (gamma.data / std) * (
                        g - g.mean(axis=0)
                        - xhat * (g * xhat).sum(axis=0) / n)
                    _accum_nn(x, gx)

            return make_op(xhat * gamma.data + beta.data, (x, gamma, beta),
                           bwd_train)

        std = np.sqrt(self.running_var + self.eps)
        xhat = (x.data - self.running_mean) / std

        def bwd_eval(g):
            if gamma.requires_grad:
                _accum_nn(gamma, (g * xhat).sum(axis=0))
            if beta.requires_grad:
                _accum_nn(beta, g.sum(axis=0))
            if x.requires_grad:
                _accum_nn(x, g * (gamma.data / std))

        return make_op(xhat * gamma.data + beta.data, (x, gamma, beta), bwd_eval)

    __call__ = forward


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, h1, ..., out]`` plus normalization/activation flags."""

    widths: tuple
    use_batchnorm: bool = False
    final_activation: str = "none"
    final_batchnorm: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise InvalidArgumentError("an MLP needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise InvalidArgumentError(f"non-positive width in {self.widths}")
        if self.final_activation not in ACTIVATIONS:
            raise InvalidArgumentError(
                f"final_activation must be one of {ACTIVATIONS}")


def dense_layer(x: Tensor, lin: Linear, bn: "BatchNorm1d | None",
                act: str) -> Tensor:
    """Fused linear -> (batch norm) -> activation as one tape node.

    Point-wise MLPs run on tens of thousands of rows; the matmul stays in
    BLAS while the normalization/activation chain runs through the fused
    kernel layer (numba or numpy per the backend flag), with a closed-form
    backward.
    """
    from . import kernels

    x = as_tensor(x)
    if x.shape[-1] != lin.in_dim:
        raise InvalidArgumentError(
            f"linear layer expects width {lin.in_dim}, got {x.shape[-1]}")
    w, b = lin.weight, lin.bias
    z = x.data @ w.data
    if b is not None:
        z += b.data
    act_code = {"none": kernels.ACT_NONE, "relu": kernels.ACT_RELU,
                "sigmoid": kernels.ACT_SIGMOID}[act]

    xhat = std = gamma = beta = None
    training_bn = False
    if bn is not None:
        gamma, beta = bn.gamma, bn.beta
        if bn.training:
            training_bn = True
            out_data, xhat, std, mu, var = kernels.bn_act_train_fwd(
                z, gamma.data, beta.data, bn.eps, act_code)
            m = bn.momentum
            bn.set_buffer("running_mean", (1 - m) * bn.running_mean + m * mu)
            bn.set_buffer("running_var", (1 - m) * bn.running_var + m * var)
        else:
            out_data, xhat, std = kernels.bn_act_eval_fwd(
                z, gamma.data, beta.data, bn.running_mean, bn.running_var,
                bn.eps, act_code)
    else:
        out_data = kernels._apply_act_numpy(z, act_code)

    def bwd(g):
        if bn is not None:
            g, ggamma, gbeta = kernels.bn_act_bwd(g, out_data, xhat, std,
                                                  gamma.data, act_code,
                                                  training_bn)
            if gamma.requires_grad:
                _accum_nn(gamma, ggamma)
            if beta.requires_grad:
                _accum_nn(beta, gbeta)
        else:
            g = kernels.act_bwd(g, out_data, act_code)
        if b is not None and b.requires_grad:
            _accum_nn(b, g.sum(axis=0))
        if w.requires_grad:
            _accum_nn(w, x.data.T @ g)
        if x.requires_grad:
            _accum_nn(x, g @ w.data.T)

    parents = [x, w]
    if b is not None:
        parents.append(b)
    if bn is not None:
        parents.extend([gamma, beta])
    return make_op(out_data, tuple(parents), bwd)


class MlpBlock(Module):
    """Stack of linear layers; hidden layers get (optional BN and) ReLU, the
    output layer gets ``final_activation`` (and, for the shared point-wise
    MLPs of the grouping stages, an optional final batch norm)."""

    def __init__(self, widths, rng: np.random.Generator, dtype=np.float64,
                 use_batchnorm: bool = False, final_activation: str = "none",
                 final_batchnorm: bool = False):
        super().__init__()
        self.spec = MlpSpec(tuple(widths), use_batchnorm, final_activation,
                            final_batchnorm)
        self.layers = [Linear(a, b, rng, dtype)
                       for a, b in zip(widths[:-1], widths[1:])]
        self.norms = ([BatchNorm1d(w, dtype) for w in widths[1:-1]]
                      if use_batchnorm else [])
        self.final_norm = BatchNorm1d(widths[-1], dtype) if final_batchnorm else None

    @property
    def in_dim(self):
        return self.spec.widths[0]

    @property
    def out_dim(self):
        return self.spec.widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        for i, layer in enumerate(self.layers[:-1]):
            x = dense_layer(x, layer, self.norms[i] if self.norms else None,
                            "relu")
        return dense_layer(x, self.layers[-1], self.final_norm,
                           self.spec.final_activation)

    __call__ = forward


def grouped_maxpool(h: Tensor, group_size: int) -> Tensor:
    """Per-column max over consecutive row groups (the set-abstraction pool);
    subgradient flows to the first argmax row of each group."""
    from . import kernels

    pooled, amax = kernels.maxpool_rows(h.data, group_size)

    def bwd(g):
        _accum_nn(h, kernels.maxpool_rows_bwd(np.ascontiguousarray(g), amax,
                                              group_size))

    return make_op(pooled, (h,), bwd)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor):
    """Single-head attention core; returns ``(output, weights)`` where each
    weight row sums to one."""
    d = q.shape[-1]
    scores = ad.matmul(q, k.T) * (1.0 / np.sqrt(d))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


class CrossAttentionBlock(Module):
    def __init__(self, model_dim: int, num_heads: int, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        if model_dim % num_heads != 0:
            raise InvalidArgumentError(
                f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.wq = Linear(model_dim, model_dim, rng, dtype)
        self.wk = Linear(model_dim, model_dim, rng, dtype)
        self.wv = Linear(model_dim, model_dim, rng, dtype)
        self.wo = Linear(model_dim, model_dim, rng, dtype)

    def forward(self, q: Tensor, k: Tensor, v: Tensor,
                return_weights: bool = False):
        if q.shape[-1] != self.model_dim or k.shape[-1] != self.model_dim \
                or v.shape[-1] != self.model_dim:
            raise InvalidArgumentError("attention inputs must have width model_dim")
        if k.shape[0] != v.shape[0]:
            raise InvalidArgumentError("key and value row counts differ")
        qp, kp, vp = self.wq(q), self.wk(k), self.wv(v)
        hd = self.model_dim // self.num_heads
        outs, weights = [], []
        for h in range(self.num_heads):
            sl = slice(h * hd, (h + 1) * hd)
            o, w = scaled_dot_attention(qp[:, sl], kp[:, sl], vp[:, sl])
            outs.append(o)
            weights.append(w)
        out = self.wo(outs[0] if len(outs) == 1 else ad.concat(outs, axis=1))
        if return_weights:
            return out, weights
        return out

    __call__ = forward


# ---------------------------------------------------------------------------
# 2-D convolution (same padding, stride 1)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(H, W, c_in) -> (H, W, c_out) convolution, zero-padded borders.

    ``weight`` has shape (kh, kw, c_in, c_out) with odd kernel dims.
    Implemented as one matmul per kernel offset.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgumentError("conv2d requires odd kernel dims for same padding")
    if x.ndim != 3 or x.shape[2] != cin:
        raise InvalidArgumentError(
            f"conv2d input channels {x.shape} do not match kernel {weight.shape}")
    H, W, _ = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((H + 2 * ph, W + 2 * pw, cin), dtype=x.dtype)
    padded[ph:ph + H, pw:pw + W] = x.data
    out_data = np.zeros((H, W, cout), dtype=x.dtype)
    w = weight.data
    for dy in range(kh):
        for dx in range(kw):
            patch = padded[dy:dy + H, dx:dx + W].reshape(H * W, cin)
            out_data += (patch @ w[dy, dx]).reshape(H, W, cout)
    if bias is not None:
        out_data += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(H * W, cout)
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for dy in range(kh):
                for dx in range(kw):
                    gpad[dy:dy + H, dx:dx + W] += (g2 @ w[dy, dx].T).reshape(H, W, cin)
            _accum_nn(x, gpad[ph:ph + H, pw:pw + W])
        if weight.requires_grad:
            gw = np.empty_like(w)
            for dy in range(kh):
                for dx in range(kw):
                    patch = padded[dy:dy + H, dx:dx + W].reshape(H * W, cin)
                    gw[dy, dx] = patch.T @ g2
            _accum_nn(weight, gw)
        if bias is not None and bias.requires_grad:
            _accum_nn(bias, g.sum(axis=(0, 1)))

    return make_op(out_data, parents, bwd)


def _accum_nn(t: Tensor, g: np.ndarray):
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        fan_in = kernel_size * kernel_size * in_channels
        self.weight = Tensor(
            _uniform_init(rng, (kernel_size, kernel_size, in_channels, out_channels),
                          fan_in, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    __call__ = forward


# ---------------------------------------------------------------------------
# Adam with step decay
# ---------------------------------------------------------------------------

@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    decay_factor: float = 5.0
    decay_epoch: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.decay_factor <= 0:
            raise InvalidArgumentError("decay_factor must be > 0")


class Adam:
    """Adam over named parameters.  The learning rate drops by
    ``decay_factor`` once the epoch counter passes ``decay_epoch``."""

    def __init__(self, named_params, config: OptimConfig | None = None):
        self.config = config or OptimConfig()
        self.params: dict[str, Tensor] = dict(named_params)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0
        self.epoch = 1

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def effective_lr(self, epoch: int | None = None) -> float:
        e = self.epoch if epoch is None else epoch
        lr = self.config.learning_rate
        return lr / self.config.decay_factor if e > self.config.decay_epoch else lr

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_entries(self) -> dict[str, np.ndarray]:
        """Moment arrays + step counter, namespaced for checkpoint storage."""
        out = {"optim.t": np.array([self.t], dtype=np.float64)}
        for path in self.params:
            out[f"optim.m.{path}"] = self.m[path]
            out[f"optim.v.{path}"] = self.v[path]
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray]):
        if "optim.t" in entries:
            self.t = int(entries["optim.t"].reshape(-1)[0])
        for path, p in self.params.items():
            for store, key in ((self.m, f"optim.m.{path}"),
                               (self.v, f"optim.v.{path}")):
                if key in entries:
                    store[path] = np.asarray(entries[key],
                                             dtype=p.dtype).reshape(p.shape)

    def step(self):
        cfg = self.config
        self.t += 1
        lr = self.effective_lr()
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for path, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient at parameter {path!r}")
            m = self.m[path]
            v = self.v[path]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / b1c
            vhat = v / b2c
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + cfg.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    tol: float
    worst_param: str = ""
    worst_index: tuple = ()
    checked: int = 0
    failure_reason: str = ""

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"grad check {status}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}) at {self.worst_param}{list(self.worst_index)} "
                f"over {self.checked} coordinates")


def grad_check(f, named_params, eps: float = 1e-5, tol: float = 1e-4,
               max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central
    finite differences.

    ``f`` must be deterministic and re-evaluable (eval-mode modules).  With
    ``max_coords_per_param`` set, a random coordinate subset per tensor is
    probed instead of every entry.  Relative error uses a small floor in the
    denominator so near-zero gradient pairs compare absolutely.
    """
    params = dict(named_params)
    for p in params.values():
        p.zero_grad()
    base = f()
    if not isinstance(base, Tensor) or base.size != 1:
        raise InvalidArgumentError("grad_check needs a scalar Tensor loss")
    if not np.isfinite(base.data):
        return GradCheckReport(False, np.inf, tol,
                               failure_reason="non-finite loss at base point")
    base.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    rng = rng or np.random.default_rng(0)
    worst = (0.0, "", ())
    checked = 0
    for path, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_hi = f().item()
            flat[c] = orig - eps
            f_lo = f().item()
            flat[c] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                return GradCheckReport(False, np.inf, tol, path,
                                       np.unravel_index(c, p.shape),
                                       checked, "non-finite loss at perturbed point")
            fd = (f_hi - f_lo) / (2 * eps)
            an = analytic[path].reshape(-1)[c]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
            checked += 1
            if rel > worst[0]:
                worst = (rel, path, tuple(np.unravel_index(c, p.shape)))
    return GradCheckReport(worst[0] <= tol, worst[0], tol, worst[1], worst[2], checked)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"OPSCKPT1"


def save_checkpoint(path, state: dict[str, np.ndarray], config_hash: str = "",
                    epoch: int = 0, extra: dict | None = None):
    entries = []
    payload = bytearray()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        entries.append({"path": name, "shape": list(arr.shape),
                        "offset": len(payload)})
        payload.extend(arr.tobytes())
    header = {
        "format": "opstrack-checkpoint",
        "version": 1,
        "config_hash": config_hash,
        "epoch": int(epoch),
        "entries": entries,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns ``(state, manifest)`` with float32 arrays keyed by path."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not an opstrack checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    payload = raw[16 + hlen:]
    state = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        if arr.size != count:
            raise CheckpointError(f"truncated payload for {entry['path']} in {path}")
        state[entry["path"]] = arr.reshape(shape).copy()
    manifest = {k: header[k] for k in ("config_hash", "epoch", "version")}
    if "extra" in header:
        manifest["extra"] = header["extra"]
    return state, manifest


def state_hash(state: dict[str, np.ndarray]) -> str:
    """Stable digest of a state dict (used to prove evaluation is read-only)."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(state[name], dtype="<f8").tobytes())
    return h.hexdigest()

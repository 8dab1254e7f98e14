"""Minimal dense-tensor arithmetic with reverse-mode gradients.

Everything is float64. Ops executed while a Graph is active are recorded on a
tape; Graph.backward walks the tape in reverse recording order, so each node
is visited exactly once. With no active graph, ops run eagerly and produce
plain (non-differentiable) tensors, which is what inference paths use.

Broadcasting is deliberately restricted to exact shape match and scalar
operands; the handful of structured patterns the models need (per-channel
bias, column-vector add, channel expansion) are dedicated ops with their own
gradients.
"""

from __future__ import annotations

import logging
import struct
from typing import Callable, Iterable

import numpy as np

logger = logging.getLogger("avbench")

_EPS_NORM = 1e-12


class Tensor:
    """A dense float64 array plus a gradient accumulator slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are the only implicit broadcast
    def __add__(self, other):
        return elementwise("add", self, _as_tensor(other))

    def __sub__(self, other):
        return elementwise("sub", self, _as_tensor(other))

    def __mul__(self, other):
        return elementwise("mul", self, _as_tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Tape of op nodes for one forward pass.

    Entering the same graph again resumes recording on it, which lets a
    prediction made on one frame and the loss realized on the next share a
    tape. Nodes are (backward_fn, output) pairs; backward_fn reads
    output.grad and accumulates into the inputs' grads.
    """

    _active: "Graph | None" = None

    def __init__(self):
        self.nodes: list[tuple[Callable[[np.ndarray], None], Tensor]] = []

    def __enter__(self) -> "Graph":
        if Graph._active is not None:
            raise RuntimeError("a Graph is already active")
        Graph._active = self
        return self

    def __exit__(self, *exc):
        Graph._active = None
        return False

    def __len__(self):
        return len(self.nodes)


def _record(out: Tensor, inputs: Iterable[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    g = Graph._active
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        g.nodes.append((backward_fn, out))
    return out


def backward(graph: Graph, loss: Tensor, params: "ParameterSet | None" = None) -> None:
    """Reverse pass over the tape; fills gradient accumulators.

    The loss must be a scalar produced on this graph. Forward values are left
    untouched. `params` is accepted for interface symmetry; gradients land on
    whatever tensors took part in the recorded ops.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.grad is None:
        # loss does not depend on anything recorded; nothing to do
        return
    loss.grad = np.ones_like(loss.data)
    for backward_fn, out in reversed(graph.nodes):
        if out.grad is not None and np.any(out.grad):
            backward_fn(out.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad and t.grad is not None:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise ops


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch for {add, sub, mul, sigmoid, exp}.

    Binary ops accept exact-match shapes or a scalar on either side.
    """
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        if a.shape != b.shape and a.shape != () and b.shape != ():
            raise ValueError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if op in ("sigmoid", "exp"):
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    return np.sum(g) if shape == () and g.shape != () else g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, _reduce_to(b.shape, g))

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, _reduce_to(b.shape, -g))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, _reduce_to(a.shape, g * b.data))
        _accum(b, _reduce_to(b.shape, g * a.data))

    return _record(out, (a, b), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _record(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise ValueError("exp overflow")
    out = Tensor(y)

    def bw(g):
        _accum(a, g * y)

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), bw)


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"sigmoid": sigmoid, "exp": exp}


# ---------------------------------------------------------------------------
# shape / reduction ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), bw)


def slice1d(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop])

    def bw(g):
        if a.requires_grad and a.grad is not None:
            a.grad[start:stop] += g

    return _record(out, (a,), bw)


def expand_channels(a: Tensor, n: int) -> Tensor:
    """Stack an (H, W) map n times into (n, H, W); gradient sums over channels."""
    out = Tensor(np.broadcast_to(a.data, (n,) + a.shape).copy())

    def bw(g):
        _accum(a, g.sum(axis=0))

    return _record(out, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bw(g):
        _accum(a, np.full(a.shape, float(g)))

    return _record(out, (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def bw(g):
        _accum(a, np.full(a.shape, float(g) / n))

    return _record(out, (a,), bw)


def channel_mean(a: Tensor) -> Tensor:
    """(C, H, W) -> (H, W) mean over channels."""
    c = a.shape[0]
    out = Tensor(a.data.mean(axis=0))

    def bw(g):
        _accum(a, np.broadcast_to(g / c, a.shape).copy())

    return _record(out, (a,), bw)


def channel_l2(a: Tensor) -> Tensor:
    """(C, H, W) -> (H, W) per-cell L2 norm over channels.

    Subgradient 0 at the origin (norm floored for the division), so zero
    residuals do not blow up the backward pass.
    """
    n = np.sqrt(np.sum(a.data * a.data, axis=0))
    out = Tensor(n)
    safe = np.maximum(n, _EPS_NORM)

    def bw(g):
        _accum(a, g * a.data / safe)

    return _record(out, (a,), bw)


def l2norm(a: Tensor) -> Tensor:
    """Scalar L2 norm of all entries, with the same floored subgradient."""
    n = float(np.sqrt(np.sum(a.data * a.data)))
    out = Tensor(n)
    safe = max(n, _EPS_NORM)

    def bw(g):
        _accum(a, float(g) * a.data / safe)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D@2D, 2D@1D and 1D@2D matrix products."""
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
        else:  # 1D @ 1D
            _accum(a, g * bd)
            _accum(b, g * ad)

    return _record(out, (a, b), bw)


def add_colvec(m: Tensor, v: Tensor) -> Tensor:
    """(A, N) + (A,) broadcast over columns."""
    if m.shape[0] != v.shape[0]:
        raise ValueError(f"shape mismatch: {m.shape} vs {v.shape}")
    out = Tensor(m.data + v.data[:, None])

    def bw(g):
        _accum(m, g)
        _accum(v, g.sum(axis=1))

    return _record(out, (m, v), bw)


# ---------------------------------------------------------------------------
# spatial ops


def _same_pad(size: int, stride: int, k: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1) -> Tensor:
    """Same-padding 2D convolution: (C_in, H, W) x (C_out, C_in, k, k).

    Output is (C_out, ceil(H/stride), ceil(W/stride)). Kernel side must be odd.
    """
    co, ci, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {k}x{k2}")
    c, h, w = x.shape
    if c != ci:
        raise ValueError(f"input channels {c} != kernel channels {ci}")
    if h < k or w < k:
        raise ValueError(f"input {h}x{w} smaller than kernel {k}")
    pt, pb = _same_pad(h, stride, k)
    pl, pr = _same_pad(w, stride, k)
    padded = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C_in, H', W', k, k)
    y = np.einsum("ockl,chwkl->ohw", kernels.data, win, optimize=True)
    if bias is not None:
        y = y + bias.data[:, None, None]
    out = Tensor(y)
    hp, wp = y.shape[1], y.shape[2]
    kd = kernels.data

    def bw(g):
        if kernels.requires_grad and kernels.grad is not None:
            kernels.grad += np.einsum("ohw,chwkl->ockl", g, win, optimize=True)
        if bias is not None and bias.requires_grad and bias.grad is not None:
            bias.grad += g.sum(axis=(1, 2))
        if x.requires_grad and x.grad is not None:
            dp = np.zeros_like(padded)
            for ki in range(k):
                for kj in range(k):
                    dp[:, ki:ki + (hp - 1) * stride + 1:stride,
                       kj:kj + (wp - 1) * stride + 1:stride] += np.einsum(
                           "ohw,oc->chw", g, kd[:, :, ki, kj], optimize=True)
            x.grad += dp[:, pt:pt + h, pl:pl + w]

    return _record(out, (x, kernels) if bias is None else (x, kernels, bias), bw)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """(C, H, W) -> (C, H/f, W/f); H and W must divide by f."""
    c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"pool factor {factor} does not divide {h}x{w}")
    y = x.data.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    out = Tensor(y)

    def bw(g):
        tiled = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        _accum(x, tiled / (factor * factor))

    return _record(out, (x,), bw)


def softmax2d(e: Tensor) -> Tensor:
    """Softmax over all cells of an (H, W) map, stabilized by max subtraction.

    Output sums to 1 and preserves the argmax of the input.
    """
    z = e.data - e.data.max()
    ex = np.exp(z)
    y = ex / ex.sum()
    out = Tensor(y)

    def bw(g):
        _accum(e, y * (g - float(np.sum(g * y))))

    return _record(out, (e,), bw)


# ---------------------------------------------------------------------------
# parameters and updates


class ParameterSet:
    """Named map of trainable tensors with same-shape gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self._params[k].data[...] = v


def sgd_step(params: ParameterSet, lr: float, clip: float = np.inf) -> bool:
    """One plain SGD update: p <- p - lr * clip(grad, +-clip); grads zeroed.

    Returns False (and leaves parameters untouched) if any gradient is
    non-finite; the incident is logged.
    """
    for name, t in params.items():
        if not np.all(np.isfinite(t.grad)):
            logger.warning("non-finite gradient in %s; update skipped", name)
            params.zero_grad()
            return False
    for t in params._params.values():
        t.data -= lr * np.clip(t.grad, -clip, clip)
    params.zero_grad()
    return True


class OnlineSgd:
    """SGD with elementwise clipping and an optional loss-damped learning rate.

    The effective rate is lr / (1 + beta * ema) where ema is an exponential
    moving average of recent loss values; updates therefore shrink while the
    stream is surprising, which keeps online learning from chasing spikes.
    """

    def __init__(self, lr: float, clip: float = 5.0, adaptive: bool = True,
                 beta: float = 0.1, ema_decay: float = 0.99):
        self.lr = lr
        self.clip = clip
        self.adaptive = adaptive
        self.beta = beta
        self.ema_decay = ema_decay
        self.loss_ema = 0.0
        self.skipped = 0

    def effective_lr(self) -> float:
        if not self.adaptive:
            return self.lr
        return self.lr / (1.0 + self.beta * self.loss_ema)

    def step(self, params: ParameterSet, loss_value: float | None = None) -> bool:
        lr_eff = self.effective_lr()
        ok = sgd_step(params, lr_eff, self.clip)
        if not ok:
            self.skipped += 1
        if loss_value is not None and np.isfinite(loss_value):
            self.loss_ema = self.ema_decay * self.loss_ema + (1.0 - self.ema_decay) * loss_value
        return ok


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[ParameterSet], Tensor], params: ParameterSet,
                      h: float = 1e-5, samples_per_tensor: int = 8,
                      seed: int = 0) -> float:
    """Compare analytic gradients of f against central differences.

    f must be a deterministic scalar-valued function of the parameters. The
    analytic gradient comes from one recorded forward + backward; each sampled
    coordinate then gets two eager forward evaluations at +-h. Returns the max
    over sampled coordinates of |analytic - fd| / max(1e-8, |fd|).
    """
    params.zero_grad()
    with Graph() as g:
        loss = f(params)
    backward(g, loss, params)
    analytic = {name: t.grad.copy() for name, t in params.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(samples_per_tensor, n), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - fd) / max(1e-8, abs(fd))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# parameter snapshots

_SNAP_MAGIC = b"avbench-params v1\n"


def save_parameters(params: ParameterSet, path: str) -> None:
    """Flat binary snapshot: text header (name, shape, offset) then raw float64."""
    entries = []
    offset = 0
    for name, t in params.items():
        entries.append((name, t.shape, offset))
        offset += t.data.size * 8
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(f"count {len(entries)}\n".encode())
        for name, shape, off in entries:
            dims = ",".join(str(d) for d in shape) if shape else "scalar"
            fh.write(f"{name} {dims} {off}\n".encode())
        fh.write(b"end\n")
        for _, t in params.items():
            fh.write(struct.pack(f"<{t.data.size}d", *t.data.reshape(-1)))


def load_parameters(params: ParameterSet, path: str) -> None:
    """Load a snapshot saved by save_parameters into an existing ParameterSet."""
    with open(path, "rb") as fh:
        if fh.readline() != _SNAP_MAGIC:
            raise ValueError(f"{path}: not a parameter snapshot")
        count = int(fh.readline().split()[1])
        header = []
        for _ in range(count):
            name, dims, off = fh.readline().decode().split()
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split(","))
            header.append((name, shape, int(off)))
        if fh.readline() != b"end\n":
            raise ValueError(f"{path}: corrupt snapshot header")
        base = fh.tell()
        for name, shape, off in header:
            if name not in params:
                raise KeyError(f"{path}: unknown parameter {name!r}")
            t = params[name]
            if t.shape != shape:
                raise ValueError(f"{path}: shape mismatch for {name}: "
                                 f"file {shape} vs current {t.shape}")
            fh.seek(base + off)
            n = int(np.prod(shape)) if shape else 1
            vals = struct.unpack(f"<{n}d", fh.read(n * 8))
            t.data[...] = np.asarray(vals, dtype=np.float64).reshape(shape)

"""Dense tensors with a reverse-mode differentiation tape.

Only the handful of operations the two solver networks need are provided.
Every operation returns a new :class:`Tensor`; when any input requires a
gradient, the result carries a :class:`TapeNode` recording its inputs and a
closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BCE_EPS = 1e-7

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional float array that can take part in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _wrap(np.full(self.shape, -1.0), self.dtype))

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _channel_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple[bool, bool]:
    """Return (a_is_vec, b_is_vec) for the permitted broadcast patterns."""
    if a.shape == b.shape:
        return False, False
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[1] == b.shape[0]:
        return False, True
    if a.data.ndim == 1 and b.data.ndim >= 2 and b.shape[1] == a.shape[0]:
        return True, False
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _as_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def add(a: Tensor, b: Tensor) -> Tensor:
    a_vec, b_vec = _channel_broadcast(a, b, "add")
    ad = _as_channel(a.data, b.data.ndim) if a_vec else a.data
    bd = _as_channel(b.data, a.data.ndim) if b_vec else b.data

    def backward_fn(g):
        return (_reduce_channel(g) if a_vec else g, _reduce_channel(g) if b_vec else g)

    return _result(ad + bd, (a, b), "add", backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a_vec, b_vec = _channel_broadcast(a, b, "mul")
    ad = _as_channel(a.data, b.data.ndim) if a_vec else a.data
    bd = _as_channel(b.data, a.data.ndim) if b_vec else b.data

    def backward_fn(g):
        ga = g * bd
        gb = g * ad
        return (_reduce_channel(ga) if a_vec else ga, _reduce_channel(gb) if b_vec else gb)

    return _result(ad * bd, (a, b), "mul", backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), "matmul", backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _result(data, (x,), "reshape", lambda g: (g.reshape(old),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum",
                   lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), "mean",
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), "relu",
                   lambda g: (g * mask,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * scale
    return _result(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkk kernel.

    Internally the im2col buffer is laid out channel-major, (C*kh*kw, N*Ho*Wo),
    so that every copy is a contiguous slice.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")

    dt = x.dtype
    xc = x.data.transpose(1, 0, 2, 3)
    if padding:
        xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dt)
        xp[:, :, padding:padding + h, padding:padding + w] = xc
    else:
        xp = xc
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=dt)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward_fn(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gk = (gm @ cols.T).reshape(kernel.shape)
        gb = gm.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dt)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(out, inputs, "conv2d", backward_fn)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first row-major position."""
    if window != 2:
        raise ValueError("only a 2x2 window is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims of {x.shape} not divisible by 2")
    d = x.data
    q = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))

    def backward_fn(g):
        gx = np.zeros((n, c, h, w), dtype=d.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q[k] == out) & ~taken
            taken |= hit
            gx[:, :, di::2, dj::2] = g * hit
        return (gx,)

    return _result(out, (x,), "maxpool2d", backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = np.asarray(1.0 / (h * w), dtype=x.dtype)
    return _result(out, (x,), "global_avg_pool",
                   lambda g: (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)),))


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, train: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation; updates the running statistics in place when training."""
    axes = (0, 2, 3)
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward_fn(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if train:
            m = x.size // x.shape[1]
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None])
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), "batch_norm2d", backward_fn)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """-log softmax(logits)[target]; a batch of rows is averaged."""
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    t = np.atleast_1d(np.asarray(target))
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if t.dtype.kind not in "iu" or np.any(t < 0) or np.any(t >= z.shape[1]):
        raise IndexError(f"target index {target!r} out of range for {z.shape[1]} classes")
    b = z.shape[0]
    logp = _log_softmax(z)
    loss = -logp[np.arange(b), t].mean()

    def backward_fn(g):
        gz = np.exp(logp)
        gz[np.arange(b), t] -= 1
        gz *= g / b
        return (gz[0] if single else gz,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), "softmax_cross_entropy", backward_fn)


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Summed BCE over the last axis, averaged over any leading batch axis."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"binary_cross_entropy: predictions {pred.shape} vs target {t.shape}")
    p = pred.data
    lo, hi = BCE_EPS, 1 - BCE_EPS
    pc = np.clip(p, lo, hi)
    terms = t * np.log(pc) + (1 - t) * np.log(1 - pc)
    b = 1 if p.ndim == 1 else int(np.prod(p.shape[:-1]))
    loss = -terms.sum() / b
    inside = (p >= lo) & (p <= hi)

    def backward_fn(g):
        gp = (-(t / pc) + (1 - t) / (1 - pc)) * inside
        return (gp * (g / b),)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), "binary_cross_entropy", backward_fn)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Leaf tensors that require a gradient get a fresh ``.grad``; the returned
    map holds those same arrays keyed by tensor.
    """
    if loss.data.ndim != 0 and loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = np.array(g, dtype=t.dtype)
            leaves[t] = t.grad
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    step: float = 1e-5
    checked: int = 0
    skipped: int = 0  # coordinates abandoned because every step straddled a kink

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
               step: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None, kink_retries: int = 0,
               kink_tol: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients with central finite differences.

    ``f`` must be deterministic and rebuild its graph on every call. With
    ``max_entries`` only that many randomly chosen coordinates per parameter
    are differenced.

    Piecewise-linear ops (ReLU, max-pooling) make the loss non-smooth, and a
    difference whose two probes land on different linear pieces measures an
    average slope that no correct backward pass reproduces. With
    ``kink_retries > 0`` such a straddle is detected by comparing the forward
    and backward one-sided quotients; the step is then shrunk tenfold up to
    ``kink_retries`` times, after which the coordinate is skipped and counted.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    backward(f())
    report = GradCheckReport(step=step)
    rng = rng or np.random.default_rng(0)
    f0 = float(f().data) if kink_retries else 0.0
    for name, p in params.items():
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for k in idx:
            orig = flat[k]
            h = step * max(1.0, abs(float(orig)))
            for attempt in range(kink_retries + 1):
                flat[k] = orig + h
                fp = float(f().data)
                flat[k] = orig - h
                fm = float(f().data)
                flat[k] = orig
                if not kink_retries:
                    break
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) <= kink_tol * max(abs(fwd), abs(bwd), 1e-8):
                    break
                h /= 10
            else:
                report.skipped += 1
                continue
            g_fd = (fp - fm) / (2 * h)
            err = float(relative_error(np.float64(g_ad.reshape(-1)[k]), np.float64(g_fd)))
            worst = max(worst, err)
            report.checked += 1
        report.errors[name] = worst
    return report


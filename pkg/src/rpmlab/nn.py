"""Small plain CNN used both as the 16-channel classifier and the 3-channel row scorer.

Also hosts the Adam optimiser, the step-halving learning-rate schedule and
the binary ``RPMC`` checkpoint format.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BATCH_NORM_MODES = ("none", "trainable", "frozen")


class NumericError(RuntimeError):
    """Non-finite values encountered during optimisation."""


@dataclass(frozen=True)
class NetworkSpec:
    input_channels: int
    out_dim: int
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    dropout_p: float = 0.5
    image_size: int = 32
    batch_norm: str = "none"
    head_init_gain: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.input_channels not in (3, 16):
            raise ValueError(f"input_channels must be 3 or 16, got {self.input_channels}")
        if self.out_dim not in (1, 8):
            raise ValueError(f"out_dim must be 1 or 8, got {self.out_dim}")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValueError("conv_channels must be a non-empty list of positive widths")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.batch_norm not in BATCH_NORM_MODES:
            raise ValueError(f"batch_norm must be one of {BATCH_NORM_MODES}")
        if not self.head_init_gain > 0:
            raise ValueError("head_init_gain must be positive")
        size = self.image_size
        for _ in self.conv_channels:
            if size < 2 or size % 2:
                raise ValueError(
                    f"image size {self.image_size} collapses below 1x1 (or is odd) "
                    f"after {len(self.conv_channels)} pooling stages")
            size //= 2

    @classmethod
    def supervised(cls, **kw) -> "NetworkSpec":
        return cls(input_channels=16, out_dim=8, **kw)

    @classmethod
    def row_scorer(cls, **kw) -> "NetworkSpec":
        return cls(input_channels=3, out_dim=1, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class Network:
    """conv3x3 -> [bn] -> relu -> maxpool blocks, then GAP -> dropout -> linear."""

    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ad.ShapeError(
                f"network expects (N, {self.spec.input_channels}, H, W) input, got {x.shape}")
        p = self.params
        h = x
        for i in range(len(self.spec.conv_channels)):
            h = ad.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=1, padding=1)
            if self.spec.batch_norm != "none":
                h = ad.batch_norm2d(
                    h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                    self.buffers[f"bn{i}.running_mean"], self.buffers[f"bn{i}.running_var"],
                    train=train and self.spec.batch_norm == "trainable")
            h = ad.relu(h)
            h = ad.maxpool2d(h, 2)
        h = ad.global_avg_pool(h)
        h = ad.dropout(h, self.spec.dropout_p, train, rng)
        return ad.add(ad.matmul(h, p["fc.weight"]), p["fc.bias"])

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def named_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        out.update(self.buffers)
        return out

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def astype(self, dtype) -> "Network":
        other = Network(self.spec, dtype)
        for k, t in self.params.items():
            other.params[k] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k)
        for k, b in self.buffers.items():
            other.buffers[k] = b.astype(dtype)
        return other


def build_network(spec: NetworkSpec, rng: np.random.Generator | int, dtype=np.float32) -> Network:
    """He-normal conv weights (std sqrt(2 / fan_in)), zero biases.

    The output layer is drawn with std ``spec.head_init_gain / sqrt(fan_in)``
    so a fresh network starts with near-zero logits: the panels are mostly
    white, which gives the pooled features a large positive mean, and a
    He-scaled head (gain sqrt(2)) turns that into a large shared logit offset.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    net = Network(spec, dtype)
    cin = spec.input_channels
    trainable_bn = spec.batch_norm == "trainable"
    for i, cout in enumerate(spec.conv_channels):
        fan_in = cin * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
        net.params[f"conv{i}.weight"] = Tensor(w.astype(dtype), requires_grad=True, name=f"conv{i}.weight")
        net.params[f"conv{i}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True, name=f"conv{i}.bias")
        if spec.batch_norm != "none":
            net.params[f"bn{i}.gamma"] = Tensor(np.ones(cout, dtype), requires_grad=trainable_bn)
            net.params[f"bn{i}.beta"] = Tensor(np.zeros(cout, dtype), requires_grad=trainable_bn)
            net.buffers[f"bn{i}.running_mean"] = np.zeros(cout, dtype)
            net.buffers[f"bn{i}.running_var"] = np.ones(cout, dtype)
        cin = cout
    w = rng.normal(0.0, spec.head_init_gain / np.sqrt(cin), size=(cin, spec.out_dim))
    net.params["fc.weight"] = Tensor(w.astype(dtype), requires_grad=True, name="fc.weight")
    net.params["fc.bias"] = Tensor(np.zeros(spec.out_dim, dtype), requires_grad=True, name="fc.bias")
    return net


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return state


class Adam:
    """Adam bound to a network's trainable parameters."""

    def __init__(self, net: Network, **kw):
        self.net = net
        self.state = AdamState.for_params(self._arrays(), **kw)

    def _arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.net.params.items() if t.requires_grad}

    def step(self, lr: float) -> None:
        grads = {k: t.grad for k, t in self.net.params.items() if t.requires_grad}
        adam_step(self._arrays(), grads, self.state, lr)


@dataclass(frozen=True)
class LRSchedule:
    """Learning rate halved every ``halving_period`` units.

    ``unit`` picks what counts as one unit: ``"epoch"`` (default) or
    ``"step"`` (optimiser iterations).
    """

    base_lr: float = 2e-4
    halving_period: int = 10
    unit: str = "epoch"

    def __post_init__(self):
        if self.unit not in ("epoch", "step"):
            raise ValueError(f"unit must be 'epoch' or 'step', got {self.unit!r}")
        if self.halving_period < 1:
            raise ValueError("halving_period must be positive")

    def lr(self, epoch: int, step: int = 0) -> float:
        count = epoch if self.unit == "epoch" else step
        return self.base_lr * 0.5 ** (count // self.halving_period)


def lr_at_epoch(e: int, base_lr: float = 2e-4, halving_period: int = 10) -> float:
    return LRSchedule(base_lr, halving_period).lr(e)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"RPMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Network
    adam: AdamState | None = None
    seeds: dict = field(default_factory=dict)


def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return name, arr


def checkpoint_bytes(model: Network, adam: AdamState | None = None, seeds: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    spec_raw = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(spec_raw)))
    buf.write(spec_raw)
    arrays = model.named_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_array(buf, name, arr)
    if adam is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Iddd", adam.t, adam.beta1, adam.beta2, adam.eps))
        buf.write(struct.pack("<I", len(adam.m)))
        for name in adam.m:
            _write_array(buf, name, adam.m[name])
            _write_array(buf, name, adam.v[name])
    seed_raw = json.dumps(seeds or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(seed_raw)))
    buf.write(seed_raw)
    return buf.getvalue()


def save_checkpoint(model: Network, path, adam: AdamState | None = None, seeds: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, adam, seeds))


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (slen,) = r.unpack("<I")
    try:
        spec = NetworkSpec.from_dict(json.loads(r.take(slen).decode("utf-8")))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid network description: {exc}") from exc

    model = build_network(spec, 0, dtype=np.float32)
    expected = model.named_arrays()
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointMismatchError(f"checkpoint holds {count} arrays, network needs {len(expected)}")
    for _ in range(count):
        name, arr = r.array()
        if name not in expected:
            raise CheckpointMismatchError(f"unexpected array {name!r} in checkpoint")
        if arr.shape != expected[name].shape:
            raise CheckpointMismatchError(
                f"shape mismatch for {name!r}: file {arr.shape}, network {expected[name].shape}")
        if name in model.params:
            model.params[name].data = arr
        else:
            model.buffers[name] = arr

    adam = None
    (has_adam,) = r.unpack("<B")
    if has_adam:
        t, b1, b2, eps = r.unpack("<Iddd")
        adam = AdamState(t=t, beta1=b1, beta2=b2, eps=eps)
        (n,) = r.unpack("<I")
        for _ in range(n):
            name, m = r.array()
            name_v, v = r.array()
            if name != name_v or name not in model.params or m.shape != model.params[name].shape:
                raise CheckpointMismatchError(f"optimiser state does not match parameter {name!r}")
            adam.m[name], adam.v[name] = m, v
    (seed_len,) = r.unpack("<I")
    seeds = json.loads(r.take(seed_len).decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return Checkpoint(model, adam, seeds)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())

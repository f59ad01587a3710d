"""Supervised stacked-input classifier and the unsupervised pseudo-target row scorer.

Supervised: the 16 panels of a problem are stacked as channels and a CNN
emits 8 logits trained with softmax cross-entropy.

Unsupervised (MCPT): every candidate is dropped into the missing slot to
form 10 three-panel rows; a shared scorer maps each row to one logit, a
sigmoid turns the 10 logits into independent probabilities, and binary
cross-entropy pulls them toward a fixed pseudo target (rows 1 and 2 on, the
8 candidate rows off). The training path never sees the answer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Pack, UnlabeledPack
from .nn import Adam, LRSchedule, Network, NetworkSpec, NumericError, build_network

log = logging.getLogger(__name__)

# (x1, x2, x3), (x4, x5, x6), then (x7, x8, y_j) for j = 1..8
ROW_INDEX = np.array([[0, 1, 2], [3, 4, 5]] + [[6, 7, 8 + j] for j in range(8)])

TWO_HOT = "two-hot"
ONE_HOT = "one-hot"


def pseudo_target(variant: str = TWO_HOT, dtype=np.float32) -> np.ndarray:
    t = np.zeros(10, dtype=dtype)
    if variant == TWO_HOT:
        t[:2] = 1
    elif variant == ONE_HOT:
        t[0] = 1
    else:
        raise ValueError(f"unknown pseudo-target variant {variant!r}")
    return t


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim < 3 or images.shape[-3] != 16:
        raise ValueError(f"expected 16 panel images, got array of shape {images.shape}")
    if images.shape[-1] != images.shape[-2]:
        raise ValueError(f"panel images must be square, got {images.shape[-2:]}")
    return images


def stack_supervised_input(images: np.ndarray) -> np.ndarray:
    """(…, 16, H, W) panels -> the same array as a 16-channel input (x1..x8, y1..y8)."""
    return _check_images(images)


def build_mcpt_rows(images: np.ndarray) -> np.ndarray:
    """(…, 16, H, W) panels -> (…, 10, 3, H, W) rows."""
    images = _check_images(images)
    return images[..., ROW_INDEX, :, :]


def supervised_loss(logits: Tensor, answer) -> Tensor:
    return ad.softmax_cross_entropy(logits, answer)


def mcpt_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=probs.dtype)
    return ad.binary_cross_entropy(probs, np.broadcast_to(target, probs.shape))


def mcpt_forward(model: Network, rows, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Sigmoid probabilities for 10 rows; (10, 3, H, W) -> (10,), (B, 10, 3, H, W) -> (B, 10)."""
    if model.spec.out_dim != 1 or model.spec.input_channels != 3:
        raise ValueError("MCPT needs a row scorer (3 input channels, 1 output)")
    rows = np.asarray(rows)
    single = rows.ndim == 4
    if single:
        rows = rows[None]
    if rows.ndim != 5 or rows.shape[1:3] != (10, 3):
        raise ValueError(f"expected (B, 10, 3, H, W) rows, got {rows.shape}")
    b, _, _, h, w = rows.shape
    scores = model.forward(rows.reshape(b * 10, 3, h, w).astype(model.dtype, copy=False), train, rng)
    probs = ad.sigmoid(ad.reshape(scores, (10,) if single else (b, 10)))
    return probs


def predict_supervised(logits) -> int | np.ndarray:
    """0-based argmax; ties go to the lowest index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    out = np.argmax(z, axis=-1)
    return int(out) if out.ndim == 0 else out


def predict_mcpt(probs) -> int | np.ndarray:
    """Drop the two context rows and take the 0-based argmax over the 8 candidate rows."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if p.shape[-1] != 10:
        raise ValueError(f"expected 10 row probabilities, got {p.shape}")
    out = np.argmax(p[..., 2:], axis=-1)
    return int(out) if out.ndim == 0 else out


@dataclass
class TrainResult:
    model: Network
    batch_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    seed: int = 0
    optimizer: Adam | None = None


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init, run = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(run)


def initial_model(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    """The network a training run with ``seed`` starts from."""
    return build_network(spec, _rngs(seed)[0], dtype)


def _fit(model: Network, n: int, epochs: int, batch_size: int, schedule: LRSchedule,
         rng: np.random.Generator, batch_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
         seed: int, progress: Callable[[int, float], None] | None = None) -> TrainResult:
    opt = Adam(model)
    result = TrainResult(model, seed=seed, optimizer=opt)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = np.sort(order[start:start + batch_size])
            loss = batch_loss(idx, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            ad.backward(loss)
            try:
                opt.step(schedule.lr(epoch, step))
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch}, batch {b})") from exc
            step += 1
            result.batch_losses.append(value)
            total += value * len(idx)
        result.epoch_losses.append(total / n)
        log.info("epoch %d loss %.4f lr %.2e", epoch, total / n, schedule.lr(epoch, step))
        if progress is not None:
            progress(epoch, total / n)
    return result


def train_supervised(pack: Pack, indices: Sequence[int], spec: NetworkSpec | None = None,
                     epochs: int = 10, seed: int = 0, batch_size: int = 32,
                     schedule: LRSchedule | None = None, dtype=np.float32,
                     progress=None) -> TrainResult:
    """Mini-batch Adam on the 16-channel classifier."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("training split is empty")
    spec = spec or NetworkSpec.supervised(image_size=pack.resolution[0])
    if spec.input_channels != 16 or spec.out_dim != 8:
        raise ValueError("supervised training needs a 16-in / 8-out network")
    init_rng, rng = _rngs(seed)
    model = build_network(spec, init_rng, dtype)
    answers = np.asarray(pack.answers, dtype=np.int64)

    def batch_loss(idx, rng):
        sel = indices[idx]
        x = stack_supervised_input(pack.float_images(sel)).astype(dtype, copy=False)
        return supervised_loss(model.forward(x, train=True, rng=rng), answers[sel])

    return _fit(model, len(indices), epochs, batch_size, schedule or LRSchedule(), rng,
                batch_loss, seed, progress)


def train_mcpt(pack: Pack | UnlabeledPack, indices: Sequence[int], spec: NetworkSpec | None = None,
               epochs: int = 10, seed: int = 0, variant: str = TWO_HOT, batch_size: int = 32,
               schedule: LRSchedule | None = None, dtype=np.float32, progress=None) -> TrainResult:
    """Label-blind training of the row scorer toward the pseudo target."""
    data = pack.unlabeled()
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("training split is empty")
    spec = spec or NetworkSpec.row_scorer(image_size=data.resolution[0])
    target = pseudo_target(variant, dtype)
    init_rng, rng = _rngs(seed)
    model = build_network(spec, init_rng, dtype)
    if spec.input_channels != 3 or spec.out_dim != 1:
        raise ValueError("MCPT training needs a 3-in / 1-out row scorer")

    def batch_loss(idx, rng):
        rows = build_mcpt_rows(data.float_images(indices[idx]))
        return mcpt_loss(mcpt_forward(model, rows, train=True, rng=rng), target)

    return _fit(model, len(indices), epochs, batch_size, schedule or LRSchedule(), rng,
                batch_loss, seed, progress)


def predict_pack(model: Network, pack: Pack | UnlabeledPack, indices: Sequence[int],
                 mode: str, batch_size: int = 64) -> np.ndarray:
    """0-based predictions for ``indices`` in eval mode (dropout off)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty(len(indices), dtype=np.int64)
    with ad.no_grad():
        for start in range(0, len(indices), batch_size):
            sel = indices[start:start + batch_size]
            images = pack.float_images(sel).astype(model.dtype, copy=False)
            if mode == "supervised":
                if model.spec.input_channels != 16:
                    raise ValueError("supervised evaluation needs a 16-channel classifier")
                out[start:start + len(sel)] = predict_supervised(model.forward(stack_supervised_input(images)))
            elif mode == "mcpt":
                out[start:start + len(sel)] = predict_mcpt(mcpt_forward(model, build_mcpt_rows(images)))
            else:
                raise ValueError(f"unknown mode {mode!r}")
    return out

"""Experiment orchestration: splits, evaluation, baselines, ablations, generalization, reports."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import statistics
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import Pack, UnlabeledPack
from .domain import LAYOUTS, UnsupportedConfiguration, canonical_config
from .nn import LRSchedule, Network, NetworkSpec, build_network, checkpoint_bytes
from .rules import oracle_predict
from .solvers import (
    ONE_HOT, TWO_HOT, TrainResult, initial_model, mcpt_forward, mcpt_loss, predict_pack,
    pseudo_target, stack_supervised_input, supervised_loss, train_mcpt, train_supervised,
)

SPLIT_FOLDS = (6, 2, 2)
CSV_COLUMNS = ("method", "config", "accuracy", "n", "seed")

# (train configuration, test configurations) as set out for the cross-configuration study
GENERALIZATION_SETUPS = (
    ("Center", ("L-R", "U-D", "O-IC")),
    ("L-R", ("U-D",)),
    ("U-D", ("L-R",)),
    ("2*2Grid", ("3*3Grid",)),
    ("3*3Grid", ("2*2Grid",)),
)


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def part(self, name: str) -> np.ndarray:
        if name == "all":
            return np.sort(np.concatenate([self.train, self.val, self.test]))
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}; use train, val, test or all") from None

    def restrict(self, pack, config: str) -> "Split":
        """The same split limited to problems of one configuration."""
        mask = np.asarray(pack.config_codes) == LAYOUTS[canonical_config(config)].code
        keep = lambda idx: idx[mask[idx]]  # noqa: E731
        return Split(keep(self.train), keep(self.val), keep(self.test), self.seed)


def split_sizes(n: int) -> tuple[int, int, int]:
    total = sum(SPLIT_FOLDS)
    n_train = n * SPLIT_FOLDS[0] // total
    n_val = n * SPLIT_FOLDS[1] // total
    return n_train, n_val, n - n_train - n_val


def split_dataset(pack, seed: int) -> Split:
    """Seeded 6:2:2 partition, shuffled independently within each configuration."""
    codes = np.asarray(pack.config_codes)
    if len(codes) == 0:
        raise ValueError("cannot split an empty dataset pack")
    parts: list[list[np.ndarray]] = [[], [], []]
    for code in sorted(set(int(c) for c in codes)):
        members = np.flatnonzero(codes == code)
        n_train, n_val, n_test = split_sizes(len(members))
        if n_train == 0 or n_test == 0:
            raise ValueError(f"configuration id {code} has only {len(members)} problems; "
                             f"too few for a train/val/test split")
        perm = members[np.random.default_rng([seed, code]).permutation(len(members))]
        parts[0].append(perm[:n_train])
        parts[1].append(perm[n_train:n_train + n_val])
        parts[2].append(perm[n_train + n_val:])
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return Split(train, val, test, seed)


# --------------------------------------------------------------------------- evaluation

def pack_id(pack) -> str:
    """Content hash of a pack's images and configuration tags (answers excluded)."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(pack.config_codes).tobytes())
    h.update(np.ascontiguousarray(pack.images).tobytes())
    return h.hexdigest()[:16]


def model_id(model: Network) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()[:16]


@dataclass
class EvalReport:
    overall: float
    per_config: dict[str, float]
    counts: dict[str, int]
    correct: dict[str, int]
    mode: str
    seed: int | None = None
    model_id: str = ""
    dataset_id: str = ""

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def rows(self, method: str) -> list[dict]:
        seed = "" if self.seed is None else self.seed
        out = [dict(method=method, config=c, accuracy=self.per_config[c], n=self.counts[c], seed=seed)
               for c in self.per_config]
        out.append(dict(method=method, config="all", accuracy=self.overall, n=self.n, seed=seed))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n"] = self.n
        return d


Predictor = Callable[[object, np.ndarray], np.ndarray]


def oracle_model(pack: Pack) -> Predictor:
    """A pseudo-model that answers with the symbolic oracle (needs annotations)."""
    return lambda _pack, idx: np.array([oracle_predict(pack.problem(int(i))) for i in idx])


def constant_model(choice: int) -> Predictor:
    return lambda _pack, idx: np.full(len(idx), choice, dtype=np.int64)


def _check_mode(model: Network, mode: str) -> None:
    if mode == "supervised":
        ok = model.spec.input_channels == 16 and model.spec.out_dim == 8
    elif mode == "mcpt":
        ok = model.spec.input_channels == 3 and model.spec.out_dim == 1
    else:
        raise ValueError(f"unknown mode {mode!r}; use supervised or mcpt")
    if not ok:
        raise ValueError(f"a {model.spec.input_channels}-in / {model.spec.out_dim}-out network "
                         f"cannot be evaluated in {mode} mode")


def mode_of(model: Network) -> str:
    return "supervised" if model.spec.input_channels == 16 else "mcpt"


def evaluate(model: Network | Predictor, pack: Pack, indices, mode: str,
             seed: int | None = None, batch_size: int = 64) -> EvalReport:
    """Accuracy of 0-based predictions against the pack's answers, overall and per configuration."""
    indices = np.asarray(indices, dtype=np.int64)
    if isinstance(model, Network):
        _check_mode(model, mode)
        preds = predict_pack(model, pack, indices, mode, batch_size)
        mid = model_id(model)
    else:
        preds = np.asarray(model(pack, indices), dtype=np.int64)
        mid = getattr(model, "__name__", "callable")
    hits = preds == np.asarray(pack.answers, dtype=np.int64)[indices]
    codes = np.asarray(pack.config_codes)[indices]
    per_config, counts, correct = {}, {}, {}
    for name, layout in LAYOUTS.items():
        sel = codes == layout.code
        if sel.any():
            counts[name] = int(sel.sum())
            correct[name] = int(hits[sel].sum())
            per_config[name] = correct[name] / counts[name]
    overall = float(hits.mean()) if len(hits) else 0.0
    return EvalReport(overall, per_config, counts, correct, mode, seed, mid, pack_id(pack))


def random_baseline(answers, trials: int, seed: int, n_choices: int = 8) -> float:
    """Accuracy of uniform guessing over ``n_choices`` on ``trials`` problems drawn cyclically."""
    if trials < 1:
        raise ValueError("random baseline needs at least one trial")
    answers = np.asarray(answers, dtype=np.int64).reshape(-1)
    if len(answers) == 0:
        raise ValueError("random baseline needs at least one problem")
    if answers.max() >= n_choices:
        raise ValueError(f"answers exceed the {n_choices} available choices")
    guesses = np.random.default_rng(seed).integers(n_choices, size=trials)
    return float((guesses == np.resize(answers, trials)).mean())


# --------------------------------------------------------------------------- training wrappers

@dataclass
class TrainConfig:
    """Knobs shared by ablation and generalization runs."""

    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 2e-4
    halving_period: int = 10
    dropout_p: float = 0.5
    batch_norm: str = "none"

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.base_lr, self.halving_period)

    def spec(self, mode: str, image_size: int) -> NetworkSpec:
        make = NetworkSpec.supervised if mode == "supervised" else NetworkSpec.row_scorer
        return make(conv_channels=tuple(self.conv_channels), image_size=image_size,
                    dropout_p=self.dropout_p, batch_norm=self.batch_norm)


def train(pack, indices, mode: str, seed: int, cfg: TrainConfig, target: str = TWO_HOT,
          progress=None) -> TrainResult:
    spec = cfg.spec(mode, pack.resolution[0])
    kw = dict(epochs=cfg.epochs, seed=seed, batch_size=cfg.batch_size,
              schedule=cfg.schedule(), progress=progress)
    if mode == "supervised":
        return train_supervised(pack, indices, spec, **kw)
    if mode == "mcpt":
        return train_mcpt(pack.unlabeled(), indices, spec, variant=target, **kw)
    raise ValueError(f"unknown mode {mode!r}; use supervised or mcpt")


@dataclass
class OverfitResult:
    batch_losses: list[float]
    final_loss: float  # eval-mode loss on the memorised problem after the last step


def overfit_one_sample(pack: Pack, index: int = 0, steps: int = 200, seed: int = 0,
                       lr: float = 1e-3, conv_channels: Sequence[int] = (16, 32, 64, 64)) -> OverfitResult:
    """Drive the classifier to memorise a single problem with a constant learning rate.

    The loss after the final step is measured with dropout switched off, since
    a half-dropped head makes any single training-mode value noisy.
    """
    spec = NetworkSpec.supervised(conv_channels=tuple(conv_channels), image_size=pack.resolution[0])
    res = train_supervised(pack, [index], spec, epochs=steps, seed=seed, batch_size=1,
                           schedule=LRSchedule(lr, halving_period=10 * steps))
    x = stack_supervised_input(pack.float_images([index]))
    loss = supervised_loss(res.model.forward(x), np.asarray(pack.answers)[[index]])
    return OverfitResult(res.batch_losses, float(loss.data) + 0.0)  # + 0.0 turns -0.0 into 0.0


# --------------------------------------------------------------------------- ablation

@dataclass
class AblationResult:
    rows: list[dict]
    per_seed: dict[str, list[float]]
    seeds: list[int]
    loss_traces: dict[str, list[list[float]]] = field(default_factory=dict)

    def accuracy(self, method: str) -> float:
        return next(r["accuracy"] for r in self.rows if r["method"] == method)


def _config_label(pack, indices) -> str:
    codes = sorted(set(int(c) for c in np.asarray(pack.config_codes)[indices]))
    names = [n for n, lay in LAYOUTS.items() if lay.code in codes]
    return names[0] if len(names) == 1 else "+".join(names)


def run_ablation(pack: Pack, seeds: Sequence[int], cfg: TrainConfig | None = None,
                 split: Split | None = None, split_seed: int = 0, random_trials: int = 10_000,
                 progress=None) -> AblationResult:
    """Random guess, untrained scorer, one-hot and two-hot MCPT; each the median over ``seeds``.

    Training touches only the label-free view of the train split; answers are
    read for scoring the test split only.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    cfg = cfg or TrainConfig()
    split = split or split_dataset(pack, split_seed)
    test_answers = np.asarray(pack.answers)[split.test]
    spec = cfg.spec("mcpt", pack.resolution[0])
    per_seed: dict[str, list[float]] = {"random": [], "untrained": [], ONE_HOT: [], TWO_HOT: []}
    traces: dict[str, list[list[float]]] = {ONE_HOT: [], TWO_HOT: []}
    for seed in seeds:
        per_seed["random"].append(random_baseline(test_answers, random_trials, seed))
        per_seed["untrained"].append(evaluate(initial_model(spec, seed), pack, split.test, "mcpt").overall)
        for variant in (ONE_HOT, TWO_HOT):
            res = train(pack, split.train, "mcpt", seed, cfg, target=variant, progress=progress)
            traces[variant].append(res.epoch_losses)
            per_seed[variant].append(evaluate(res.model, pack, split.test, "mcpt").overall)
    label = _config_label(pack, split.test)
    seed_tag = ";".join(str(s) for s in seeds)
    rows = [dict(method=m, config=label, accuracy=float(statistics.median(v)), n=len(split.test),
                 seed=seed_tag) for m, v in per_seed.items()]
    return AblationResult(rows, per_seed, seeds, traces)


# --------------------------------------------------------------------------- generalization

@dataclass
class GeneralizationResult:
    train_config: str
    reports: dict[str, EvalReport]
    unsupported: list[str]
    train_indices: np.ndarray
    test_indices: dict[str, np.ndarray]
    model: Network | None = None

    def rows(self, method: str = "generalize") -> list[dict]:
        out = []
        for cfg, rep in self.reports.items():
            out.append(dict(method=f"{method}:{self.train_config}", config=cfg,
                            accuracy=rep.overall, n=rep.n, seed=rep.seed))
        for cfg in self.unsupported:
            out.append(dict(method=f"{method}:{self.train_config}", config=cfg,
                            accuracy="unsupported", n=0, seed=""))
        return out


def check_disjoint(train_idx, test_sets: Mapping[str, np.ndarray]) -> None:
    train_set = set(np.asarray(train_idx).tolist())
    for name, idx in test_sets.items():
        if train_set.intersection(np.asarray(idx).tolist()):
            raise AssertionError(f"training indices leak into the {name} test set")


def run_generalization(pack: Pack, train_config: str, test_configs: Sequence[str], mode: str,
                       seed: int = 0, cfg: TrainConfig | None = None, split: Split | None = None,
                       split_seed: int = 0, target: str = TWO_HOT, progress=None) -> GeneralizationResult:
    """Train on one configuration's train split, score each test configuration's test split."""
    cfg = cfg or TrainConfig()
    train_config = canonical_config(train_config)
    present = set(pack.configs)
    tests, unsupported = [], []
    for name in test_configs:
        try:
            tests.append(canonical_config(name))
        except UnsupportedConfiguration:
            unsupported.append(name.upper())
    for name in [train_config, *tests]:
        if name not in present:
            raise ValueError(f"configuration {name} is not present in the pack")
    split = split or split_dataset(pack, split_seed)
    train_idx = split.restrict(pack, train_config).train
    test_idx = {c: split.restrict(pack, c).test for c in tests}
    check_disjoint(train_idx, test_idx)
    model = train(pack, train_idx, mode, seed, cfg, target=target, progress=progress).model if tests else None
    reports = {c: evaluate(model, pack, idx, mode, seed=seed) for c, idx in test_idx.items()}
    return GeneralizationResult(train_config, reports, unsupported, train_idx, test_idx, model)


# --------------------------------------------------------------------------- gradient check suite

def _probe(t, seed: int):
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.sum(ad.mul(t, ad.Tensor(w)))


def _op_cases(seed: int) -> dict[str, tuple[Callable, dict]]:
    rng = np.random.default_rng(seed)
    T = lambda *shape: ad.Tensor(rng.normal(size=shape), requires_grad=True)  # noqa: E731
    a, b, v = T(3, 4), T(3, 4), T(4)
    x4, k, kb = T(2, 3, 6, 6), T(4, 3, 3, 3), T(4)
    c = T(3)
    m1, m2 = T(3, 5), T(5, 2)
    pool_in = ad.Tensor(rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) / 7.0, requires_grad=True)
    gamma, beta = T(3), T(3)
    logits, probs_raw = T(4, 8), T(4, 10)
    labels = rng.integers(8, size=4)
    bits = rng.integers(2, size=(4, 10))
    return {
        "add": (lambda: _probe(ad.add(a, b), seed), {"a": a, "b": b}),
        "mul": (lambda: _probe(ad.mul(a, b), seed), {"a": a, "b": b}),
        "mul_channel": (lambda: _probe(ad.mul(x4, c), seed), {"x": x4, "c": c}),
        "matmul": (lambda: _probe(ad.matmul(m1, m2), seed), {"a": m1, "b": m2}),
        "reshape_sum_mean": (lambda: ad.add(ad.sum(ad.mul(ad.reshape(a, (12,)), ad.reshape(b, (12,)))),
                                            ad.mean(ad.mul(a, a))), {"a": a, "b": b}),
        "relu": (lambda: _probe(ad.relu(a), seed), {"a": a}),
        "sigmoid": (lambda: _probe(ad.sigmoid(a), seed), {"a": a}),
        "dropout": (lambda: _probe(ad.dropout(a, 0.5, True, np.random.default_rng(seed)), seed), {"a": a}),
        "conv2d": (lambda: _probe(ad.conv2d(x4, k, kb, stride=1, padding=1), seed), {"x": x4, "k": k, "b": kb}),
        "conv2d_stride2": (lambda: _probe(ad.conv2d(x4, k, kb, stride=2, padding=0), seed), {"x": x4, "k": k}),
        "maxpool2d": (lambda: _probe(ad.maxpool2d(pool_in, 2), seed), {"x": pool_in}),
        "global_avg_pool": (lambda: _probe(ad.global_avg_pool(x4), seed), {"x": x4}),
        "batch_norm_eval": (lambda: _probe(ad.batch_norm2d(x4, gamma, beta, np.zeros(3), np.ones(3), False), seed),
                            {"x": x4, "gamma": gamma, "beta": beta}),
        "batch_norm_train": (lambda: _probe(ad.batch_norm2d(x4, gamma, beta, np.zeros(3), np.ones(3), True), seed),
                             {"gamma": gamma, "beta": beta}),
        "softmax_cross_entropy": (lambda: ad.softmax_cross_entropy(logits, labels), {"z": logits}),
        "binary_cross_entropy": (lambda: ad.binary_cross_entropy(ad.sigmoid(probs_raw), bits), {"s": probs_raw}),
        "add_channel": (lambda: _probe(ad.add(x4, c), seed), {"x": x4, "c": c}),
    }


@dataclass
class GradcheckSummary:
    errors: dict[str, float]  # worst relative error per op or network
    checked: int
    skipped: int  # network coordinates whose every probe straddled a ReLU or pooling kink

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def gradcheck_suite(seeds: Sequence[int] = range(5), conv_channels=(16, 32, 64, 64),
                    image_size: int = 32, max_entries: int = 12,
                    kink_retries: int = 2) -> GradcheckSummary:
    """Maximum relative error per op and per full network over ``seeds`` (64-bit, dropout off).

    Network parameters are spot-checked on ``max_entries`` random coordinates
    per tensor, with kink-straddling differences retried at smaller steps;
    the op cases are checked exhaustively at the default step.
    """
    out = GradcheckSummary({}, 0, 0)

    def record(name, report):
        out.errors[name] = max(out.errors.get(name, 0.0), report.max_error)
        out.checked += report.checked
        out.skipped += report.skipped

    for seed in seeds:
        for name, (f, params) in _op_cases(seed).items():
            record(name, ad.grad_check(f, params))
        rng = np.random.default_rng([seed, 99])
        sup = build_network(NetworkSpec.supervised(conv_channels=conv_channels, image_size=image_size),
                            rng, np.float64)
        x = rng.random((2, 16, image_size, image_size))
        answers = rng.integers(8, size=2)
        record("network_supervised", ad.grad_check(
            lambda: supervised_loss(sup.forward(x, train=False), answers), sup.params,
            max_entries=max_entries, rng=rng, kink_retries=kink_retries))
        scorer = build_network(NetworkSpec.row_scorer(conv_channels=conv_channels, image_size=image_size),
                               rng, np.float64)
        rows = rng.random((1, 10, 3, image_size, image_size))
        target = pseudo_target(TWO_HOT, np.float64)
        record("network_mcpt", ad.grad_check(
            lambda: mcpt_loss(mcpt_forward(scorer, rows, train=False), target), scorer.params,
            max_entries=max_entries, rng=rng, kink_retries=kink_retries))
    return out


# --------------------------------------------------------------------------- reports and log

def rows_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if k == "accuracy" and isinstance(r[k], float) else r[k])
                    for k in CSV_COLUMNS})
    return buf.getvalue()


def write_csv(rows: Sequence[Mapping], path) -> None:
    Path(path).write_text(rows_to_csv(rows))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def append_log(path, command: Sequence[str] | str, seeds, metrics: Mapping) -> dict:
    """Append one JSON line describing a run; returns the record written."""
    record = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "command": command if isinstance(command, str) else " ".join(command),
        "seeds": seeds,
        "build": git_describe(),
        "metrics": metrics,
    }
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
    return record

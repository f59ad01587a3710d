"""Command-line entry point: ``rpmlab <subcommand> ...`` or ``python -m rpmlab``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .dataset import LabelAccessError, PackError, generate_dataset, load_pack
from .domain import UnsupportedConfiguration, canonical_config
from .nn import CheckpointError, NumericError, load_checkpoint, save_checkpoint
from .raster import RESOLUTIONS
from .solvers import ONE_HOT, TWO_HOT

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4
DEFAULT_LOG = "rpmlab-experiments.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _add_train_knobs(p: argparse.ArgumentParser, epochs: int = 10) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--channels", type=_int_list, default=[16, 32, 64, 64],
                   help="conv widths, comma-separated (default 16,32,64,64)")
    p.add_argument("--lr", type=float, default=2e-4, help="base learning rate (default 2e-4)")
    p.add_argument("--halving", type=int, default=10, help="epochs between learning-rate halvings")
    p.add_argument("--batch-norm", choices=("none", "trainable", "frozen"), default="none",
                   help="batch normalisation after each convolution (off in the reference network)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--split-seed", type=int, default=0)


def _train_config(args) -> H.TrainConfig:
    if args.epochs < 1 or args.batch_size < 1:
        raise UsageError("--epochs and --batch-size must be positive")
    return H.TrainConfig(tuple(args.channels), args.epochs, args.batch_size, args.lr, args.halving,
                         batch_norm=args.batch_norm)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rpmlab", description="Raven's Progressive Matrices lab")
    p.add_argument("--log", default=DEFAULT_LOG, help=f"experiment log, JSON lines (default {DEFAULT_LOG})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a dataset pack")
    g.add_argument("--config", type=_config_list, required=True,
                   help="configuration names, comma-separated (center, 2x2, 3x3, l-r, u-d)")
    g.add_argument("--count", type=int, required=True, help="problems per configuration")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--resolution", type=int, default=32, choices=RESOLUTIONS)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a solver and save a checkpoint")
    t.add_argument("--pack", required=True)
    t.add_argument("--mode", choices=["supervised", "mcpt"], required=True)
    t.add_argument("--target", choices=[TWO_HOT, ONE_HOT], default=TWO_HOT)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resolution", type=int, default=None,
                   help="expected panel resolution; a pack at another resolution is rejected")
    t.add_argument("--checkpoint-out", required=True)
    _add_train_knobs(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pack", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.add_argument("--split-seed", type=int, default=0)

    a = sub.add_parser("ablation", help="random / untrained / one-hot / two-hot table")
    a.add_argument("--pack", required=True)
    a.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    a.add_argument("--csv", default=None, help="also write the table here")
    _add_train_knobs(a)

    z = sub.add_parser("generalize", help="train on one configuration, test on others")
    z.add_argument("--pack", required=True)
    z.add_argument("--train-config", required=True)
    z.add_argument("--test-configs", type=_config_list, required=True)
    z.add_argument("--mode", choices=["supervised", "mcpt"], default="supervised")
    z.add_argument("--target", choices=[TWO_HOT, ONE_HOT], default=TWO_HOT)
    z.add_argument("--seed", type=int, default=0)
    _add_train_knobs(z)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and both networks")
    c.add_argument("--seeds", type=int, default=5, help="number of seeds (default 5)")
    c.add_argument("--channels", type=_int_list, default=[16, 32, 64, 64])
    c.add_argument("--image-size", type=int, default=32)

    r = sub.add_parser("report", help="evaluate a checkpoint and emit CSV and JSON reports")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--pack", required=True)
    r.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    r.add_argument("--split-seed", type=int, default=0)
    r.add_argument("--csv", required=True)
    r.add_argument("--json", required=True)
    return p


def _canonical(name: str) -> str:
    try:
        return canonical_config(name)
    except UnsupportedConfiguration:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cmd_generate(args, argv):
    counts = {_canonical(c): args.count for c in args.config}
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    pack = generate_dataset(counts, args.seed, args.resolution, args.out)
    print(f"wrote {len(pack)} problems ({', '.join(f'{k}={v}' for k, v in pack.counts().items())}) "
          f"to {args.out}")
    H.append_log(args.log, argv, [args.seed], {"problems": len(pack), "dataset_id": H.pack_id(pack)})


def _cmd_train(args, argv):
    pack = load_pack(args.pack)
    if args.resolution is not None and pack.resolution[0] != args.resolution:
        raise PackError(f"pack resolution {pack.resolution[0]} does not match --resolution {args.resolution}")
    cfg = _train_config(args)
    split = H.split_dataset(pack, args.split_seed)

    def progress(epoch, loss):
        print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.5f}", flush=True)

    res = H.train(pack, split.train, args.mode, args.seed, cfg, target=args.target, progress=progress)
    state = res.optimizer.state if res.optimizer is not None else None
    seeds = {"seed": args.seed, "split_seed": args.split_seed, "mode": args.mode, "target": args.target}
    save_checkpoint(res.model, args.checkpoint_out, state, seeds)
    val = H.evaluate(res.model, pack, split.val, args.mode, seed=args.seed)
    print(f"validation accuracy {val.overall:.4f} on {val.n} problems; checkpoint {args.checkpoint_out}")
    H.append_log(args.log, argv, [args.seed, args.split_seed],
                 {"epoch_losses": res.epoch_losses, "val_accuracy": val.overall,
                  "model_id": H.model_id(res.model), "dataset_id": val.dataset_id})


def _evaluate_checkpoint(args):
    ck = load_checkpoint(args.checkpoint)
    pack = load_pack(args.pack)
    if pack.resolution[0] != ck.model.spec.image_size:
        raise PackError(f"pack resolution {pack.resolution[0]} does not match the "
                        f"checkpoint's {ck.model.spec.image_size}")
    idx = H.split_dataset(pack, args.split_seed).part(args.split)
    seed = (ck.seeds or {}).get("seed")
    return H.evaluate(ck.model, pack, idx, H.mode_of(ck.model), seed=seed)


def _cmd_eval(args, argv):
    rep = _evaluate_checkpoint(args)
    print(f"{args.split} accuracy {rep.overall:.4f} on {rep.n} problems ({rep.mode})")
    for cfg, acc in rep.per_config.items():
        print(f"  {cfg:8s} {acc:.4f}  n={rep.counts[cfg]}")
    H.append_log(args.log, argv, [rep.seed, args.split_seed], rep.to_dict())


def _cmd_report(args, argv):
    rep = _evaluate_checkpoint(args)
    rows = rep.rows(rep.mode)
    H.write_csv(rows, args.csv)
    H.write_json({"report": rep.to_dict(), "rows": rows, "split": args.split,
                  "split_seed": args.split_seed}, args.json)
    sys.stdout.write(H.rows_to_csv(rows))
    H.append_log(args.log, argv, [rep.seed, args.split_seed], rep.to_dict())


def _cmd_ablation(args, argv):
    if not args.seeds:
        raise UsageError("--seeds needs at least one seed")
    pack = load_pack(args.pack)
    res = H.run_ablation(pack, args.seeds, _train_config(args), split_seed=args.split_seed)
    text = H.rows_to_csv(res.rows)
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(text)
    H.append_log(args.log, argv, args.seeds, {"rows": res.rows, "per_seed": res.per_seed})


def _cmd_generalize(args, argv):
    _canonical(args.train_config)
    for name in args.test_configs:
        try:
            _canonical(name)
        except UnsupportedConfiguration:
            pass  # reported as unsupported in the output table
    pack = load_pack(args.pack)
    res = H.run_generalization(pack, args.train_config, args.test_configs, args.mode, args.seed,
                               _train_config(args), split_seed=args.split_seed, target=args.target)
    rows = res.rows(f"generalize-{args.mode}")
    sys.stdout.write(H.rows_to_csv(rows))
    H.append_log(args.log, argv, [args.seed, args.split_seed], {"rows": rows})


def _cmd_gradcheck(args, argv):
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    summary = H.gradcheck_suite(range(args.seeds), tuple(args.channels), args.image_size)
    for name, err in summary.errors.items():
        print(f"{name:24s} {err:.3e}")
    top = summary.max_error
    print(f"max relative error {top:.3e} (tolerance {GRADCHECK_TOLERANCE:g}); "
          f"{summary.checked} coordinates checked, {summary.skipped} skipped at kinks")
    H.append_log(args.log, argv, list(range(args.seeds)),
                 {"max_relative_error": top, "per_case": summary.errors,
                  "checked": summary.checked, "skipped": summary.skipped})
    if not np.isfinite(top) or top > GRADCHECK_TOLERANCE:
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "generate": _cmd_generate, "train": _cmd_train, "eval": _cmd_eval, "report": _cmd_report,
    "ablation": _cmd_ablation, "generalize": _cmd_generalize, "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv) or EXIT_OK
    except (UsageError, UnsupportedConfiguration) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PackError, CheckpointError, LabelAccessError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

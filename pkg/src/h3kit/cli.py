"""Command-line entry point: ``h3kit <subcommand> [--config file.json] [flags]``.

Every subcommand computes its full result before touching the output path and
then writes it atomically, so a failed run leaves no partial files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np


class CLIError(Exception):
    pass


def _write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _emit(args, payload: str) -> None:
    if args.out:
        _write_atomic(args.out, payload)
    else:
        sys.stdout.write(payload)


def _merge_config(args, parser) -> argparse.Namespace:
    """Values from ``--config`` fill every flag the user did not pass."""
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CLIError(f"cannot read config {args.config}: {err}") from None
    if not isinstance(cfg, dict):
        raise CLIError("config must be a JSON object")
    defaults = vars(parser.parse_args([args.command]))
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if attr not in defaults:
            raise CLIError(f"unknown config key {key!r} for {args.command}")
        if getattr(args, attr) == defaults[attr]:
            setattr(args, attr, value)
    return args


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _spec(args):
    from .synth import TaskSpec

    return TaskSpec(args.task, seq_len=args.seq_len, vocab_size=args.vocab,
                    n_train=args.n_train, n_test=args.n_test, seed=args.seed)


def cmd_gen_task(args) -> None:
    from .synth import generate

    spec = _spec(args)
    if not args.out:
        raise CLIError("gen-task needs --out DIR")
    out = Path(args.out)
    parts = {f"{s}.jsonl": generate(spec, s) for s in ("train", "test")}
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in parts.items():
        lines = "".join(json.dumps({"tokens": t.tolist(), "target": int(y)}) + "\n"
                        for t, y in zip(ds.tokens, ds.targets))
        _write_atomic(out / name, lines)
    from dataclasses import asdict
    _write_atomic(out / "spec.json", _dumps(asdict(spec)))


def cmd_train(args) -> None:
    from .synth import run_experiment

    model_over = {k: v for k, v in (("n_layers", args.n_layers), ("d", args.d), ("H", args.heads),
                                    ("m", args.m), ("mlp_dim", args.mlp_dim)) if v is not None}
    spec_over = {k: v for k, v in (("seq_len", args.seq_len), ("vocab_size", args.vocab),
                                   ("n_train", args.n_train), ("n_test", args.n_test)) if v is not None}
    train_over = {"batch_size": args.batch_size, "lr": args.lr, "weight_decay": args.weight_decay}
    progress = None
    if args.verbose:
        progress = lambda e, l: print(f"epoch {e + 1}: loss {l:.5f}", file=sys.stderr)
    report, model = run_experiment(args.task, args.layer, args.seed, epochs=args.epochs,
                                   eval_lens=args.eval_len or (), spec_overrides=spec_over,
                                   model_overrides=model_over, train_overrides=train_over,
                                   progress=progress)
    payload = report.to_json(timing=not args.no_timing) + "\n"
    if args.checkpoint:
        tmp = Path(args.checkpoint).with_name(f".{Path(args.checkpoint).name}.tmp")
        model.save(tmp)
        os.replace(tmp, args.checkpoint)
    _emit(args, payload)


def cmd_eval(args) -> None:
    from .model import Model
    from .synth import Dataset, eval_last_token, generate

    if not args.checkpoint:
        raise CLIError("eval needs --checkpoint")
    model = Model.load(args.checkpoint)
    if args.data:
        ds = Dataset.load(args.data)
        source = args.data
    else:
        spec = _spec(args)
        ds = generate(spec, "test")
        source = f"{spec.kind} seq_len={spec.seq_len} seed={spec.seed}"
    acc = eval_last_token(model, ds)
    _emit(args, _dumps({"checkpoint": str(args.checkpoint), "data": source,
                        "n": len(ds), "seq_len": int(ds.tokens.shape[1]), "accuracy": acc}))


def cmd_verify(args) -> None:
    from .construct import ConstructionFailure, verify_construction

    try:
        report = verify_construction(args.samples, seed=args.seed, N=args.seq_len or 20)
    except ConstructionFailure as err:
        if args.counterexample:
            err.dump(args.counterexample)
        raise CLIError(f"construction check failed: {err}") from None
    _emit(args, _dumps(report))


def cmd_bench(args) -> None:
    from .bench import BenchConfig, run_bench

    kw = {"seed": args.seed}
    for name in ("algorithms", "seq_lens", "batch", "d", "repeats", "warmup", "chunk"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    if args.full_size:
        kw["d"] = 1024
    cfg = BenchConfig(**kw)
    progress = None
    if args.verbose:
        progress = lambda r: print(f"{r['algorithm']:>18} N={r['N']:>6} {r['median_ms']:.3f} ms", file=sys.stderr)
    report = run_bench(cfg, progress=progress)
    payload = _dumps(report.to_dict(timing=not args.no_timing))
    if args.out:
        out = Path(args.out)
        if out.suffix == ".csv":
            _write_atomic(out, report.to_csv())
            _write_atomic(out.with_suffix(".json"), payload)
        else:
            _write_atomic(out, payload)
    else:
        sys.stdout.write(report.to_csv())


def cmd_selftest(args) -> None:
    from .selftest import run_selftest

    report = run_selftest(seed=args.seed)
    _emit(args, _dumps(report))
    if not report["ok"]:
        failed = [k for k, v in report["checks"].items() if not v["ok"]]
        raise CLIError(f"selftest failed: {', '.join(failed)}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="h3kit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output path (default: stdout)"):
        sp.add_argument("--config", help="JSON file whose keys fill unspecified flags")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help=out_help)

    def task_flags(sp, required=False):
        sp.add_argument("--task", choices=["induction_head", "associative_recall"],
                        default=None if required else "induction_head")
        sp.add_argument("--seq-len", type=int)
        sp.add_argument("--vocab", type=int)
        sp.add_argument("--n-train", type=int, default=5000)
        sp.add_argument("--n-test", type=int, default=500)

    sp = sub.add_parser("gen-task", help="write train/test JSONL for a synthetic task")
    common(sp, "output directory")
    task_flags(sp)
    sp.set_defaults(func=cmd_gen_task)

    sp = sub.add_parser("train", help="train a model and write its report")
    common(sp)
    task_flags(sp)
    sp.add_argument("--layer", choices=["h3", "attention", "s4d", "linear-attention"], default="h3")
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=5e-4)
    sp.add_argument("--weight-decay", type=float, default=0.1)
    sp.add_argument("--n-layers", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--mlp-dim", type=int)
    sp.add_argument("--eval-len", type=int, action="append", help="extra test length (repeatable)")
    sp.add_argument("--checkpoint", help="also save the trained model here")
    sp.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="last-token accuracy of a checkpoint")
    common(sp)
    task_flags(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", help="JSONL dataset (default: generate the test split)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify-construction", help="check the hand-built associative-recall H3")
    common(sp)
    sp.add_argument("--samples", type=int, default=500)
    sp.add_argument("--seq-len", type=int)
    sp.add_argument("--counterexample", help="where to dump a failing example")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("bench", help="time the sequence-mixing primitives")
    common(sp, "CSV (plus .json sibling) or JSON output path")
    sp.add_argument("--algorithms", nargs="+")
    sp.add_argument("--seq-lens", type=int, nargs="+")
    sp.add_argument("--batch", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--chunk", type=int)
    sp.add_argument("--full-size", action="store_true", help="use d = 1024")
    sp.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("selftest", help="run the built-in oracle checks")
    common(sp)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = _merge_config(args, parser)
        args.func(args)
    except (CLIError, ValueError, KeyError, TypeError, OSError, AssertionError, FloatingPointError) as err:
        print(f"h3kit {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

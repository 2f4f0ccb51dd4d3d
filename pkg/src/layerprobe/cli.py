"""``layerprobe`` command line.

Exit codes: 0 success, 1 internal or I/O failure, 2 usage error, 3 data/model
incompatibility.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import gradcheck, metrics, models, training
from .bank import BankError, SynthSpec, read_bank, synth_bank, validate_bank

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_INCOMPATIBLE = 0, 1, 2, 3

CONFIG = "config.json"
CHECKPOINT = "checkpoint.json"
METRICS = "metrics.json"
LAYER_WEIGHTS = "layer_weights.csv"
TRAIN_LOG = "train_log.csv"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _csv(header: str, rows) -> str:
    return header + "\n" + "".join(",".join(str(v) for v in row) + "\n" for row in rows)


def write_layer_weights(model: models.ProbeModel, path: Path) -> None:
    alpha = model.layer_alpha()
    rows = [(i, spec.name, repr(float(a))) for i, (spec, a) in enumerate(zip(model.layers, alpha))]
    _write_text(path, _csv("layer_index,layer_name,alpha", rows))


def _open_bank(path):
    try:
        return read_bank(path)
    except BankError as exc:
        raise CliError(EXIT_INCOMPATIBLE, f"cannot use bank: {exc}") from exc


def _restore(run_dir: Path) -> training.RunState:
    try:
        return training.restore(run_dir / CHECKPOINT)
    except training.CheckpointError as exc:
        raise CliError(EXIT_FAILURE, str(exc)) from exc


def _finish_run(run: training.RunState, bank, out: Path) -> None:
    training.checkpoint(run, out / CHECKPOINT)
    rows = [(h["epoch"], repr(h["lr"]), repr(h["loss"])) for h in run.history]
    _write_text(out / TRAIN_LOG, _csv("epoch,lr,loss", rows))
    _write_text(out / METRICS, training.dumps_json(metrics.evaluate(bank, run.model).to_json()))
    if run.model.strategy == "all":
        write_layer_weights(run.model, out / LAYER_WEIGHTS)


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CliError(EXIT_FAILURE, f"cannot read spec: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"invalid spec: not JSON ({exc})") from exc
    try:
        spec = SynthSpec.from_json(doc)
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(EXIT_USAGE, f"invalid spec: {exc}") from exc
    synth_bank(spec, args.out)
    problems = validate_bank(args.out)
    if problems:
        raise CliError(EXIT_FAILURE, "generated bank failed validation: " + "; ".join(problems))
    print(f"wrote bank to {args.out} ({spec.num_samples} samples, {len(spec.layers)} layers)")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = training.TrainConfig(epochs=args.epochs, warmup_epochs=args.warmup_epochs, peak_lr=args.lr,
                                   batch_size=args.batch_size, weight_decay=args.weight_decay,
                                   dropout=args.dropout, seed=args.seed)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"invalid configuration: {exc}") from exc
    if args.stop_after is not None and args.stop_after < 0:
        raise CliError(EXIT_USAGE, "--stop-after must be >= 0")
    bank = _open_bank(args.bank)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / CONFIG, training.dumps_json({"strategy": args.strategy, "head": args.head, **cfg.to_json()}))
    run = training.new_run(bank, args.strategy, args.head, cfg)
    training.run_epochs(run, bank, stop_after=args.stop_after)
    _finish_run(run, bank, out)
    print(f"trained {args.strategy}+{args.head} for {run.epoch}/{cfg.epochs} epochs; "
          f"final loss {run.history[-1]['loss']:.6g}" if run.history else "no epochs run")
    return EXIT_OK


def cmd_resume(args) -> int:
    run_dir = Path(args.run)
    run = _restore(run_dir)
    bank = _open_bank(args.bank)
    try:
        training.run_epochs(run, bank, stop_after=args.stop_after)
    except models.IncompatibleError as exc:
        raise CliError(EXIT_INCOMPATIBLE, str(exc)) from exc
    _finish_run(run, bank, run_dir)
    print(f"resumed to epoch {run.epoch}/{run.config.epochs}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run = _restore(run_dir)
    bank = _open_bank(args.bank)
    try:
        report = metrics.evaluate(bank, run.model)
    except models.IncompatibleError as exc:
        raise CliError(EXIT_INCOMPATIBLE, f"bank does not match the trained probe: {exc}") from exc
    _write_text(run_dir / METRICS, training.dumps_json(report.to_json()))
    print(f"{report.metric} = {report.value:.6f} over {report.num_samples} samples")
    return EXIT_OK


def cmd_export_weights(args) -> int:
    run_dir = Path(args.run)
    run = _restore(run_dir)
    if run.model.strategy != "all":
        raise CliError(EXIT_INCOMPATIBLE,
                       f"run uses strategy '{run.model.strategy}'; layer weights exist only for strategy 'all'")
    write_layer_weights(run.model, run_dir / LAYER_WEIGHTS)
    for spec, a in zip(run.model.layers, run.model.layer_alpha()):
        print(f"{spec.name}\t{a:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(instances=args.instances, seed=args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.component:<24} worst rel. err {r.worst:.3e}  (tol {r.tolerance:.0e}, {r.instances} instances)  {status}")
    failed = [r.component for r in results if not r.passed]
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    defaults = {f.name: f.default for f in fields(training.TrainConfig)}
    parser = argparse.ArgumentParser(prog="layerprobe", description="Train and evaluate probes on embedding banks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted-signal synthetic bank")
    p.add_argument("--spec", required=True, help="JSON synthetic-bank spec")
    p.add_argument("--out", required=True, help="bank directory to create")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a probe on a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--strategy", required=True, choices=models.STRATEGIES)
    p.add_argument("--head", required=True, choices=models.HEADS)
    p.add_argument("--epochs", type=int, default=defaults["epochs"])
    p.add_argument("--warmup-epochs", type=int, default=defaults["warmup_epochs"])
    p.add_argument("--lr", "--peak-lr", dest="lr", type=float, default=defaults["peak_lr"])
    p.add_argument("--batch-size", type=int, default=defaults["batch_size"])
    p.add_argument("--weight-decay", type=float, default=defaults["weight_decay"])
    p.add_argument("--dropout", type=float, default=defaults["dropout"])
    p.add_argument("--seed", type=int, default=defaults["seed"])
    p.add_argument("--stop-after", type=int, default=None, metavar="EPOCH",
                   help="stop once this many epochs are done (resume later with 'resume')")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue an interrupted training run")
    p.add_argument("--run", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--stop-after", type=int, default=None, metavar="EPOCH")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("eval", help="evaluate a trained probe on a bank")
    p.add_argument("--run", required=True)
    p.add_argument("--bank", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-weights", help="write layer_weights.csv for an all-layer run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--instances", type=int, default=gradcheck.DEFAULT_INSTANCES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"layerprobe {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except models.IncompatibleError as exc:
        print(f"layerprobe {args.command}: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except OSError as exc:
        print(f"layerprobe {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

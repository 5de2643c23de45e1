"""Command-line interface: ``deepbiz <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import data as dt
from . import experiments as ex
from . import gradient_suite
from . import pipeline as pl
from .errors import DeepBizError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this CLI reserves 2 for runtime errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fractions(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _json_dict(text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from None
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepbiz", description="Deep learning vs. classical baselines for business analytics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic case-study dataset as CSV plus schema")
    p.add_argument("--case", choices=ex.CASES, required=True)
    p.add_argument("--n", type=int, help="rows (insurance), hours (tickets) or days (sales)")
    p.add_argument("--stores", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, text in (("train", "fit one model on a CSV file"), ("tune", "grid-search one model on a CSV file")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--schema", required=True)
        p.add_argument("--model", choices=pl.MODEL_KINDS, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-epochs", type=int, default=100)
        p.add_argument("--patience", type=int, default=50)
        p.add_argument("--out", required=True)
        if name == "train":
            p.add_argument("--params", type=_json_dict, default={},
                           help='hyperparameters as JSON, e.g. \'{"alpha": 0.1}\'')
        else:
            p.add_argument("--smoke-grid", action="store_true")
            p.add_argument("--folds", type=int, default=10)
            p.add_argument("--workers", type=int, default=1)

    for name, text in (("study", "run a full case study"), ("sweep", "training-set size sensitivity")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--case", choices=ex.CASES, required=True)
        p.add_argument("--n", type=int)
        p.add_argument("--stores", type=int, default=50)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--data", help="CSV in the generator's column layout instead of synthetic data")
        p.add_argument("--schema")
        p.add_argument("--smoke-grid", action="store_true")
        p.add_argument("--models", help="comma-separated subset of the roster")
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", required=True)
        if name == "sweep":
            p.add_argument("--fractions", type=_fractions, default=[0.01, 0.02, 0.05, 0.1, 0.5, 1.0])

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="score a saved model on a CSV file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("report", help="render a results directory as an aligned table")
    p.add_argument("dir")
    return parser


def _study_config(args) -> ex.ExperimentConfig:
    models = args.models.split(",") if args.models else None
    return ex.ExperimentConfig(args.case, n=args.n, stores=args.stores, seed=args.seed, csv_path=args.data,
                               schema_path=args.schema, grid="smoke" if args.smoke_grid else "full",
                               models=models, max_epochs=args.max_epochs, workers=args.workers,
                               out_dir=args.out)


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n or ex.DESK_DEFAULTS[args.case]["n"]
    if args.case == "insurance":
        ds = dt.synth_insurance(n, args.seed)
    elif args.case == "tickets":
        ds = dt.synth_tickets(n, args.seed)
    else:
        ds = dt.synth_sales(n, args.stores, args.seed)
    dt.write_csv(ds, out / f"{args.case}.csv", out / f"{args.case}.schema")
    print(f"wrote {len(ds)} rows to {out / (args.case + '.csv')}")


def cmd_train(args):
    ds = dt.load_csv(args.data, args.schema)
    pipe, curve = pl.fit_pipeline(ds, args.model, args.params, args.seed,
                                  max_epochs=args.max_epochs, patience=args.patience)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(pipe.to_json())
    if curve is not None:
        curve.to_csv(out / "learning_curve.csv")
    report = pipe.evaluate(ds)
    print(json.dumps({"model": args.model, "params": pipe.params, "train_metrics": report.to_dict()}))


def cmd_tune(args):
    ds = dt.load_csv(args.data, args.schema)
    grid = pl.tuning_grid(args.model, args.smoke_grid, args.seed)
    best, trials = pl.tune(ds, args.model, grid, args.folds, args.seed, args.workers,
                           args.max_epochs, args.patience)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trials.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config", "score", "error"])
        for t in trials:
            writer.writerow([json.dumps(t.config, sort_keys=True),
                             "" if t.score is None else repr(t.score), t.error or ""])
    pipe, curve = pl.fit_pipeline(ds, args.model, best, args.seed,
                                  max_epochs=args.max_epochs, patience=args.patience)
    (out / "model.json").write_text(pipe.to_json())
    (out / "best.json").write_text(json.dumps(best, sort_keys=True) + "\n")
    if curve is not None:
        curve.to_csv(out / "learning_curve.csv")
    print(json.dumps({"best": best, "trials": len(trials), "failed": sum(t.failed for t in trials)}))


def cmd_study(args):
    table = ex.run_case_study(_study_config(args))
    print(table.to_text(), end="")


def cmd_sweep(args):
    config = _study_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = config.models if args.models else ("forest", None)
    points = ex.size_sensitivity_sweep(config, args.fractions, models=models, path=out / "sweep.csv")
    for p in points:
        print(f"{p.fraction:g}\t{p.model}\t{p.n_train}\t{p.metric:.6f}")


def cmd_gradcheck(args):
    errors = gradient_suite.run_suite(args.seed)
    width = max(len(k) for k in errors)
    for name, err in errors.items():
        print(f"{name.ljust(width)}  {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < gradient_suite.TOLERANCE else 2


def cmd_eval(args):
    pipe = pl.TabularPipeline.from_json(Path(args.model).read_text())
    ds = dt.load_csv(args.data, pipe.schema, pipe.vocabularies)
    print(pipe.evaluate(ds).to_json())


def cmd_report(args):
    path = Path(args.dir) / "results.csv"
    if not path.exists():
        raise DeepBizError(f"no results.csv in {args.dir}")
    study = ""
    manifest = Path(args.dir) / "manifest.json"
    if manifest.exists():
        study = json.loads(manifest.read_text()).get("config", {}).get("case", "")
    print(ex.ResultTable.from_csv(path, study).to_text(), end="")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "tune": cmd_tune, "study": cmd_study, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck, "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = COMMANDS[args.command](args)
    except (DeepBizError, OSError, ValueError) as exc:
        print(f"deepbiz {args.command}: {exc}", file=sys.stderr)
        return 2
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``glmix-stream <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import bisect
import json
import re
import sys

import numpy as np

from .datasets import DataError, FOURTEEN_DAYS_MS, HOUR_MS, prepare_movielens, synth_drift_stream
from .evaluation import (EvalConfig, decay_experiment, delta_sweep, theorem_suite, run_eval,
                         write_gap_rows)
from .incremental import CovarianceError
from .model import (DimensionMismatchError, GameModel, SchemaError, TrainerConfig, read_instances,
                    write_instances)
from .sampler import derive_seed
from .solver import SolverError, train_batch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_UNITS = {"ms": 1, "s": 1000, "m": 60_000, "h": HOUR_MS, "d": 24 * HOUR_MS}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_duration(text: str) -> int:
    """``"30m"``, ``"1h"``, ``"8h"``, ``"1.5h"``, ``"0"`` -> milliseconds."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*(ms|s|m|h|d)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r}")
    value, unit = float(m.group(1)), m.group(2)
    if unit is None and value != 0:
        raise argparse.ArgumentTypeError(f"duration {text!r} needs a unit (ms, s, m, h, d)")
    return int(round(value * _UNITS[unit or "ms"]))


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number list {text!r}") from None


def _duration_list(text: str) -> list[int]:
    return [parse_duration(v) for v in text.replace(",", " ").split()]


def _hessian(text: str) -> str:
    modes = {"full": "full", "diag": "diagonal", "diagonal": "diagonal"}
    if text not in modes:
        raise argparse.ArgumentTypeError("hessian must be 'full' or 'diag'")
    return modes[text]


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _manifest_path(out: str) -> str:
    return (out[:-6] if out.endswith(".jsonl") else out) + ".manifest.json"


def _load_instances(path):
    try:
        data = read_instances(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    if not data:
        raise DataError(f"{path}: no instances")
    return data


def _trainer(args) -> TrainerConfig:
    if args.rounds < 1:
        raise UsageError("--rounds must be at least 1")
    try:
        return TrainerConfig(delta=args.delta, lam=args.lam, hessian_mode=args.hessian)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- commands -------------------------------------------------------------

def cmd_prepare_movielens(args) -> int:
    try:
        instances, manifest = prepare_movielens(args.ratings, rank=args.rank, seed=args.seed,
                                                max_users=args.max_users, max_items=args.max_items,
                                                target_span_ms=args.span)
    except FileNotFoundError:
        raise DataError(f"ratings file not found: {args.ratings}") from None
    write_instances(args.out, instances)
    _write_json(_manifest_path(args.out), manifest)
    return EXIT_OK


def cmd_prepare_synth(args) -> int:
    s = synth_drift_stream(args.entities, args.per_entity, args.drift_at, args.drift_magnitude,
                           seed=args.seed, span_ms=args.span, features=args.features)
    write_instances(args.out, s.instances)
    base = args.out[:-6] if args.out.endswith(".jsonl") else args.out
    s.write_truth_log(base + ".truth.jsonl")
    manifest = {"source": "synthetic", "instances": len(s.instances),
                "span_ms": [s.instances[0].timestamp, s.instances[-1].timestamp],
                "drift_ts": s.drift_ts, "fixed_dim": s.fixed_dim, "re_dims": s.re_dims, **s.meta}
    _write_json(_manifest_path(args.out), manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    trainer = _trainer(args)
    data = _load_instances(args.data)
    ts = [i.timestamp for i in data]
    cold = data[:bisect.bisect_left(ts, args.until_ts)]
    if not cold:
        raise DataError("empty training window")
    model = train_batch(cold, trainer, args.rounds)
    model.metadata.update({"until_ts": args.until_ts, "lambda": args.lam, "seed": args.seed})
    model.save(args.out)
    return EXIT_OK


def _base_model(args, data):
    if args.model is None:
        return None, args.warm_start_ts
    model = GameModel.load(args.model)
    ws = args.warm_start_ts
    if ws is None:
        ws = model.metadata.get("until_ts", model.metadata.get("trained_until_ts"))
    return model, ws


def cmd_eval(args) -> int:
    variant = args.variant.upper()
    if args.tau is not None and variant != "RWBU":
        raise UsageError("--tau applies only to --variant rwbu")
    data = _load_instances(args.data)
    base, ws = _base_model(args, data)
    try:
        cfg = EvalConfig(variant, args.Delta, args.tau or 0, ws, _trainer(args), args.rounds,
                         derive_seed(args.seed, "eval"), args.sampled)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = run_eval(data, cfg, base)
    res.to_csv(args.out)
    print(json.dumps({"variant": variant, "aggregate_auc": res.aggregate_auc,
                      "increments": len(res.increments),
                      "degenerate": res.metadata["degenerate_increments"]}, sort_keys=True))
    return EXIT_OK


def cmd_decay(args) -> int:
    data = _load_instances(args.data)
    cfg = EvalConfig("LL", args.Delta, 0, None, _trainer(args), args.rounds)
    start_range = None
    if args.start_from is not None or args.start_to is not None:
        start_range = (args.start_from if args.start_from is not None else data[0].timestamp,
                       args.start_to if args.start_to is not None
                       else data[-1].timestamp + 1 - args.horizon * args.Delta)
    res = decay_experiment(data, cfg, args.horizon, args.runs, start_range,
                           seed=derive_seed(args.seed, "decay-starts"))
    res.to_csv(args.out)
    print(json.dumps({"slope_NU": res.slope("NU"), "slope_LL": res.slope("LL"),
                      "runs": args.runs, "ci_defined": res.ci_defined}, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    data = _load_instances(args.data)
    base, ws = _base_model(args, data)
    cfg = EvalConfig("LL", args.Deltas[0], 0, ws, _trainer(args), args.rounds)
    res = delta_sweep(data, args.deltas, args.Deltas, cfg, base, workers=args.workers)
    res.to_csv(args.out)
    print(json.dumps({"best_delta": {str(k): v for k, v in res.best_delta().items()}},
                     sort_keys=True))
    return EXIT_OK


def cmd_theorems(args) -> int:
    reports = theorem_suite(args.trials, derive_seed(args.seed, "theorems"), C=args.C,
                            hessian_mode=args.hessian)
    rows = [(k, r) for k, rep in enumerate(reports) for r in rep.rows]
    write_gap_rows(args.out, rows)
    n_pass = sum(rep.passed for rep in reports)
    print(json.dumps({"trials": args.trials, "passed": n_pass, "C": args.C}, sort_keys=True))
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glmix-stream", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    prep = sub.add_parser("prepare", help="build an instance file")
    psub = prep.add_subparsers(dest="source", required=True, parser_class=_Parser)
    ml = psub.add_parser("movielens", help="ratings CSV -> instances")
    ml.add_argument("--ratings", required=True)
    ml.add_argument("--rank", type=int, default=30)
    ml.add_argument("--max-users", type=int)
    ml.add_argument("--max-items", type=int)
    ml.add_argument("--span", type=parse_duration, default=FOURTEEN_DAYS_MS,
                    help="time span the ratings are compressed into (default 14d)")
    ml.add_argument("--seed", type=int, default=0)
    ml.add_argument("--out", required=True)
    ml.set_defaults(func=cmd_prepare_movielens)
    sy = psub.add_parser("synth", help="synthetic drifting stream")
    sy.add_argument("--entities", type=int, required=True)
    sy.add_argument("--per-entity", type=int, required=True)
    sy.add_argument("--drift-at", type=float, default=0.5)
    sy.add_argument("--drift-magnitude", type=float, default=2.0)
    sy.add_argument("--span", type=parse_duration, default=96 * HOUR_MS)
    sy.add_argument("--features", choices=("gaussian", "onehot"), default="gaussian")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_prepare_synth)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True)
        sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
        sp.add_argument("--delta", type=float, default=0.95, help="forgetting factor")
        sp.add_argument("--hessian", type=_hessian, default="full")
        sp.add_argument("--rounds", type=int, default=3)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="batch-train on instances before --until-ts")
    common(tr)
    tr.add_argument("--until-ts", type=int, required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate one update variant")
    common(ev)
    ev.add_argument("--variant", choices=("nu", "ibu", "rwbu", "ll"), required=True)
    ev.add_argument("--Delta", type=parse_duration, default=HOUR_MS)
    ev.add_argument("--tau", type=parse_duration)
    ev.add_argument("--model")
    ev.add_argument("--warm-start-ts", type=int)
    ev.add_argument("--sampled", action="store_true", help="score with Thompson samples")
    ev.set_defaults(func=cmd_eval)

    de = sub.add_parser("decay", help="NU vs LL accuracy over time since training")
    common(de)
    de.add_argument("--runs", type=int, default=10)
    de.add_argument("--horizon", type=int, default=24, help="increments per run")
    de.add_argument("--Delta", type=parse_duration, default=HOUR_MS)
    de.add_argument("--start-from", type=int)
    de.add_argument("--start-to", type=int)
    de.set_defaults(func=cmd_decay)

    sw = sub.add_parser("sweep", help="LL AUC over forgetting factors and intervals")
    common(sw)
    sw.add_argument("--deltas", type=_float_list, required=True)
    sw.add_argument("--Deltas", type=_duration_list, required=True)
    sw.add_argument("--model")
    sw.add_argument("--warm-start-ts", type=int)
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    th = sub.add_parser("theorems", help="randomized optimality-gap checks")
    common(th, data=False)
    th.add_argument("--trials", type=int, default=100)
    th.add_argument("--C", type=float, default=10.0)
    th.set_defaults(func=cmd_theorems)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, CovarianceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, SchemaError, DimensionMismatchError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

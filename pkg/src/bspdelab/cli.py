"""Command-line front end: run experiments, compare records, replay runs.

Only stdlib is imported at module level: thread environment variables must be
exported before numpy first loads, so the numeric stack is imported inside
main() after the flags are known.

Exit codes: 0 success, 2 invalid config or arguments, 3 numeric failure
during an experiment, 4 replay divergence.
"""

import argparse
import json
import os
import sys

THREADS_ENV = "BSPDELAB_THREADS"

_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
              "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_threads(threads, reproducible):
    """Resolve the thread count (flag > env > unset) and export it for BLAS."""
    if reproducible:
        threads = 1
    elif threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if raw:
            try:
                threads = int(raw)
            except ValueError:
                raise SystemExit(
                    f"error: {THREADS_ENV}={raw!r} is not an integer")
    if threads is not None:
        if threads < 1:
            raise SystemExit(f"error: thread count must be >= 1, got {threads}")
        for var in _BLAS_VARS:
            os.environ[var] = str(threads)
    return threads


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        print(f"error: no such file: {path}", file=sys.stderr)
        raise SystemExit(2)
    except json.JSONDecodeError as exc:
        print(f"error: {path} is not valid JSON "
              f"(line {exc.lineno}, column {exc.colno}): {exc.msg}", file=sys.stderr)
        raise SystemExit(2)


def _parser():
    parser = argparse.ArgumentParser(
        prog="bspdelab",
        description="Finite-element experiments for backward stochastic "
                    "parabolic equations and stochastic LQ control.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config", help="path to a JSON experiment config")
    run.add_argument("--out", help="output directory (overrides config)")
    run.add_argument("--seed", type=int, help="base seed (overrides config)")
    run.add_argument("--threads", type=int,
                     help=f"BLAS thread count (default: ${THREADS_ENV})")
    run.add_argument("--reproducible", action="store_true",
                     help="single-threaded ordered reductions")

    rep = sub.add_parser("report", help="markdown table comparing records")
    rep.add_argument("records", nargs="+", help="record.json paths")

    replay = sub.add_parser("replay", help="re-run a record and compare results")
    replay.add_argument("record", help="record.json path")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)

    if args.command == "run":
        config = _load_json(args.config)
        if isinstance(config, dict):
            if args.seed is not None:
                config["seed"] = args.seed
            if args.out is not None:
                config["out_dir"] = args.out
            threads = _apply_threads(args.threads, args.reproducible)
            config["threads"] = threads
            config["reproducible"] = bool(args.reproducible or
                                          config.get("reproducible", False))
        from . import experiments as exp
        from .fem import NumericFailure
        if not isinstance(config, dict):
            print("error: config must be a JSON object", file=sys.stderr)
            return 2
        try:
            record = exp.run_experiment(config)
        except exp.ConfigError as app:
            where = f" (field: {app.path})" if app.path else ""
            print(f"error: invalid config{where}: {app}", file=sys.stderr)
            return 2
        except NumericFailure as nf:
            print(f"error: numeric failure in {config.get('kind')}: {nf}",
                  file=sys.stderr)
            return 3
        out_dir = record["config"]["out_dir"]
        written = exp.write_outputs(record, out_dir)
        for path in written:
            print(path)
        return 0

    if args.command == "report":
        records = [_load_json(p) for p in args.records]
        from . import experiments as exp
        try:
            table = exp.report_table(records)
        except ValueError as bad:
            print(f"error: {bad}", file=sys.stderr)
            return 2
        sys.stdout.write(table)
        return 0

    # replay: apply the recorded thread setting before the numeric stack loads
    record = _load_json(args.record)
    if not isinstance(record, dict) or "config" not in record:
        print("error: record has no config section", file=sys.stderr)
        return 2
    stored = record["config"] if isinstance(record["config"], dict) else {}
    _apply_threads(stored.get("threads"), stored.get("reproducible", False))
    from . import experiments as exp
    from .fem import NumericFailure
    try:
        _, divergence = exp.replay_record(record)
    except (exp.ConfigError, ValueError) as bad:
        print(f"error: {bad}", file=sys.stderr)
        return 2
    except NumericFailure as nf:
        print(f"error: numeric failure during replay: {nf}", file=sys.stderr)
        return 3
    if divergence:
        print(f"replay mismatch: {divergence}", file=sys.stderr)
        return 4
    print("replay matched: all result fields identical")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

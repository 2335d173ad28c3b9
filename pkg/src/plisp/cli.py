"""Command line interface: run inference, compute ESS reports, run the benchmark.

Exit codes: 0 success, 1 usage error, 2 program error, 3 inference failure
(every particle weight zero).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .errors import AllWeightsZeroError, LispError
from .inference import METHODS, run_chain
from .lgss import emit_lgss_program, make_lgss_spec, run_benchmark, simulate_lgss
from .records import (
    EmptyInputError,
    compute_ess,
    ess_rows_to_json,
    read_jsonl,
    record_to_json,
)
from .syntax import parse_program


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _write_lines(lines, path):
    if path is None or path == "-":
        for line in lines:
            print(line)
    else:
        with open(path, "w") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")


def _cmd_run(args):
    with open(args.program) as fh:
        text = fh.read()
    program = parse_program(text)
    records, _ = run_chain(program, args.method, args.particles, args.sweeps, args.seed)
    _write_lines((record_to_json(r) for r in records), args.output)
    return 0


def _cmd_ess(args):
    records = read_jsonl(args.input)
    rows = compute_ess(records)
    _write_lines(ess_rows_to_json(rows).splitlines(), args.output)
    return 0


def _cmd_bench_lgss(args):
    methods = [m.strip() for m in args.method.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise LispError(f"unknown method {m!r}")
    spec = make_lgss_spec(D=args.d, T=args.t, q=args.q, r=args.r, seed=args.seed)
    sim_rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(903,)))
    _, ys = simulate_lgss(spec, sim_rng)
    text = emit_lgss_program(spec, ys, predict_states=True)

    summary = {
        "spec": {"D": spec.D, "T": spec.T, "omega": spec.omega, "q": spec.q,
                 "r": spec.r, "seed": spec.seed},
        "particles": args.particles,
        "sweeps": args.sweeps,
        "restarts": args.restarts,
        "methods": {},
    }
    started = time.monotonic()
    results = run_benchmark(
        text, methods, args.particles, args.sweeps, args.restarts, args.seed,
        workers=args.workers, keep_records=args.records_dir is not None,
    )
    elapsed = time.monotonic() - started
    for method in methods:
        slot = results[method]
        if args.records_dir is not None:
            for restart, records in enumerate(slot["records"]):
                path = f"{args.records_dir}/{method}-restart{restart}.jsonl"
                _write_lines((record_to_json(r) for r in records), path)
        ess_rows = [
            {"target": "x", "group": t, "ess": float(np.median(vals))}
            for t, vals in sorted(slot["ess"].items())
        ]
        summary["methods"][method] = {
            "ess": ess_rows,
            "omega": {"restart_means": slot["omega_means"],
                      "mean": float(np.mean(slot["omega_means"]))},
            "q": {"restart_means": slot["q_means"],
                  "mean": float(np.mean(slot["q_means"]))},
        }
    summary["seconds"] = elapsed
    out = json.dumps(summary, indent=2, sort_keys=True)
    _write_lines([out], args.output)
    return 0


def build_parser():
    parser = _Parser(prog="plisp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run inference on a program file")
    run_p.add_argument("program")
    run_p.add_argument("--method", choices=METHODS, default="smc")
    run_p.add_argument("--particles", type=int, default=10)
    run_p.add_argument("--sweeps", type=int, default=1)
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--output", default=None)
    run_p.add_argument("--format", choices=["jsonl"], default="jsonl")
    run_p.set_defaults(fn=_cmd_run)

    ess_p = sub.add_parser("ess", help="compute ESS per predict label from JSONL records")
    ess_p.add_argument("input")
    ess_p.add_argument("--output", default=None)
    ess_p.set_defaults(fn=_cmd_ess)

    bench_p = sub.add_parser("bench-lgss", help="simulate, generate, and run the LGSS benchmark")
    bench_p.add_argument("--t", type=int, default=50)
    bench_p.add_argument("--d", type=int, default=8)
    bench_p.add_argument("--particles", type=int, default=10)
    bench_p.add_argument("--sweeps", type=int, default=100)
    bench_p.add_argument("--method", default="pgas,icsmc")
    bench_p.add_argument("--restarts", type=int, default=5)
    bench_p.add_argument("--seed", type=int, default=0)
    bench_p.add_argument("--q", type=float, default=0.1)
    bench_p.add_argument("--r", type=float, default=0.01)
    bench_p.add_argument("--workers", type=int, default=None,
                         help="parallel restart jobs (default: one per CPU)")
    bench_p.add_argument("--output", default=None)
    bench_p.add_argument("--records-dir", default=None)
    bench_p.set_defaults(fn=_cmd_bench_lgss)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.fn(args)
    except AllWeightsZeroError as exc:
        print(f"plisp: inference failed: {exc}", file=sys.stderr)
        return 3
    except (LispError, EmptyInputError, OSError) as exc:
        print(f"plisp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

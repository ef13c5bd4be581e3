"""Command-line entry point ``csahomog``.

    csahomog run <config> [--method M] [--rho R] [--delta D] [--seed S] [--out DIR]
                          [--threads N] [--set KEY=VALUE ...]
    csahomog compare <dirA> <dirB> [--probes A,B,C,D] [--replay] [--out FILE]
    csahomog bench <matrix-config>

Exit codes: 0 success, 2 configuration error, 3 non-convergence, 4 micro
failure. Failures print one line ``csahomog: code=<n> kind=<kind> message=<text>``
to stderr.
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, apply, load_config
from .harness import RunError, bench, compare, run

__all__ = ["main"]


def _fail(code: int, kind: str, message: str) -> int:
    text = " ".join(str(message).split())
    print(f"csahomog: code={code} kind={kind} message={text}", file=sys.stderr)
    return code


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csahomog", description="Two-scale homogenization runs.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one simulation")
    r.add_argument("config")
    r.add_argument("--method", choices=("fe2", "csa", "pod"))
    r.add_argument("--rho")
    r.add_argument("--delta")
    r.add_argument("--seed")
    r.add_argument("--out")
    r.add_argument("--threads")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    c = sub.add_parser("compare", help="coefficient and displacement errors of run A vs run B")
    c.add_argument("dir_a")
    c.add_argument("dir_b")
    c.add_argument("--probes", help="comma-separated probe names (default: all)")
    c.add_argument("--replay", action="store_true",
                   help="re-solve reference micro problems along A's deformation trace")
    c.add_argument("--out", help="CSV path (default: <dir_a>/compare.csv)")
    b = sub.add_parser("bench", help="run a matrix of variants and tabulate timings")
    b.add_argument("matrix")
    return ap


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    for key in ("method", "rho", "delta", "seed", "out", "threads"):
        value = getattr(args, key)
        if value is not None:
            apply(cfg, key, value, "--")
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        apply(cfg, k, v, "--set ")
    summary = run(cfg)
    if summary.failed_steps:
        steps = ",".join(map(str, summary.failed_steps))
        return _fail(3, "non_convergence", f"steps {steps} did not converge")
    print(f"csahomog: ok out={summary.out} micro_solves={summary.timing['micro_solves']} "
          f"macro_iterations={summary.timing['macro_iterations']}")
    return 0


def _cmd_compare(args) -> int:
    probes = args.probes.split(",") if args.probes else None
    result = compare(args.dir_a, args.dir_b, probes, args.replay, args.out)
    for p, res in result.items():
        for qn in ("S", "A", "u"):
            rows = res[qn]
            if not rows:
                continue
            worst = max(r[3] for r in rows)
            last_step = rows[-1][0]
            cum = max(r[4] for r in rows if r[0] == last_step)
            print(f"{p} {qn} max_rel={worst!r} cum={cum!r}")
    return 0


def _cmd_bench(args) -> int:
    for row in bench(args.matrix):
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return {"run": _cmd_run, "compare": _cmd_compare, "bench": _cmd_bench}[args.command](args)
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except RunError as exc:
        return _fail(exc.code, exc.kind, exc)


if __name__ == "__main__":
    sys.exit(main())

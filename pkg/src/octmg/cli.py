"""Command line entry point.

Exit codes: 0 converged, 2 not converged, 1 error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness as H

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

_SCALING_CASES = {"sphere2d": 2, "sphere3d": 3, "sphere_uniform": None}


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octmg",
                                description="Multigrid Poisson solver on block octrees "
                                            "with level-set boundaries.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one named experiment")
    run.add_argument("--case", choices=H.CASES)
    run.add_argument("--config", help="key = value file")
    run.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config key (repeatable)")
    run.add_argument("--out", help="output directory (overrides the out key)")

    sc = sub.add_parser("scaling", help="per-cycle cost over grid and block sizes")
    sc.add_argument("--case", default="sphere3d", choices=sorted(_SCALING_CASES))
    sc.add_argument("--sizes", type=_int_list, required=True, help="e.g. 64,128,256")
    sc.add_argument("--blocks", type=_int_list, default=None, help="e.g. 8,16,32")
    sc.add_argument("--cycles", type=int, default=10)
    sc.add_argument("--config")
    sc.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE")
    sc.add_argument("--out", required=True)
    return p


def _run(args) -> int:
    cfg = H.load_config(args.config, args.overrides, case=args.case)
    if args.out:
        cfg.out = args.out
    if not cfg.out:
        raise H.ConfigError("no output directory; pass --out or set out")
    run = H.run_case(cfg)
    H.write_outputs(run, cfg.out)
    rep = run.report
    for h in rep.history:
        print(f"cycle {h.cycle:3d}  max_resid {h.max_resid:.4e}  l2_resid {h.l2_resid:.4e}"
              f"  {h.seconds:.3f}s")
    if rep.errors:
        _, linf, l2, _ = rep.errors[-1]
        print(f"error  linf {linf:.4e}  l2 {l2:.4e}")
    print(f"{rep.message}; outputs in {cfg.out}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def _scaling(args) -> int:
    cfg = H.load_config(args.config, args.overrides)
    dim = _SCALING_CASES[args.case]
    if dim is not None:
        cfg.dim = dim
    if args.cycles < 1:
        raise H.ConfigError("cycles must be positive")
    rows = H.scaling_probe(cfg, args.sizes, args.blocks, cycles=args.cycles)
    path = H.write_scaling(rows, args.out)
    print(f"{'size':>6} {'block':>5} {'cells':>12} {'s/cycle':>10} {'t ratio':>8} {'n ratio':>8}")
    for r in rows:
        print(f"{r.size:6d} {r.block_size:5d} {r.cells:12d} {r.seconds_per_cycle:10.4f} "
              f"{r.time_ratio:8.3f} {r.cell_ratio:8.3f}")
    print(f"table written to {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _run(args)
        return _scaling(args)
    except H.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

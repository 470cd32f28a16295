"""Command-line entry point: ``measopt {run,sweep,ablate-optimizer,ablate-init,validate}``."""

from __future__ import annotations

import argparse
import logging
import statistics
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, config_from_dict, load_config
from .experiment import ablate_init, ablate_optimizer, nfe_sweep, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("measopt")


def _add_common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="YAML experiment config")
    src.add_argument("--preset", choices=sorted(PRESETS), help="start from a task preset")
    p.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    p.add_argument("--workers", type=int)
    p.add_argument("--nfe", type=int)
    p.add_argument("--sampler", choices=["dps-mo", "red-diff-mo", "dps"])
    p.add_argument("--sgld-steps", type=int)
    p.add_argument("--sgld-lr", type=float)
    p.add_argument("--best-of", type=int)


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seeds"] = [args.seed]
    if args.out is not None:
        o["output_dir"] = str(args.out)
    if args.workers is not None:
        o["workers"] = args.workers
    if args.best_of is not None:
        o["best_of"] = args.best_of
    if args.nfe is not None:
        o["schedule"] = {"nfe": args.nfe}
    if args.sampler is not None:
        o["sampler"] = {"kind": args.sampler}
    mo = {}
    if args.sgld_steps is not None:
        mo["sgld_steps"] = args.sgld_steps
    if args.sgld_lr is not None:
        mo["sgld_lr"] = args.sgld_lr
    if mo:
        o["mo"] = mo
    return o


def _resolve(args):
    if args.config is not None:
        return load_config(args.config, _overrides(args))
    return config_from_dict({"preset": args.preset}, _overrides(args))


def _summarize(rows) -> int:
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.sampler, r.nfe), []).append(r)
    for (sampler, nfe), rs in groups.items():
        ok = [r.psnr_db for r in rs if r.ok]
        med = f"{statistics.median(ok):.2f} dB" if ok else "n/a"
        print(f"{sampler:>24} nfe={nfe:<5} ok={len(ok)}/{len(rs)} median psnr={med}")
    n_bad = sum(not r.ok for r in rows)
    if rows and n_bad == len(rows):
        return EXIT_ALL_FAILED
    return EXIT_PARTIAL if n_bad else EXIT_OK


def _validate(args) -> int:
    import pytest

    tests = Path(args.tests) if args.tests else Path.cwd() / "tests"
    if not tests.exists():
        print(f"test directory {tests} not found", file=sys.stderr)
        return EXIT_CONFIG
    code = pytest.main([str(tests), "-q", *(["-k", args.k] if args.k else [])])
    return EXIT_OK if code == 0 else EXIT_ALL_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="measopt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    _add_common(p)

    p = sub.add_parser("sweep", help="repeat an experiment over several NFE budgets")
    _add_common(p)
    p.add_argument("--nfes", type=int, nargs="+", required=True)

    p = sub.add_parser("ablate-optimizer", help="paired SGLD and Adam inner loops")
    _add_common(p)

    p = sub.add_parser("ablate-init", help="per-step inner solves vs one reused solution")
    _add_common(p)

    p = sub.add_parser("validate", help="run the invariant and acceptance test suite")
    p.add_argument("--tests", help="test directory (default ./tests)")
    p.add_argument("-k", help="pytest -k expression")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return _validate(args)
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            rows = run_experiment(cfg)
        elif args.command == "sweep":
            rows = nfe_sweep(cfg, args.nfes)
        elif args.command == "ablate-optimizer":
            rows = ablate_optimizer(cfg)
        else:
            rows = ablate_init(cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    print(f"wrote {Path(cfg.output_dir) / 'results.csv'}")
    return _summarize(rows)


if __name__ == "__main__":
    sys.exit(main())

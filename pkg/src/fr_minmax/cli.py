"""Command-line entry point: ``fr-minmax run | sweep | validate``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

from .experiment import ConfigError, load_config, resolve_config, run_experiment, run_sweep, write_json

log = logging.getLogger("fr_minmax")

# small, fast config used to confirm byte-identical reruns
_DETERMINISM_CONFIG = {
    "schema": "fr-minmax/v1",
    "game": {"generator": "smooth_sin", "grid": {"kind": "uniform", "lo": 0.0, "hi": 1.0, "n": 32}},
    "sigma": 1.0,
    "init": {"nu": {"type": "gibbs", "potential": "quadratic", "params": {"scale": 20.0, "center": 0.25}},
             "mu": {"type": "gibbs", "potential": "quadratic", "params": {"scale": 20.0, "center": 0.75}}},
    "method": {"name": "flow", "scheme": "euler_log", "dt": 0.01, "T": 10.0},
    "seed": 0,
}


def _setup_logging(flag_level: str | None) -> None:
    level = os.environ.get("FR_MINMAX_LOG") or flag_level or "WARNING"
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _reruns_identical(seed: int = 0) -> bool:
    cfg = resolve_config(dict(_DETERMINISM_CONFIG, seed=seed))
    with tempfile.TemporaryDirectory() as tmp:
        dirs = [Path(tmp) / "a", Path(tmp) / "b"]
        for d in dirs:
            run_experiment(cfg, d)
        files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
        other = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
        if files != other:
            return False
        return all((dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in files)


def _print_checks(checks) -> None:
    for c in checks:
        print(c.line())


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    res = run_experiment(cfg, args.out_dir)
    _print_checks(res.checks)
    out = args.out_dir or cfg["outputs"]["dir"]
    print(f"{'PASS' if res.passed else 'FAIL'}: {len(res.checks)} checks, artifacts in {out}")
    return res.exit_code


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    rows = run_sweep(cfg, args.out_dir, args.threads)
    failed = [r for r in rows if r["checks_passed"] != "true"]
    out = args.out_dir or cfg["outputs"]["dir"]
    print(f"{len(rows)} cells, {len(failed)} with failures; table in {Path(out) / 'sweep.csv'}")
    return 2 if failed else 0


def cmd_validate(args) -> int:
    from .validation import run_suite

    seed = load_config(args.config)["seed"] if args.config else 0
    checks = run_suite(seed, determinism_runner=lambda: _reruns_identical(seed))
    _print_checks(checks)
    passed = all(c.passed for c in checks)
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_json(d / "validation.json", {"passed": passed, "checks": [c.as_dict() for c in checks]})
    print(f"{'PASS' if passed else 'FAIL'}: {sum(c.passed for c in checks)}/{len(checks)} checks")
    return 0 if passed else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fr-minmax", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None, help="output directory (overrides outputs.dir)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ... (FR_MINMAX_LOG wins)")
    p = sub.add_parser("run", parents=[common], help="run one experiment config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", parents=[common], help="run a parameter grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("validate", parents=[common], help="run the built-in validation suite")
    p.add_argument("--config", default=None, help="optional config supplying the seed")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line runner: ``hkq <command> [--config PATH] [--seed N] [--out DIR] ...``.

Exit codes: 0 all gates passed, 1 a scientific gate failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from ._io import sha256_file, write_json
from .config import STAGES, ConfigError, ExperimentConfig, RunManifest
from .errors import HKQError
from .suites import run_stage

EXIT_OK, EXIT_GATE, EXIT_CONFIG = 0, 1, 2


def _threads(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid thread count {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return n


def _seed(value: str) -> int:
    try:
        n = int(value, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {value!r}") from None
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=_threads,
                        help="worker threads (default: $HKQ_THREADS or the config)")
    common.add_argument("--dry-run", action="store_true",
                        help="validate the config and print the plan without running")
    parser = argparse.ArgumentParser(prog="hkq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hkq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        sub.add_parser(name, parents=[common], help=f"run the {name} suite" if name != "all"
                       else "run every suite")
    return parser


def load_config(args) -> ExperimentConfig:
    threads = args.threads
    if threads is None and os.environ.get("HKQ_THREADS"):
        threads = _threads(os.environ["HKQ_THREADS"])
    kw = {"seed": args.seed, "out": args.out, "threads": threads}
    if args.config is not None:
        return ExperimentConfig.load(args.config, **kw)
    return ExperimentConfig.from_dict({}, **kw)


def execute(cfg: ExperimentConfig, stages, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    out = Path(cfg["out"])
    manifest = RunManifest(cfg.digest())
    failed = False
    for stage in stages:
        stage_dir = out / stage
        report = run_stage(stage, cfg, stage_dir)
        verdict = {"stage": stage, "passed": report.passed, "seed": cfg.seed_for(stage),
                   "gates": [g.to_dict() for g in report.gates]}
        write_json(stage_dir / "verdict.json", verdict)
        for g in report.gates:
            print(g.line(), file=stream)
        print(f"{stage}: {'PASS' if report.passed else 'FAIL'} ({report.seconds:.1f} s)", file=stream)
        manifest.timings[stage] = round(report.seconds, 3)
        manifest.verdicts[stage] = report.passed
        failed |= not report.passed
    for stage in stages:
        for path in sorted(p for p in (out / stage).rglob("*") if p.is_file()):
            manifest.files[path.relative_to(out).as_posix()] = sha256_file(path)
    write_json(out / "manifest.json", manifest.to_dict())
    return EXIT_GATE if failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    stages = STAGES if args.command == "all" else (args.command,)
    try:
        cfg = load_config(args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"hkq: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print("\n".join(cfg.plan(stages)))
        return EXIT_OK
    try:
        return execute(cfg, stages)
    except HKQError as exc:
        print(f"hkq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_GATE
    except ValueError as exc:
        print(f"hkq: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

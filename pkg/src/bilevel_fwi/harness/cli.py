"""Command line interface: ``bilevel-fwi <subcommand> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import report
from .config import ConfigError, dump, load_config

SUBCOMMANDS = ("forward", "fwi", "bilevel", "xval", "bench-precon", "gradcheck", "toy")

log = logging.getLogger("bilevel_fwi")


def _limit_threads(n: int) -> None:
    # BLAS threads; must be set before numpy/scipy spin up their pools
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bilevel-fwi", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="YAML file merged over the defaults")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--no-plots", action="store_true", help="skip matplotlib figures")
    return p


def _run(command: str, cfg: dict, out: Path) -> dict:
    from . import experiments as ex

    if command == "forward":
        return ex.run_forward(cfg, out)
    if command == "fwi":
        return ex.run_fwi(cfg, out)
    if command == "bilevel":
        return ex.run_bilevel(cfg, out)
    if command == "xval":
        return ex.run_xval(cfg, out)
    if command == "bench-precon":
        return ex.run_bench(cfg, out)
    if command == "gradcheck":
        return ex.run_gradcheck(cfg, out)
    if command == "toy":
        return ex.run_toy(cfg, out)
    raise ValueError(command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        flags = {"seed": args.seed, "threads": args.threads, "out": None if args.out is None else str(args.out)}
        if args.no_plots:
            args.overrides.append("plots=false")
        cfg = load_config(args.config, args.overrides, **flags)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    _limit_threads(int(cfg["threads"]))
    import numpy as np

    np.random.seed(int(cfg["seed"]) % 2**32)
    out = Path(cfg["out"]) / args.command
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump(cfg))
    t0 = time.time()
    try:
        result = _run(args.command, cfg, out)
    except Exception as exc:  # noqa: BLE001 - reported via exit status
        log.exception("%s failed", args.command)
        result = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    result["seconds"] = time.time() - t0
    summary = {k: v for k, v in result.items() if k not in ("rows",)}
    report.append_jsonl(out / "summary.jsonl", {"command": args.command, **summary})
    print(json.dumps(report._jsonable(summary), default=str))
    return 0 if result.get("ok") else 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: ``run``, ``sweep-radius``, ``verify`` and ``gen-data``."""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, dump_config, load_config, parse_value
from .errors import StyleDDGError
from .experiment import OUT_ENV, build_dataset, default_out_root, format_table, run_matrix, sweep_radius

log = logging.getLogger("styleddg")


def _config(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if getattr(args, "seeds", None):
        overrides.append(f"seeds={args.seeds}")
    return load_config(args.config, overrides)


def _out_dir(args, cfg: ExperimentConfig, kind: str) -> Path:
    if args.out:
        return Path(args.out)
    digest = hashlib.sha1(dump_config(cfg).encode()).hexdigest()[:10]
    return default_out_root() / f"{kind}_{digest}"


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "run")
    summary = run_matrix(cfg, out, threads=args.threads, progress=log.info)
    print(format_table(summary["rows"], cfg.mode, cfg.targets))
    print(f"results in {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    radii = parse_value("radii", args.radii) if args.radii else None
    out = _out_dir(args, cfg, "sweep")
    summary = sweep_radius(cfg, out, radii=radii, threads=args.threads, progress=log.info)
    print((out / "sweep.txt").read_text(), end="")
    print(f"results in {out}")
    return 0 if summary else 1


def cmd_verify(args) -> int:
    from .checks import CHECKS, format_report, run_checks

    names = args.only.split(",") if args.only else None
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise StyleDDGError(f"unknown check(s) {unknown}; choose from {list(CHECKS)}")
    results = run_checks(names, progress=log.info)
    report = format_report(results)
    print(report)
    if args.out:
        Path(args.out).write_text(report + "\n")
    return 0 if all(r.ok for r in results) else 1


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else default_out_root() / "dataset.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    ds.save(out)
    print(f"wrote {len(ds)} samples ({ds.x.shape[1]}x{ds.x.shape[2]}x{ds.x.shape[3]}) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="styleddg",
        description=f"Decentralized style-sharing domain generalization simulator. Default output root: ${OUT_ENV} or ./runs.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True, threads=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--override", action="append", metavar="KEY=VAL", help="override one config key (repeatable)")
        sp.add_argument("--out", help="output directory (or file for gen-data / verify)")
        if seeds:
            sp.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
        if threads:
            sp.add_argument("--threads", type=int, default=1, help="worker threads for per-device phases")

    sp = sub.add_parser("run", help="run the methods x targets x seeds matrix")
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("sweep-radius", help="repeat the matrix on random geometric graphs of several radii")
    common(sp)
    sp.add_argument("--radii", help="comma-separated radii (default: config key radii)")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("verify", help="run the acceptance checks and print a report")
    sp.add_argument("--only", help="comma-separated subset of checks")
    sp.add_argument("--out", help="also write the report to this file")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("gen-data", help="write the synthetic dataset to a binary file")
    common(sp, seeds=False, threads=False)
    sp.set_defaults(fn=cmd_gen_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except StyleDDGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted; rerun with the same --out to resume", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())

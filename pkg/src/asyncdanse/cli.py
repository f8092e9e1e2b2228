"""Command line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from . import experiment as E
from . import network as NW
from . import scene as SC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asyncdanse",
                                description="Run DANSE speech enhancement experiments on a simulated "
                                            "asynchronous acoustic sensor network.")
    p.add_argument("--config", type=Path, required=True, help="scenario TOML file")
    p.add_argument("--mode", action="append", choices=NW.MODES, dest="modes",
                   help="processing mode; repeat for several (default: all)")
    p.add_argument("--sro-set", choices=E.SRO_SET_CHOICES, default="custom",
                   help="override node SROs with a bundled set; 'custom' keeps the config values")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--export-signals", action="store_true", help="write per-node 32-bit float WAVs")
    p.add_argument("--export-traces", action="store_true", help="write sro_trace.csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = C.load_config(args.config)
        modes = args.modes or list(NW.MODES)
        report, _ = E.run_experiment(exp, modes, args.sro_set, args.seed, args.out_dir,
                                     args.export_signals, args.export_traces)
    except (C.ConfigError, SC.SceneError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.to_csv(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())

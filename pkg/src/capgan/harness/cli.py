"""``capgan`` command line.

Every stage subcommand runs the pipeline up to and including that stage,
reusing any stage already completed in the output directory::

    capgan prepare  --config exp.yaml
    capgan train    --config exp.yaml --set gan.epochs=10
    capgan evaluate --config exp.yaml
    capgan ablate   --config exp.yaml --variants ros,no-pretrain,imbalanced+mse
    capgan report   runs/a runs/b --compare runs/a runs/b

Exit status is 0 on success and the error category's code otherwise
(2 config, 3 input format, 4 shape, 5 transfer, 6 numeric, 7 training,
8 evaluation, 9 stage).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from ..errors import CapganError
from .config import ExperimentConfig
from .pipeline import STAGES, compare_runs, run_ablation, run_pipeline, summary_table


def _common(p):
    p.add_argument("--config", "-c", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--out", help="output directory (overrides output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the pipeline through '{stage}'")
        _common(p)
        p.add_argument("--force", action="store_true", help="rerun completed stages")
    p = sub.add_parser("run", help="run every stage")
    _common(p)
    p.add_argument("--force", action="store_true")
    p = sub.add_parser("ablate", help="run pre-training / loss ablation variants")
    _common(p)
    p.add_argument("--variants", default="ros,no-pretrain",
                   help="comma list of <ros|two_phase|ensemble|imbalanced|no-pretrain>[+mse]")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("report", help="tabulate finished runs, optionally t-test two groups")
    p.add_argument("runs", nargs="*", help="run directories holding report.json")
    p.add_argument("--compare", nargs="+", metavar="RUN",
                   help="2k run dirs: first k against last k, paired in order")
    p.add_argument("--csv", help="write the table to this CSV file")
    p = sub.add_parser("config", help="print the effective configuration")
    _common(p)
    return parser


def _load(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output_dir={args.out}")
    return ExperimentConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "config":
            print(json.dumps(_load(args).to_dict(), indent=2, sort_keys=True))
        elif args.command in STAGES or args.command == "run":
            cfg = _load(args)
            upto = "evaluate" if args.command == "run" else args.command
            manifest = run_pipeline(cfg, upto=upto, force=args.force)
            print(json.dumps({"out_dir": str(manifest.out_dir),
                              "stages": sorted(manifest.stages)}, indent=2))
        elif args.command == "ablate":
            cfg = _load(args)
            result = run_ablation(cfg, [v.strip() for v in args.variants.split(",") if v.strip()],
                                  args.workers)
            for row in result["summary"]:
                print(f"{row['variant']:>16} {row['group']:>14}  FID {row['fid']:10.3f}  "
                      f"SSIM {row['ssim']:.4f}")
        elif args.command == "report":
            rows = summary_table(args.runs)
            for r in rows:
                print(json.dumps(r, sort_keys=True))
            if args.csv and rows:
                with open(args.csv, "w", newline="") as fh:
                    w = csv.DictWriter(fh, list(rows[0]))
                    w.writeheader()
                    w.writerows(rows)
            if args.compare:
                if len(args.compare) % 2:
                    raise CapganError("--compare needs an even number of run directories")
                k = len(args.compare) // 2
                print(json.dumps(compare_runs(args.compare[:k], args.compare[k:]), indent=2))
    except CapganError as exc:
        print(f"capgan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

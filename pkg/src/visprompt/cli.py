"""Command line entry point: ``run``, ``sweep``, ``gen-data`` and ``report``.

Results go under ``--out`` or, when omitted, the directory named by the
``VISPROMPT_OUT`` environment variable (default ``./results``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datagen import PROTOCOLS, build_split, output_root, save_datasets
from .errors import ContractError, DegenerateInputError, DimensionError, DivergenceError
from .harness import SWEEP_AXES, ExperimentConfig, make_data, run, run_sweep, summarize, write_record, write_sweep

log = logging.getLogger("visprompt")


def _out_dir(arg: str | None) -> Path:
    return Path(arg) if arg else output_root()


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        return ExperimentConfig.from_json(path)
    except json.JSONDecodeError as exc:
        raise ContractError(f"config {path} is not valid JSON: {exc}") from exc


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    rec = run(cfg)
    split, _ = make_data(cfg, cfg.seeds[0])
    path = write_record(_out_dir(args.out), cfg, rec, split)
    mean = {k: round(v, 2) if v is not None else None for k, v in rec.mean_accuracy().items()}
    print(f"{cfg.method} {cfg.protocol} {mean} H={rec.mean_H if rec.mean_H is None else round(rec.mean_H, 2)}")
    print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    values = json.loads(args.values) if args.values else None
    rows = run_sweep(args.axis, cfg, values)
    jpath, cpath = write_sweep(_out_dir(args.out), args.axis, rows)
    for r in rows:
        rec = r["record"]
        H = rec.mean_H
        print(f"{args.axis}={r['value']}: {rec.mean_accuracy()} H={'n/a' if H is None else f'{H:.2f}'}")
    print(f"wrote {jpath} and {cpath}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    overrides = {k: v for k, v in {"protocol": args.protocol, "delta": args.delta,
                                   "shots": args.shots, "n_classes": args.n_classes}.items()
                 if v is not None}
    cfg = cfg.replace(**overrides)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    split, datasets = make_data(cfg, seed)
    out = save_datasets(Path(args.out), split, datasets, {"config": cfg.to_dict(), "seed": seed})
    sizes = {k: len(d.labels) for k, d in datasets.items()}
    print(f"{cfg.protocol} seed {seed}: {sizes}")
    print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    print(summarize(args.in_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visprompt", description="Toy-scale prompt learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one config over its seeds")
    r.add_argument("--config", help="JSON file with ExperimentConfig fields")
    r.add_argument("--out", help="output directory (default: $VISPROMPT_OUT)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one ablation axis")
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--config", help="JSON file with ExperimentConfig fields")
    s.add_argument("--values", help="JSON list restricting the axis values")
    s.add_argument("--out", help="output directory (default: $VISPROMPT_OUT)")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gen-data", help="write a synthetic protocol split to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file with ExperimentConfig fields")
    g.add_argument("--protocol", choices=PROTOCOLS)
    g.add_argument("--seed", type=int)
    g.add_argument("--delta", type=float)
    g.add_argument("--shots", type=int)
    g.add_argument("--n-classes", type=int)
    g.set_defaults(func=cmd_gen_data)

    rep = sub.add_parser("report", help="summarise result files as a markdown table")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, DimensionError, DegenerateInputError, DivergenceError,
            OSError, TypeError, ValueError) as exc:
        print(f"visprompt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

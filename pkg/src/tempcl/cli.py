"""Command-line experiment runner.

Subcommands: ``train`` (full experiment), ``eval --checkpoint`` and
``analyze --checkpoint`` (re-evaluate a saved encoder), ``schedule-preview``
(epoch,tau CSV on stdout), and ``gen-data`` (write the synthetic dataset
files).  Exit codes: 1 for configuration errors, 2 for data errors, 3 for
numeric divergence.

The ``TEMPCL_THREADS`` environment variable caps the worker threads used
for kNN scoring (default 1, which keeps runs bitwise reproducible).
"""

import argparse
import re
import sys
from pathlib import Path

from tempcl.config import ConfigError, parse_config, render_config
from tempcl.data import DataFormatError, save_dataset, synth_balanced, synth_mixture
from tempcl.runner import (
    NumericDivergenceError,
    analyze_checkpoint,
    eval_checkpoint,
    run_experiment,
)
from tempcl.schedule import tau_at

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _add_common(p):
    p.add_argument("--config", help="experiment config file (section.key = value lines)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--output", help="override run.output_dir")


def _load_config(args):
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_config(text)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.output is not None:
        cfg.run.output_dir = args.output
    return cfg


def _epoch_from_checkpoint(path, explicit):
    if explicit is not None:
        return explicit
    m = re.search(r"epoch(\d+)", Path(path).name)
    return int(m.group(1)) if m else 0


def cmd_train(args) -> int:
    run_experiment(_load_config(args))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    epoch = _epoch_from_checkpoint(args.checkpoint, args.epoch)
    rows = eval_checkpoint(cfg, args.checkpoint, epoch)
    for metric, scope, value in rows:
        if scope == "all":
            print(f"{metric} = {value!r}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    epoch = _epoch_from_checkpoint(args.checkpoint, args.epoch)
    cv = analyze_checkpoint(cfg, args.checkpoint, epoch)
    print(f"coverage_cv = {cv!r}")
    return 0


def cmd_schedule_preview(args) -> int:
    cfg = _load_config(args)
    sched = cfg.schedule_config()
    print("epoch,tau")
    for t in range(cfg.run.epochs + 1):
        print(f"{t},{tau_at(sched, t)!r}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    d = cfg.data
    out_dir = Path(cfg.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(render_config(cfg))
    train = synth_mixture(d.classes, d.dim, d.n_max, d.imbalance,
                          class_separation=d.class_separation,
                          within_sigma=d.within_sigma, seed=cfg.run.seed)
    test = synth_balanced(d.classes, d.dim, d.test_per_class,
                          class_separation=d.class_separation,
                          within_sigma=d.within_sigma, seed=cfg.run.seed)
    save_dataset(train, out_dir / "dataset.tcld")
    save_dataset(test, out_dir / "test.tcld")
    print(f"dataset.tcld: K={train.num_classes} D={train.dim} n={train.n}")
    print(f"test.tcld: K={test.num_classes} D={test.dim} n={test.n}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempcl",
        description="Contrastive learning with dynamic temperature schedules on long-tail data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a full experiment")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epoch", type=int, help="epoch label (default: parsed from filename)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="analysis dumps for a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epoch", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("schedule-preview", help="emit the epoch,tau schedule as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_schedule_preview)

    p = sub.add_parser("gen-data", help="write the synthetic dataset files")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericDivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

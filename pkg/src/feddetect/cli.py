"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .dataio import (
    CLASS_NAMES,
    PartitionSpec,
    generate_synthetic,
    load_directory,
    partition,
    partition_manifest,
    preprocess,
    write_directory,
)
from .experiment import (
    SchemaError,
    compare,
    dump_json,
    evaluate_checkpoint,
    load_samples,
    load_summary,
    run_experiment,
)
from .federation import CheckpointError, load_checkpoint

log = logging.getLogger("feddetect")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def cmd_gen(args) -> int:
    if args.config:
        cfg = load_config(args.config, args.seed)
        if cfg.data.source != "synthetic":
            raise UsageError("gen needs a synthetic data source")
        samples = load_samples(cfg)
    else:
        if args.seed is None:
            raise UsageError("gen needs --seed (or --config with a seed)")
        samples = generate_synthetic(
            args.count, image_size=args.image_size, seed=args.seed, grid_size=args.grid_size
        )
    out = Path(args.out or "data")
    write_directory(samples, out)
    log.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


def cmd_partition(args) -> int:
    if args.seed is None:
        raise UsageError("partition needs --seed")
    samples = load_directory(args.data, args.num_classes)
    spec = PartitionSpec(args.mode, args.num_clients, args.alpha, args.seed)
    text = partition_manifest(partition(samples, spec))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _run(args, centralized: bool) -> int:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config, args.seed, args.out)
    out = Path(cfg.output)
    if centralized:
        out = out / "centralized"
    summary = run_experiment(cfg, out, centralized=centralized, threads=args.threads)
    log.info(
        "%s run done: mAP50 %s, accuracy %.4f, simulated %.3f s, %d bytes",
        summary["mode"],
        summary["mAP50"],
        summary["accuracy"],
        summary["total_sim_seconds"],
        summary["total_bytes"],
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    names = tuple(args.class_names) if args.class_names else CLASS_NAMES
    if len(names) < model_cfg.num_classes:
        names = names + tuple(f"class_{k}" for k in range(len(names), model_cfg.num_classes))
    samples = load_directory(args.data, model_cfg.num_classes, model_cfg.grid_size)
    size = (model_cfg.input_height, model_cfg.input_width)
    samples = [preprocess(s, size)[0] for s in samples]
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    metrics = evaluate_checkpoint(params, model_cfg, samples, out, names[: model_cfg.num_classes])
    dump_json(metrics, out / "metrics.json")
    return EXIT_OK


def cmd_compare(args) -> int:
    fl = load_summary(args.fl_summary)
    ml = load_summary(args.ml_summary)
    rows = compare(fl, ml, args.out or "compare")
    log.info("compared %d rounds", len(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=_u64, help="master seed (overrides the config)")

    p = sub.add_parser("gen", help="write a synthetic P5 + label directory")
    common(p)
    p.add_argument("--count", type=_positive, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--grid-size", type=_positive, default=2)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("partition", help="write a client partition manifest for a directory")
    common(p, config=False)
    p.add_argument("--data", required=True, help="P5 + label directory")
    p.add_argument("--mode", choices=("iid", "dirichlet"), default="iid")
    p.add_argument("-n", "--num-clients", type=_positive, default=4)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--num-classes", type=_positive, default=len(CLASS_NAMES))
    p.set_defaults(func=cmd_partition)

    for name, helptext, central in (
        ("run", "federated training, evaluation and reports", False),
        ("centralized", "pooled-data baseline with the same epoch budget", True),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--threads", type=_positive, default=1, help="client training workers")
        p.set_defaults(func=lambda a, c=central: _run(a, c))

    p = sub.add_parser("eval", help="evaluate a checkpoint on a P5 + label directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--class-names", nargs="+")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="FL vs centralized series, charts and confusion matrices")
    p.add_argument("fl_summary")
    p.add_argument("ml_summary")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

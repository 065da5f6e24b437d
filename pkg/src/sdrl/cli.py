"""Command-line entry point.

One binary with subcommands covering the whole workflow:

    sdrl gen-data  --scenes 40 --size 256 --patch 64 --out data/desk
    sdrl pretrain  --config exp.toml --seed 7 --out runs/pre7
    sdrl finetune  --config exp.toml --fraction 0.05 --init checkpoint \
                   --checkpoint runs/pre7/best.ckpt --out runs/ft7
    sdrl eval      --checkpoint runs/ft7/cdnet_best.ckpt --out runs/ft7
    sdrl probe     --checkpoint runs/pre7/best.ckpt
    sdrl plot      runs/pre7/pretrain_metrics.csv

Heavy imports happen after argument parsing so --threads can pin the BLAS
thread pools before numpy loads. SDRL_LOG selects the log level (debug,
info, warning, error); the default is info.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", metavar="PATH", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--threads", type=int,
                       help="pin BLAS/OpenMP thread pools to N threads")
        if checkpoint:
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--scenes", type=int, help="number of scenes")
    p.add_argument("--size", type=int, help="scene side length in pixels")
    p.add_argument("--patch", type=int, help="patch side length in pixels")

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    common(p)
    p.add_argument("--data", metavar="DIR", help="dataset root (defaults to config)")
    p.add_argument("--objective", choices=("sdrl", "global"),
                   help="pooling objective to train with")
    p.add_argument("--debug-no-stopgrad", action="store_true",
                   help="diagnostics only: remove the stop-gradient branch")

    p = sub.add_parser("finetune", help="supervised change-detection fine-tuning")
    common(p, checkpoint=True)
    p.add_argument("--data", metavar="DIR", help="dataset root (defaults to config)")
    p.add_argument("--fraction", type=float, help="label fraction in (0,1]")
    p.add_argument("--init", choices=("random", "checkpoint"),
                   help="encoder initialization")

    p = sub.add_parser("eval", help="evaluate a saved change detector")
    common(p, checkpoint=True)
    p.add_argument("--data", metavar="DIR", help="dataset root (defaults to config)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("probe", help="collapse/separation report for a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--data", metavar="DIR", help="dataset root (defaults to config)")

    p = sub.add_parser("plot", help="render SVG curves from a metrics CSV")
    p.add_argument("csv", metavar="CSV", help="metrics csv produced by a run")
    p.add_argument("--out", metavar="DIR", help="directory for the figure")
    p.add_argument("--threads", type=int, help=argparse.SUPPRESS)

    return parser


def _setup_logging() -> None:
    level = os.environ.get("SDRL_LOG", "info").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args):
    from .config import ExperimentConfig, apply_overrides

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return apply_overrides(
        cfg,
        seed=args.seed,
        objective=getattr(args, "objective", None),
        fraction=getattr(args, "fraction", None),
        no_stopgrad=getattr(args, "debug_no_stopgrad", False),
        scenes=getattr(args, "scenes", None),
        size=getattr(args, "size", None),
        patch=getattr(args, "patch", None),
    )


def _data_root(args, cfg) -> Path:
    root = getattr(args, "data", None) or cfg.data.root
    return Path(root)


def _manifest(root):
    from .data import Manifest

    return Manifest.load(Path(root) / "manifest.jsonl")


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    from . import data

    root = Path(args.out) if args.out else Path(cfg.data.root)
    manifest = data.generate_dataset(
        root, cfg.data.name, cfg.data.scenes, cfg.data.patch,
        cfg.seed if args.seed is not None else cfg.data.seed,
        generator=cfg.data.generator, fractions=cfg.data.fractions)
    cfg.save_resolved(root)
    counts = {}
    for rec in manifest.records:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    print(f"wrote {len(manifest.records)} patch records to {root / 'manifest.jsonl'} "
          f"(splits: {json.dumps(counts, sort_keys=True)})")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    from . import plots, training

    root = _data_root(args, cfg)
    manifest = _manifest(root)
    out_dir = Path(args.out) if args.out else Path("runs") / f"pretrain_seed{cfg.seed}"
    cfg.save_resolved(out_dir)
    run = training.pretrain(root, manifest, cfg.encoder, cfg.heads, cfg.objective,
                            cfg.optimizer.pretrain_config(), cfg.pretrain,
                            cfg.seed, out_dir)
    figure = plots.render_pretrain(out_dir / "pretrain_metrics.csv")
    print(f"pretrain done in {run.wall_clock:.1f}s: final collapse "
          f"{run.collapse_series[-1]:.4f}, outputs in {out_dir} (figure {figure.name})")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_config(args)
    from .errors import ConfigInvalid

    init = args.init or "random"
    if init == "checkpoint" and not args.checkpoint:
        raise ConfigInvalid("--init checkpoint requires --checkpoint PATH")
    from . import plots, training

    root = _data_root(args, cfg)
    manifest = _manifest(root)
    out_dir = (Path(args.out) if args.out
               else Path("runs") / f"finetune_{init}_f{cfg.finetune.fraction}_seed{cfg.seed}")
    cfg.save_resolved(out_dir)
    run = training.finetune(root, manifest, cfg.cd_config(),
                            cfg.optimizer.finetune_config(), cfg.finetune,
                            cfg.seed, out_dir, init=init,
                            checkpoint_path=args.checkpoint)
    figure = plots.render_finetune(out_dir / "finetune_metrics.csv")
    print(json.dumps(run.result, indent=1, sort_keys=True))
    print(f"finetune done in {run.wall_clock:.1f}s, outputs in {out_dir} "
          f"(figure {figure.name})")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    from .errors import ConfigInvalid

    if not args.checkpoint:
        raise ConfigInvalid("eval requires --checkpoint PATH")
    from . import training

    root = _data_root(args, cfg)
    manifest = _manifest(root)
    report = training.evaluate_checkpoint(root, manifest, cfg.cd_config(),
                                          args.checkpoint, split=args.split,
                                          batch_size=cfg.finetune.batch_size)
    report["split"] = args.split
    print(json.dumps(report, indent=1, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"eval_{args.split}.json", "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    return 0


def _cmd_probe(args) -> int:
    cfg = _load_config(args)
    from .errors import ConfigInvalid

    if not args.checkpoint:
        raise ConfigInvalid("probe requires --checkpoint PATH")
    from . import training

    root = _data_root(args, cfg)
    manifest = _manifest(root)
    report = training.probe_checkpoint(root, manifest, cfg.encoder, cfg.heads,
                                       args.checkpoint)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def _cmd_plot(args) -> int:
    from . import plots

    figure = plots.render(args.csv, args.out)
    print(f"wrote {figure}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threads", None):
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    _setup_logging()
    from . import errors

    log = logging.getLogger("sdrl.cli")
    try:
        return _COMMANDS[args.command](args)
    except errors.ConfigInvalid as exc:
        log.error("config error: %s", exc)
        return 3
    except (errors.DataMissing, errors.EmptyDataset) as exc:
        log.error("data error: %s", exc)
        return 4
    except (errors.CheckpointCorrupt, errors.CheckpointIncompatible) as exc:
        log.error("checkpoint error: %s", exc)
        return 5
    except errors.SdrlError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

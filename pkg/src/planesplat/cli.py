"""Command-line driver: synthetic fixtures and the align/lp3/train/fuse/eval stages.

Exit codes: 0 ok, 1 validation error (bad config, missing or malformed inputs,
stage order), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as pl
from .config import ConfigError
from .fixtures import KINDS, FixtureParams, make_fixture
from .io import FormatError
from .render import CHANNELS

log = logging.getLogger("planesplat")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _add_run_args(sp):
    sp.add_argument("--config", required=True, help="run config JSON, or a run's manifest.json to replay it")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--force", action="store_true", help="rerun even if the stage is up to date")
    sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="planesplat", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    fx = sub.add_parser("make-fixture", help="write a synthetic scene with priors, proposals and ground truth")
    fx.add_argument("kind", choices=KINDS)
    fx.add_argument("--out", required=True)
    fx.add_argument("--seed", type=int, default=0)
    fx.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    fx.add_argument("--views", type=int, default=FixtureParams.n_views)
    fx.add_argument("--width", type=int, default=FixtureParams.width)
    fx.add_argument("--height", type=int, default=FixtureParams.height)
    fx.add_argument("--noise", type=float, default=0.0, help="prior depth noise std (m)")
    fx.add_argument("--affine", type=float, nargs=2, metavar=("S", "T"), default=None,
                    help="store the dense prior as (depth - T) / S")
    fx.add_argument("--outliers", type=float, default=0.0, help="fraction of gross sparse-depth outliers")
    fx.add_argument("--parallel", action="store_true", help="two_walls: add a recessed parallel wall")
    fx.add_argument("--dry-run", action="store_true")

    for name, helptext in [("align", "scale/shift-align depth priors, low-texture and confidence masks"),
                           ("lp3", "planar priors from proposals: cross-view fusion, splitting, label maps"),
                           ("train", "plane-guided init and optimisation"),
                           ("fuse", "render depth per view and fuse a TSDF mesh"),
                           ("eval", "surface and image metrics"),
                           ("all", "every stage in order")]:
        sp = sub.add_parser(name, help=helptext)
        _add_run_args(sp)
        if name in ("train", "all"):
            sp.add_argument("--dump", default=None, metavar="CH[,CH]",
                            help=f"after training, render every view and dump channels ({','.join(CHANNELS)})")
            sp.add_argument("--dump-dir", default=None, help="default: <output>/debug/renders")
    return ap


def _make_fixture(args) -> int:
    params = FixtureParams(n_views=args.views, width=args.width, height=args.height, prior_noise_m=args.noise,
                           affine=tuple(args.affine) if args.affine else None, outlier_frac=args.outliers,
                           parallel_step=args.parallel)
    if args.dry_run:
        print(json.dumps({"kind": args.kind, "out": args.out, "seed": args.seed, "params": vars(params)},
                         indent=2, default=list))
        return EXIT_OK
    out = make_fixture(args.out, args.kind, params, args.seed, args.force)
    print(f"fixture written to {out} (run config: {out / 'config.json'})")
    return EXIT_OK


def _run(args) -> int:
    cfg = pl.load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    dump = None
    if getattr(args, "dump", None):
        dump = [c.strip() for c in args.dump.split(",") if c.strip()]
        bad = [c for c in dump if c not in CHANNELS]
        if bad:
            raise ConfigError(f"unknown render channels {bad}; choose from {list(CHANNELS)}")
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    stages = pl.STAGES if args.command == "all" else (args.command,)
    for s in stages:
        ran = pl.run_stage(cfg, s, args.force)
        print(f"{s}: {'done' if ran else 'up to date (use --force to rerun)'}")
    if dump:
        where = args.dump_dir or cfg.output / "debug" / "renders"
        files = pl.dump_renders(cfg, dump, where)
        print(f"wrote {len(files)} debug renders to {where}")
    if "eval" in stages:
        print(json.dumps(pl.read_json(cfg.output / "eval" / "metrics.json"), indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-fixture":
            return _make_fixture(args)
        return _run(args)
    except (ConfigError, pl.ValidationError, FormatError, FileExistsError) as e:
        log.error("%s", e)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - any failure inside a stage is a runtime error
        log.error("%s: %s", type(e).__name__, e)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

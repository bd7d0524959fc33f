"""Command-line entry point: register, match-debug, eval, simulate, weights.

Exit codes: 0 success, 1 usage/config/IO error, 2 registration failure.
Reports go to stdout (or --out); logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalharness, features, geometry, matching, nnet, tracksim
from .errors import AgileRegError, ConfigError, ImageFormatError, WeightFormatError
from .imgio import ImageBuffer, load_image, save_image
from .pipeline import PipelineConfig, Registrar, report_json

log = logging.getLogger("agilereg")

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for registration failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _weights_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--weights", metavar="PATH", help="MSRW weight file")
    g.add_argument("--seed", type=int, metavar="N", help="seeded weight initialisation")
    p.set_defaults(_weights_required=required)


def _pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--harris-k", type=float, default=0.04, metavar="F", help="Harris k in [0.02, 0.1]")
    p.add_argument("--harris-threshold", type=float, default=0.01, metavar="F",
                   help="corner threshold relative to max response, in (0, 1)")
    p.add_argument("--ransac-iters", type=int, default=2000, metavar="N")
    p.add_argument("--ransac-px", type=float, default=3.0, metavar="F", help="inlier threshold (px)")
    p.add_argument("--ransac-seed", type=int, default=0, metavar="N")
    p.add_argument("--target-count", type=int, default=128, metavar="N")
    p.add_argument("--theta-step", type=float, default=0.01, metavar="F")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", metavar="PATH", help="output path (stem for multi-file reports)")
    p.add_argument("--quiet", action="store_true", help="only the machine-readable report on stdout")
    p.add_argument("--strict", action="store_true", help="refuse to run without an explicit seed or weights")
    p.add_argument("--timings", action="store_true",
                   help="record wall-clock times (reports are then no longer byte-reproducible)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="agilereg", description="Wide-field / narrow-field image registration toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("register", help="locate a narrow-field image inside a wide-field one")
    p.add_argument("ix", help="wide-field image (PNG/PNM)")
    p.add_argument("iy", help="narrow-field image (PNG/PNM)")
    p.add_argument("--overlay", metavar="PATH", help="write iy warped onto ix, blended 50/50")
    _weights_args(p), _pipeline_args(p), _common(p)

    p = sub.add_parser("match-debug", help="dump descriptors, corner gates and bidirectional matches")
    p.add_argument("ix")
    p.add_argument("iy")
    _weights_args(p), _pipeline_args(p), _common(p)

    p = sub.add_parser("eval", help="run the multiscale / white-balance benchmark")
    p.add_argument("manifest", help="JSON manifest {images, scales, wb_modes, seeds, tol_px, mode}")
    _weights_args(p), _pipeline_args(p), _common(p)

    p = sub.add_parser("simulate", help="run a closed-loop tracking scenario")
    p.add_argument("scenario", help="scenario JSON")
    p.add_argument("--registrar", choices=("oracle", "pipeline"), help="override the scenario's registrar")
    _weights_args(p, required=False), _common(p)

    p = sub.add_parser("weights", help="create or inspect weight files")
    wsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = wsub.add_parser("init", help="write seeded weights to an MSRW file")
    q.add_argument("--seed", type=int, required=True, metavar="N")
    q.add_argument("--out", required=True, metavar="PATH")
    q.add_argument("--quiet", action="store_true")
    q = wsub.add_parser("info", help="validate an MSRW file and print a summary")
    q.add_argument("path")
    q.add_argument("--quiet", action="store_true")
    return ap


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> PipelineConfig:
    try:
        return PipelineConfig(harris_k=args.harris_k, harris_threshold=args.harris_threshold,
                              target_count=args.target_count, theta_step=args.theta_step,
                              ransac_iters=args.ransac_iters, ransac_px=args.ransac_px,
                              ransac_seed=args.ransac_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _weights(args, required: bool = True):
    if args.weights is not None:
        return nnet.load_weights(args.weights)
    if args.seed is not None:
        return nnet.init_weights_seeded(nnet.NetworkSpec(), args.seed)
    if not required:
        return None
    if args.strict:
        raise UsageError("--strict requires --weights PATH or --seed N")
    log.warning("no --weights or --seed given; using --seed 0")
    return nnet.init_weights_seeded(nnet.NetworkSpec(), 0)


def _load(path) -> ImageBuffer:
    return load_image(path)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def _overlay(ix: ImageBuffer, iy: ImageBuffer, h: np.ndarray) -> ImageBuffer:
    warped = geometry.warp_image(iy, h, ix.width, ix.height)
    covered = geometry.warp_image(ImageBuffer(np.ones((iy.height, iy.width, 1))), h, ix.width, ix.height)
    base = ix.data if ix.channels == 3 else np.repeat(ix.data, 3, axis=2)
    top = warped.data if warped.channels == 3 else np.repeat(warped.data, 3, axis=2)
    a = 0.5 * covered.data
    return ImageBuffer(base * (1 - a) + top * a)


# ---------------------------------------------------------------------------
# subcommands


def cmd_register(args) -> int:
    cfg = _config(args)
    weights = _weights(args)
    ix, iy = _load(args.ix), _load(args.iy)
    res = Registrar(weights, cfg).register(ix, iy)
    _emit(report_json(res, args.timings), args.out)
    if not res.ok:
        log.error("registration failed at stage %s: %s", res.stage, res.reason)
        return EXIT_FAILED
    log.info("registered: %d matches, %d inliers, centre (%.2f, %.2f)", res.match_count,
             len(res.homography.inliers), *res.center)
    if args.overlay:
        save_image(_overlay(ix, iy, res.original_homography()), args.overlay)
    return EXIT_OK


def cmd_match_debug(args) -> int:
    cfg = _config(args)
    reg = Registrar(_weights(args), cfg)
    ix, iy = _load(args.ix), _load(args.iy)
    px, gx, _ = reg.describe(ix)
    py, gy, _ = reg.describe(iy)
    dm = matching.fused_distance(py, px, gy, gx, cfg.weights)
    try:
        ms = matching.match_bidirectional(dm, None, cfg.target_count, cfg.theta_step)
    except AgileRegError as exc:
        log.error("matching failed: %s", exc)
        ms = None
    text = "" if ms is None else ms.to_jsonl(py.grid, px.grid)
    if args.out:
        stem = Path(args.out)
        stem.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{stem}_ix.json").write_text(features.dump_debug(px, gx))
        Path(f"{stem}_iy.json").write_text(features.dump_debug(py, gy))
        Path(f"{stem}_matches.jsonl").write_text(text)
    sys.stdout.write(text)
    log.info("corner cells: ix %d, iy %d; matches %d", gx.count, gy.count, 0 if ms is None else len(ms))
    return EXIT_OK if ms is not None and len(ms) else EXIT_FAILED


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = evalharness.Manifest.load(args.manifest)
    weights = _weights(args)
    report = evalharness.run_benchmark(manifest, weights, args.out, cfg, timings=args.timings)
    sys.stdout.write(report.to_csv())
    for row in report.aggregates():
        log.info("scale %3d wb %-5s pairs %d TPR %.4f (failed %d)", row["scale"], row["wb"],
                 row["pairs"], row["TPR"], row["failed"])
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = tracksim.ScenarioConfig.load(args.scenario)
    if args.registrar:
        cfg = replace(cfg, registrar=args.registrar)
    weights = None
    if cfg.registrar == "pipeline":
        if args.weights is not None or args.seed is not None:
            weights = _weights(args)
        elif cfg.weights is None and cfg.weights_seed is None:
            weights = _weights(args)
    elif args.strict and args.seed is None and "seed" not in json.loads(Path(args.scenario).read_text()):
        raise UsageError("--strict requires an explicit seed (scenario 'seed' or --seed)")
    report = tracksim.run_scenario(cfg, out=args.out, weights=weights)
    sys.stdout.write(report.summary_json())
    s = report.summary()
    log.info("mean error %.3f px, fraction in FOV %.3f, convergence step %s, lost %d",
             s["mean_error_px"], s["fraction_in_fov"], s["convergence_step"], s["lost_frames"])
    return EXIT_OK


def cmd_weights(args) -> int:
    if args.action == "init":
        bundle = nnet.init_weights_seeded(nnet.NetworkSpec(), args.seed)
        nnet.save_weights(bundle, args.out)
        log.info("wrote seeded weights (seed %d) to %s", args.seed, args.out)
        return EXIT_OK
    bundle = nnet.load_weights(args.path)
    doc = {"path": args.path, "layers": [list(k.shape) for k in bundle.kernels],
           "parameters": int(sum(k.size + b.size for k, b in zip(bundle.kernels, bundle.biases))),
           "normalization": bundle.norm is not None}
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"register": cmd_register, "match-debug": cmd_match_debug, "eval": cmd_eval,
            "simulate": cmd_simulate, "weights": cmd_weights}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, WeightFormatError, ImageFormatError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        name = getattr(exc, "filename", None)
        log.error("%s%s", f"{name}: " if name else "", exc.strerror or exc)
        return EXIT_USAGE
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``hybridbev {gen,train,forward,eval,contrib,bench}``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 invariant breach.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigFileError, PipelineConfig, apply_overrides, format_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
THREADS_ENV = "HYBRIDBEV_THREADS"

logger = logging.getLogger("hybridbev")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_range(text: str) -> range:
    """``start:stop`` or a single count ``n`` (meaning ``0:n``)."""
    try:
        if ":" in text:
            a, b = text.split(":", 1)
            return range(int(a), int(b))
        return range(int(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop or a count, got {text!r}") from None


def _load_scenes(frames: str, stride: int):
    from .synth import list_frames, read_scene

    stems = list_frames(frames)
    if not stems:
        raise FileNotFoundError(f"no frames (*_calib.txt) in {frames}")
    return stems, [read_scene(frames, s, stride) for s in stems]


# --------------------------------------------------------------------------
# subcommands

def cmd_gen(args, cfg: PipelineConfig) -> int:
    from .synth import benchmark_scene, gen_scene, write_scene

    sc = cfg.scene_config()
    if args.showcase:
        write_scene(benchmark_scene(sc), args.out, "showcase")
        return EXIT_OK
    seeds = args.seeds
    if seeds is None:
        seeds = cfg.bench.eval_seeds if args.split == "eval" else cfg.bench.train_seeds
    for s in seeds:
        write_scene(gen_scene(s, sc), args.out)
    logger.info("wrote %d frames to %s", len(seeds), args.out)
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .train import stage1_train, stage2_train

    mc = cfg.model_config()
    variant = args.variant if args.variant is not None else cfg.train.variant
    if args.stage == 1 and variant not in ("", "camera"):
        raise UsageError("stage 1 trains the camera model only")
    if args.stage == 2 and variant == "camera":
        raise UsageError("stage 2 trains a radar, fusion or concat model")
    tc = replace(cfg.train, stage=args.stage, variant=variant)
    _, scenes = _load_scenes(args.frames, mc.stride)
    if args.stage == 1:
        result = stage1_train(tc, mc, scenes)
    else:
        cam = Checkpoint.load(args.camera_ckpt) if args.camera_ckpt else None
        result = stage2_train(tc, mc, cam, scenes)
    result.checkpoint.save(args.out)
    if args.loss_csv:
        result.write_loss_csv(args.loss_csv)
    logger.info("stage %d %s: loss %.4f -> %.4f", args.stage, tc.resolved_variant, result.losses[0]["total"], result.losses[-1]["total"])
    return EXIT_OK


def cmd_forward(args, cfg: PipelineConfig) -> int:
    from .evaluation import format_detections, write_detections_jsonl
    from .pipeline import DUMPABLE, run_forward

    dumps = [d for d in (args.dump_bev or "").split(",") if d]
    unknown = set(dumps) - set(DUMPABLE) - {"contrib"}
    if unknown:
        raise UsageError(f"unknown dump(s) {sorted(unknown)}; choose from {', '.join(DUMPABLE + ('contrib',))}")
    ckpt = Checkpoint.load(args.ckpt)
    stems, scenes = _load_scenes(args.frames, cfg.model.stride)
    if args.frame:
        if args.frame not in stems:
            raise FileNotFoundError(f"frame {args.frame!r} not found in {args.frames}")
        pairs = [(args.frame, scenes[stems.index(args.frame)])]
    else:
        pairs = list(zip(stems, scenes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stem, scene in pairs:
        dets, _, _ = run_forward(ckpt, scene, out / stem if dumps else None, dumps, cfg.detect)
        (out / f"{stem}_det.txt").write_text(format_detections(dets, scene.calib))
        with open(out / f"{stem}_det.jsonl", "w") as fh:
            write_detections_jsonl(dets, fh)
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    from .evaluation import detections_from_labels, evaluate, parse_labels
    from .pipeline import checkpoint_model, evaluate_model

    stems, scenes = _load_scenes(args.frames, cfg.model.stride)
    n_points = args.n_points or cfg.detect.n_points
    if n_points != "all":
        n_points = int(n_points)
    if args.ckpt:
        ckpt = Checkpoint.load(args.ckpt)
        mc, variant = checkpoint_model(ckpt)
        det_cfg = replace(cfg.detect, n_points=n_points)
        report, _ = evaluate_model(ckpt.params, mc, variant, scenes, det_cfg)
    else:
        dets = []
        for stem, scene in zip(stems, scenes):
            path = Path(args.pred) / f"{stem}_det.txt"
            dets.append(detections_from_labels(parse_labels(path.read_text(), scene.calib)) if path.exists() else [])
        report = evaluate(dets, [s.boxes for s in scenes], n_points=n_points)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.to_table())
    return EXIT_OK


def cmd_contrib(args, cfg: PipelineConfig) -> int:
    from .contribution import (
        StudyConfig, contribution_maps, contribution_study, export_contribution, merge_reports, stratify,
    )
    from .pipeline import checkpoint_model, detect

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.study:
        report = contribution_study(StudyConfig(n_scenes=args.n_scenes, seed=args.seed))
    else:
        if not (args.ckpt and args.frames):
            raise UsageError("contrib needs --ckpt and --frames (or --study)")
        ckpt = Checkpoint.load(args.ckpt)
        mc, variant = checkpoint_model(ckpt)
        if variant not in ("fusion", "concat"):
            raise UsageError(f"contribution maps need a fusion or concat checkpoint, got {variant}")
        stems, scenes = _load_scenes(args.frames, mc.stride)
        reports = []
        for stem, scene in zip(stems, scenes):
            dets, res = detect(ckpt.params, mc, variant, scene, cfg.detect)
            cmap = contribution_maps(res.maps["camera_hat"], res.maps["radar_hat"])
            export_contribution(cmap, out / f"{stem}_contrib")
            reports.append(stratify(dets, cmap, mc.grid))
        report = merge_reports(reports)
    report.to_csv(out / "contribution_by_class_distance.csv")
    for lo, hi, mean, n in report.by_distance():
        print(f"{lo:5.1f}-{hi:5.1f} m  mean C = {'n/a' if mean is None else f'{mean:.4f}'}  (n={n})")
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    from . import bench

    if args.what == "pooling":
        rows = bench.bench_pooling(runs=args.runs, dtype="float32" if args.float32 else "float64", workers=_threads())
        text = bench.pooling_csv(rows)
    elif args.what == "complexity":
        rep = bench.complexity_report()
        lines = ["hw,deform_macs,dense_macs"] + [f"{a},{b},{c}" for a, b, c in rep["rows"]]
        lines.append(f"# deform linear R2 {rep['deform_linear_r2']:.6f}, dense quadratic R2 {rep['dense_quadratic_r2']:.6f}")
        text = "\n".join(lines) + "\n"
    else:
        from .pipeline import run_benchmark_seed
        from .synth import gen_scenes

        sc = cfg.scene_config()
        tr = gen_scenes(cfg.bench.train_seeds, sc)
        ev = gen_scenes(cfg.bench.eval_seeds, sc)
        lines = ["seed,variant,region,map"]
        for seed in cfg.bench.run_seeds:
            run = run_benchmark_seed(seed, cfg.bench, sc, cfg.model_config(), cfg.detect, tr, ev)
            for v in run.reports:
                for region in ("full", "corridor"):
                    lines.append(f"{seed},{v},{region},{run.map(v, region):.2f}")
            logger.info("seed %d ordering %s", seed, "holds" if run.ordering_holds() else "fails")
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridbev", description="Radar-camera BEV fusion toolkit")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="write synthetic frames")
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--seeds", type=_seed_range, help="start:stop (default: the benchmark split)")
    g.add_argument("--showcase", action="store_true", help="write the single dump-oriented showcase scene")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train stage 1 (camera) or stage 2 (radar/fusion/concat)")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--frames", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--variant", choices=("camera", "radar", "fusion", "concat"))
    t.add_argument("--camera-ckpt", help="stage-1 checkpoint (stage 2)")
    t.add_argument("--loss-csv")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forward", help="detections and optional BEV dumps")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--frames", required=True)
    f.add_argument("--frame", help="single frame stem")
    f.add_argument("--out", required=True)
    f.add_argument("--dump-bev", help="comma list of camera,radar,fused,dca_cam,dca_rad,camera_hat,radar_hat,contrib")
    f.set_defaults(func=cmd_forward)

    e = sub.add_parser("eval", help="AP report over a frame directory")
    e.add_argument("--frames", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="directory of <stem>_det.txt files")
    e.add_argument("--n-points", choices=("11", "40", "all"))
    e.add_argument("--out", help="CSV report path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("contrib", help="camera/radar contribution maps and class-distance summary")
    c.add_argument("--ckpt")
    c.add_argument("--frames")
    c.add_argument("--out", required=True)
    c.add_argument("--study", action="store_true", help="run the distance-coded mechanism study instead")
    c.add_argument("--n-scenes", type=int, default=40)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_contrib)

    b = sub.add_parser("bench", help="pooling timing, attention complexity or the variant benchmark")
    b.add_argument("what", choices=("pooling", "complexity", "ordering"))
    b.add_argument("--runs", type=int, default=5)
    b.add_argument("--float32", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .evaluation import LabelParseError
    from .model import InputError
    from .train import InvariantError, TrainingError
    from .bench import EquivalenceError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be at least 1")
        os.environ[THREADS_ENV] = str(args.threads)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg = apply_overrides(cfg, args.set)
    except ConfigFileError as exc:
        print(f"hybridbev: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"hybridbev: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"hybridbev {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, EquivalenceError) as exc:
        print(f"hybridbev {args.command}: invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, CheckpointError, LabelParseError, InputError, TrainingError, T.DimensionError, ValueError) as exc:
        print(f"hybridbev {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

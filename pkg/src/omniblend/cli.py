"""Command-line entry points.

Subcommands mirror the pipeline stages so each one can be run and
inspected on its own:

    synth      render a synthetic dataset from a scene spec (or the demo)
    flow       TV-L1 flow for a frame range -> .flo files
    depth      flow + triangulation + temporal fusion -> .pfm depth maps
    probmap    fused depth vs CG depth -> .pfm probability maps
    composite  blend the requested modes -> .png frames
    pipeline   everything above in one pass + report.json
    compare    side-by-side strips and per-mode statistics

Exit codes: 0 success, 1 configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, DataError, PipelineConfig, load_config
from .pipeline import PipelineRunner, compare_modes, run_pipeline


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parse_frames(text: str | None):
    """'A:B' (half-open), 'A:', ':B', or a comma list of indices."""
    if text is None:
        return None
    if ":" in text:
        lo, hi = text.split(":", 1)
        lo = int(lo) if lo else 0
        if not hi:
            raise ConfigError("open-ended ranges need an explicit end, use A:B")
        return list(range(lo, int(hi)))
    return [int(tok) for tok in text.split(",") if tok]


def _load(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    if getattr(args, "input", None):
        updates["input_dir"] = args.input
    if getattr(args, "output", None):
        updates["output_dir"] = args.output
    if getattr(args, "mode", None):
        updates["modes"] = tuple(args.mode)
    if getattr(args, "flow_source", None):
        updates["flow_source"] = args.flow_source
    if getattr(args, "no_cache", False):
        updates["use_cache"] = False
    if updates:
        cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def _add_common(p, output_default=None):
    p.add_argument("--config", help="JSON config file (defaults used otherwise)")
    p.add_argument("--input", "-i", help="dataset directory")
    p.add_argument("--output", "-o", default=output_default, help="output directory")
    p.add_argument("--frames", "-f", help="frame range A:B or comma list")
    p.add_argument("--no-cache", action="store_true", help="ignore cached intermediates")
    p.add_argument("--flow-source", choices=["tvl1", "ground_truth"],
                   help="use computed or dataset ground-truth flow")


def build_parser() -> _Parser:
    parser = _Parser(prog="omniblend",
                     description="CG compositing for equirectangular sequences "
                                 "with occlusion handling")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--scene", help="scene spec JSON (omit for the built-in demo)")
    p.add_argument("--output", "-o", required=True, help="dataset directory to create")
    p.add_argument("--width", type=int, default=256, help="demo frame width")
    p.add_argument("--n-frames", type=int, default=8, help="demo frame count")
    p.add_argument("--no-ground-truth", action="store_true",
                   help="skip gt_depth/ and gt_flow/")

    for name, help_text in (
        ("flow", "compute optical flow"),
        ("depth", "compute fused depth maps"),
        ("probmap", "compute foreground probability maps"),
        ("composite", "composite the CG layer"),
        ("pipeline", "run the full pipeline"),
        ("compare", "compare blend modes"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name in ("composite", "pipeline", "compare"):
            p.add_argument("--mode", action="append",
                           choices=["visibility", "alpha", "fixed_transparency"],
                           help="blend mode (repeatable; default: all three)")
    return parser


def _stage_frames(cfg: PipelineConfig, frames):
    runner = PipelineRunner(cfg)
    available = runner.dataset.frame_indices()
    if frames is None:
        frames = [i for i in available if i > min(available, default=0)]
    return runner, sorted(frames)


def _cmd_flow(cfg, frames):
    runner, frames = _stage_frames(cfg, frames)
    for t in frames:
        runner._cached_flow(t)
        print(f"flow {t:06d} -> {runner._cache_path('flow', t, 'flo')}")


def _cmd_depth(cfg, frames):
    runner, frames = _stage_frames(cfg, frames)
    for t in frames:
        record = {"timings_ms": {}}
        depth_t, bwd, _ = runner.depth_for_frame(t, record["timings_ms"])
        if runner.history and runner.history[-1][0] != t - 1:
            runner.history = []
        runner.history.append((t, depth_t, bwd))
        runner.history = runner.history[-cfg.depth.temporal_window:]
        runner.fused_depth(t, record["timings_ms"])
        print(f"depth {t:06d} -> {runner._cache_path('depth_fused', t, 'pfm')}")


def _cmd_probmap(cfg, frames):
    runner, frames = _stage_frames(cfg, frames)
    for t in frames:
        timings = {}
        depth_t, bwd, _ = runner.depth_for_frame(t, timings)
        if runner.history and runner.history[-1][0] != t - 1:
            runner.history = []
        runner.history.append((t, depth_t, bwd))
        runner.history = runner.history[-cfg.depth.temporal_window:]
        fused = runner.fused_depth(t, timings)
        cg = runner.dataset.cg_layer(t)
        runner.probability(t, fused, cg, timings)
        print(f"probmap {t:06d} -> {runner._cache_path('probmap', t, 'pfm')}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")

        if args.command == "synth":
            from .synth import demo_scene, load_scene_spec, materialize_dataset

            if args.scene:
                spec = load_scene_spec(args.scene)
            else:
                spec = demo_scene(width=args.width, n_frames=args.n_frames)
            root = materialize_dataset(spec, args.output,
                                       write_ground_truth=not args.no_ground_truth)
            print(f"dataset written to {root}")
            return 0

        cfg = _load(args)
        frames = _parse_frames(args.frames)

        if args.command == "flow":
            _cmd_flow(cfg, frames)
        elif args.command == "depth":
            _cmd_depth(cfg, frames)
        elif args.command == "probmap":
            _cmd_probmap(cfg, frames)
        elif args.command in ("composite", "pipeline"):
            outputs, report = run_pipeline(cfg, frames)
            failed = [r["index"] for r in report["frames"] if r["errors"]]
            print(f"composited {len(outputs)} frames "
                  f"({len(failed)} failed) -> {Path(cfg.output_dir) / 'composite'}")
            if failed:
                print(f"failed frames: {failed}")
        elif args.command == "compare":
            table = compare_modes(cfg, frames)
            for row in table["frames"]:
                stats = ", ".join(
                    f"{mode}: alpha={m['mean_alpha']:.3f} diff={m['mean_abs_diff']:.4f}"
                    for mode, m in row["modes"].items()
                )
                print(f"frame {row['index']:06d}  {stats}")
            print(f"table -> {Path(cfg.output_dir) / 'compare.json'}")
        return 0

    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end per-frame pipeline with cached intermediates.

Dataflow for frame t (t >= 1; frame 0 has no predecessor and is recorded
as skipped):

    forward flow (t-1 -> t)  ->  divergence point  ->  triangulation
      -> backward flow (inverted)  ->  depth on frame t's grid
      -> temporal fusion over the last N frames
      -> foreground probability against the CG depth
      -> per-pixel visibility targets
      -> composite in each requested blend mode

Intermediates are cached as .flo / .pfm files keyed by frame index, and
every stage consumes the same float32 values it would reload from disk,
so warm and cold runs produce bit-identical outputs.  A manifest records
the config digest and per-file checksums.

Dataset layout under ``input_dir``::

    frames/{i:06d}.png        real frames (8-bit sRGB)
    poses.json                camera pose manifest
    labels/{i:06d}.png        9-class label maps (palette PNG)
    uncertainty/{i:06d}.png   classifier uncertainty (8-bit gray)
    cg/{i:06d}.png            CG layer color (RGBA PNG)
    cg_depth/{i:06d}.pfm      CG layer depth
    gt_flow/{i:06d}.flo       optional: forward flow i -> i+1
    gt_depth/{i:06d}.pfm      optional: rendered depth ground truth
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import fileio
from .compositor import (
    BlendConfig,
    CgLayer,
    alpha_blend,
    composite_with_alpha,
    visibility_blend,
)
from .config import DataError, PipelineConfig
from .depth import (
    DepthMap,
    DivergenceSearchRegion,
    ProbabilityMap,
    find_divergence_point,
    foreground_probability,
    fuse_depth_temporal,
    refine_divergence_point,
    triangulate_depth,
)
from .flow import FlowField, compute_flow, invert_flow, luminance, warp_scalar_field
from .semantics import SemanticMap, fixed_visibility_field, group_categories, visibility_field
from .sphere import AngularPoint

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


def _frame_name(index: int, ext: str) -> str:
    return f"{index:06d}.{ext}"


class Dataset:
    """Read access to one input directory."""

    def __init__(self, root):
        self.root = Path(root)
        poses_path = self.root / "poses.json"
        if not poses_path.exists():
            raise DataError(f"missing pose manifest: {poses_path}")
        self.poses = fileio.load_poses(poses_path)

    def frame_indices(self):
        frames = sorted((self.root / "frames").glob("*.png"))
        return [int(p.stem) for p in frames]

    def _require(self, rel: str) -> Path:
        path = self.root / rel
        if not path.exists():
            raise DataError(f"missing input: {path}")
        return path

    def frame(self, i: int) -> np.ndarray:
        return fileio.load_frame_linear(self._require(f"frames/{_frame_name(i, 'png')}"))

    def pose(self, i: int):
        if i not in self.poses:
            raise DataError(f"missing pose for frame {i}")
        return self.poses[i]

    def semantic(self, i: int) -> SemanticMap:
        labels = fileio.load_label_png(self._require(f"labels/{_frame_name(i, 'png')}"))
        g = fileio.load_uncertainty_png(self._require(f"uncertainty/{_frame_name(i, 'png')}"))
        return SemanticMap(labels, g)

    def cg_layer(self, i: int) -> CgLayer:
        rgb, alpha = fileio.load_cg_png(self._require(f"cg/{_frame_name(i, 'png')}"))
        depth, valid = fileio.read_depth_pfm(self._require(f"cg_depth/{_frame_name(i, 'pfm')}"))
        return CgLayer(np.dstack([rgb, alpha]), DepthMap(depth, valid))

    def gt_flow(self, i: int) -> FlowField:
        u, valid = fileio.read_flow(self._require(f"gt_flow/{_frame_name(i, 'flo')}"))
        return FlowField(u, valid)

    def gt_depth(self, i: int) -> DepthMap | None:
        path = self.root / f"gt_depth/{_frame_name(i, 'pfm')}"
        if not path.exists():
            return None
        depth, valid = fileio.read_depth_pfm(path)
        return DepthMap(depth, valid)


class _Timer:
    def __init__(self, sink: dict, key: str):
        self.sink = sink
        self.key = key

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.sink[self.key] = self.sink.get(self.key, 0.0) + (time.perf_counter() - self.t0) * 1e3


def motion_region(pose_prev, pose_curr, config: PipelineConfig, frame_shape) -> DivergenceSearchRegion:
    """Search region centered on the known motion direction (camera frame)."""
    motion = pose_curr.position - pose_prev.position
    norm = np.linalg.norm(motion)
    if norm == 0:
        raise DataError("camera did not move between frames; no motion direction")
    cam_dir = pose_curr.rotate_inverse(motion / norm)
    return DivergenceSearchRegion(AngularPoint.from_direction(cam_dir),
                                  config.depth.region_half_extent)


def texture_mask(gray: np.ndarray, threshold: float, smoothing: int = 9) -> np.ndarray:
    """Pixels whose neighbourhood carries image gradient above ``threshold``.

    Optical flow is unconstrained on textureless regions (the regularizer
    fills them in), so the divergence-point search only trusts flow where
    the source frame actually has structure.
    """
    gx = 0.5 * np.abs(np.roll(gray, -1, axis=1) - np.roll(gray, 1, axis=1))
    gy = np.zeros_like(gray)
    gy[1:-1] = 0.5 * np.abs(gray[2:] - gray[:-2])
    energy = uniform_filter(gx + gy, size=smoothing, mode=("nearest", "wrap"))
    return energy > threshold


def _flow_for(dataset: Dataset, config: PipelineConfig, t: int) -> FlowField:
    if config.flow_source == "ground_truth":
        return dataset.gt_flow(t - 1)
    prev = luminance(dataset.frame(t - 1)).astype(np.float32)
    curr = luminance(dataset.frame(t)).astype(np.float32)
    return compute_flow(prev, curr, config.flow)


class PipelineRunner:
    """Stateful frame-by-frame execution with disk caching."""

    def __init__(self, config: PipelineConfig):
        config.validate()
        self.config = config
        self.dataset = Dataset(config.input_dir)
        self.out_dir = Path(config.output_dir)
        self.cache_dir = config.resolved_cache_dir
        self.history = []  # (frame index, DepthMap, backward FlowField)
        self._check_cache_manifest()

    # -- caching -----------------------------------------------------------

    def _check_cache_manifest(self):
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        manifest = self.cache_dir / "manifest.json"
        digest = self.config.digest()
        if manifest.exists():
            try:
                recorded = json.loads(manifest.read_text()).get("config_digest")
            except json.JSONDecodeError:
                recorded = None
            if recorded != digest:
                log.info("config changed; ignoring existing cache")
                for stale in self.cache_dir.rglob("*"):
                    if stale.is_file() and stale.name != "manifest.json":
                        stale.unlink()
        manifest.write_text(json.dumps({"config_digest": digest}, indent=2) + "\n")

    def _cache_path(self, stage: str, index: int, ext: str) -> Path:
        d = self.cache_dir / stage
        d.mkdir(parents=True, exist_ok=True)
        return d / _frame_name(index, ext)

    def _cached_flow(self, t: int) -> FlowField:
        path = self._cache_path("flow", t, "flo")
        if self.config.use_cache and path.exists():
            u, valid = fileio.read_flow(path)
            return FlowField(u, valid)
        flow = _flow_for(self.dataset, self.config, t)
        flow = FlowField(flow.u.astype(np.float32), flow.valid)
        fileio.write_flow(path, flow.u, flow.valid)
        return flow

    def _cached_depth(self, stage: str, t: int, compute):
        path = self._cache_path(stage, t, "pfm")
        if self.config.use_cache and path.exists():
            depth, valid = fileio.read_depth_pfm(path)
            return DepthMap(depth, valid)
        dmap = compute()
        dmap = DepthMap(dmap.depth.astype(np.float32), dmap.valid)
        fileio.write_depth_pfm(path, dmap.depth, dmap.valid)
        return dmap

    # -- stages --------------------------------------------------------------

    def depth_for_frame(self, t: int, timings: dict) -> tuple:
        """Single-frame depth on frame t's grid plus the backward flow."""
        with _Timer(timings, "flow_ms"):
            fwd = self._cached_flow(t)
        pose_prev = self.dataset.pose(t - 1)
        pose_curr = self.dataset.pose(t)

        with _Timer(timings, "divergence_ms"):
            region = motion_region(pose_prev, pose_curr, self.config, fwd.u.shape[:2])
            gray_prev = luminance(self.dataset.frame(t - 1))
            informative = texture_mask(gray_prev, self.config.depth.texture_threshold)
            foe_flow = FlowField(fwd.u, fwd.valid & informative)
            div = find_divergence_point(foe_flow, region, self.config.depth.divergence_kernel)
            div = refine_divergence_point(foe_flow, div.point)

        with _Timer(timings, "triangulation_ms"):
            bwd = invert_flow(fwd)
            bwd = FlowField(bwd.u.astype(np.float32), bwd.valid)

            def run():
                dc = self.config.depth
                tri = triangulate_depth(fwd, pose_prev, pose_curr, div.point,
                                        eps_tri_deg=dc.eps_tri_deg, d_max=dc.d_max,
                                        baseline_min=dc.baseline_min,
                                        reference_camera=dc.reference_camera)
                vals, ok = warp_scalar_field(tri.depth, bwd, field_valid=tri.valid)
                return DepthMap(vals, ok)

            depth_t = self._cached_depth("depth", t, run)
        return depth_t, bwd, div

    def fused_depth(self, t: int, timings: dict) -> DepthMap:
        with _Timer(timings, "fusion_ms"):
            window = [(d, f) for (_idx, d, f) in self.history]
            return self._cached_depth(
                "depth_fused", t, lambda: fuse_depth_temporal(window))

    def probability(self, t: int, fused: DepthMap, cg: CgLayer, timings: dict) -> ProbabilityMap:
        path = self._cache_path("probmap", t, "pfm")
        with _Timer(timings, "probability_ms"):
            if self.config.use_cache and path.exists():
                return ProbabilityMap(fileio.read_pfm(path))
            prob = foreground_probability(fused, cg.depth, k=self.config.depth.sigmoid_scale,
                                          p_unknown=self.config.depth.p_unknown)
            prob = ProbabilityMap(prob.p.astype(np.float32))
            fileio.write_pfm(path, prob.p)
            return prob

    def composite_frame(self, t: int, real, cg: CgLayer, sem: SemanticMap,
                        prob: ProbabilityMap, timings: dict):
        """All requested blend modes; returns {mode: (path, alpha_field)}."""
        results = {}
        cats = group_categories(sem).categories
        for mode in self.config.modes:
            with _Timer(timings, f"composite_{mode}_ms"):
                if mode == "alpha":
                    out = alpha_blend(real, cg, prob)
                    alpha = np.where(cg.mask, 1.0 - prob.p, 0.0)
                elif mode == "visibility":
                    vis = visibility_field(sem, prob, self.config.visibility_table,
                                           self.config.sigma)
                    out, alpha = visibility_blend(real, cg, vis, self.config.blend)
                else:
                    vis = fixed_visibility_field(cats, prob, self.config.visibility_table,
                                                 self.config.sigma)
                    out, alpha = visibility_blend(real, cg, vis, self.config.blend)
                mode_dir = self.out_dir / "composite" / mode
                mode_dir.mkdir(parents=True, exist_ok=True)
                path = mode_dir / _frame_name(t, "png")
                fileio.save_frame_srgb(path, out)
                fileio.write_pfm(self._cache_path(f"alpha_{mode}", t, "pfm"), alpha)
            results[mode] = (str(path), alpha)
        return results

    def run_frame(self, t: int) -> dict:
        record = {"index": t, "timings_ms": {}, "errors": [], "outputs": {}}
        timings = record["timings_ms"]
        depth_t, bwd, div = self.depth_for_frame(t, timings)
        if self.history and self.history[-1][0] != t - 1:
            # a gap breaks the warp chain; restart the temporal window
            self.history = []
        self.history.append((t, depth_t, bwd))
        self.history = self.history[-self.config.depth.temporal_window:]
        record["divergence_fallback"] = bool(div.fallback)

        fused = self.fused_depth(t, timings)
        real = self.dataset.frame(t)
        cg = self.dataset.cg_layer(t)
        sem = self.dataset.semantic(t)
        prob = self.probability(t, fused, cg, timings)
        outputs = self.composite_frame(t, real, cg, sem, prob, timings)
        record["outputs"] = {mode: path for mode, (path, _) in outputs.items()}

        gt = self.dataset.gt_depth(t)
        if gt is not None:
            both = fused.valid & gt.valid
            if both.any():
                rel = np.abs(fused.depth[both] - gt.depth[both]) / gt.depth[both]
                record["depth_error"] = {
                    "median_rel": float(np.median(rel)),
                    "mean_rel": float(rel.mean()),
                    "valid_fraction": float(both.mean()),
                }
        return record


def run_pipeline(config: PipelineConfig, frames=None):
    """Run the full pipeline; returns (outputs, report dict).

    ``frames`` is an iterable of frame indices to composite (default: all
    frames after the first).  Per-frame failures are recorded and the run
    continues; outputs maps frame index -> {mode: composited PNG path}.
    """
    runner = PipelineRunner(config)
    available = runner.dataset.frame_indices()
    if frames is None:
        frames = [i for i in available if i > min(available, default=0)]
    frames = sorted(frames)

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_digest": config.digest(),
        "frames": [],
    }
    outputs = {}

    # bounded lookahead for the (independent, deterministic) flow stage
    workers = config.workers
    if workers > 1 and config.flow_source == "tvl1" and config.use_cache:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = {}
            for t in frames[: config.max_inflight]:
                pending[t] = pool.submit(runner._cached_flow, t)
            for k, t in enumerate(frames):
                ahead = k + config.max_inflight
                if ahead < len(frames):
                    nxt = frames[ahead]
                    pending[nxt] = pool.submit(runner._cached_flow, nxt)
                if t in pending:
                    pending.pop(t).result()

    for t in frames:
        try:
            record = runner.run_frame(t)
        except DataError as exc:
            record = {"index": t, "timings_ms": {}, "errors": [str(exc)], "outputs": {}}
            log.warning("frame %d failed: %s", t, exc)
        report["frames"].append(record)
        if record["outputs"]:
            outputs[t] = record["outputs"]

    runner.out_dir.mkdir(parents=True, exist_ok=True)
    (runner.out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    _write_checksums(runner.out_dir)
    return outputs, report


def _write_checksums(out_dir: Path) -> None:
    entries = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name not in ("manifest.json", "report.json"):
            entries[str(path.relative_to(out_dir))] = hashlib.sha256(path.read_bytes()).hexdigest()
    (out_dir / "manifest.json").write_text(json.dumps(entries, indent=2) + "\n")


def compare_modes(config: PipelineConfig, frames=None):
    """Side-by-side strips plus mask-region statistics per blend mode.

    Needs the pipeline products for the requested frames (runs the
    pipeline for any frame that is missing).  Returns the metric table;
    an empty frame range yields an empty table.
    """
    if frames is not None:
        frames = sorted(frames)
        if not frames:
            table = {"schema_version": REPORT_SCHEMA_VERSION, "frames": []}
            out_dir = Path(config.output_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "compare.json").write_text(json.dumps(table, indent=2) + "\n")
            return table

    outputs, _ = run_pipeline(config, frames)
    runner_out = Path(config.output_dir)
    dataset = Dataset(config.input_dir)
    cache_dir = config.resolved_cache_dir

    table = {"schema_version": REPORT_SCHEMA_VERSION, "frames": []}
    strip_dir = runner_out / "compare"
    strip_dir.mkdir(parents=True, exist_ok=True)

    for t, mode_paths in sorted(outputs.items()):
        real = dataset.frame(t)
        cg = dataset.cg_layer(t)
        mask = cg.mask
        row = {"index": t, "modes": {}}
        strips = []
        for mode in config.modes:
            if mode not in mode_paths:
                raise DataError(f"frame {t}: missing {mode} output")
            comp = fileio.load_frame_linear(mode_paths[mode])
            strips.append(comp)
            alpha = fileio.read_pfm(cache_dir / f"alpha_{mode}" / _frame_name(t, "pfm"))
            row["modes"][mode] = {
                "mean_alpha": float(alpha[mask].mean()) if mask.any() else 0.0,
                "mean_abs_diff": float(np.abs(comp - real)[mask].mean()) if mask.any() else 0.0,
            }
        strip = np.concatenate(strips, axis=1)
        strip_path = strip_dir / _frame_name(t, "png")
        fileio.save_frame_srgb(strip_path, strip)
        row["strip"] = str(strip_path)
        table["frames"].append(row)

    (runner_out / "compare.json").write_text(json.dumps(table, indent=2) + "\n")
    return table

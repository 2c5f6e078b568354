"""Analytic test scenes with exact depth, flow, and label ground truth.

Scenes are ray-cast equirectangular renders of spheres, finite walls and
discs.  Every quantity is closed-form: depth is the nearest-hit distance,
flow comes from re-projecting hit points into the other frame, and labels
follow the primitive tags.  Surfaces carry a smooth procedural texture
(a seeded sum of 3D sinusoids) so flow estimation always has gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth import DepthMap
from .flow import FlowField
from .semantics import Label, SemanticMap
from .sphere import CameraPose, SphericalFrame, directions_from_pixels, pixels_from_directions

_NO_HIT = np.inf
_OCCLUSION_TOL = 1e-6


def _texture(points: np.ndarray, seed: int, n_waves: int = 6, frequency: float = 2.0) -> np.ndarray:
    """Smooth value noise in [0, 1] over 3D points, deterministic in seed."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = frequency * (0.5 + rng.random(n_waves) * 1.5)
    phases = rng.random(n_waves) * 2.0 * np.pi
    acc = np.zeros(points.shape[:-1])
    for k in range(n_waves):
        acc += np.sin(points @ (dirs[k] * freqs[k]) + phases[k])
    return 0.5 + acc / (2.0 * n_waves)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    label: Label = Label.BUILDING
    seed: int = 0
    tint: tuple = (0.8, 0.8, 0.8)
    is_cg: bool = False

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - np.asarray(self.center, dtype=np.float64)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        t = np.full(dirs.shape[:-1], _NO_HIT)
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        tt = np.where(t0 > 1e-9, t0, t1)
        ok = hit & (tt > 1e-9)
        t[ok] = tt[ok]
        return t


@dataclass(frozen=True)
class Wall:
    """Finite rectangle: center plus two orthogonal in-plane half axes."""

    center: tuple
    u_axis: tuple
    v_axis: tuple
    half_u: float
    half_v: float
    label: Label = Label.BUILDING
    seed: int = 0
    tint: tuple = (0.8, 0.8, 0.8)
    is_cg: bool = False

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        u = np.asarray(self.u_axis, dtype=np.float64)
        v = np.asarray(self.v_axis, dtype=np.float64)
        u = u / np.linalg.norm(u)
        v = v / np.linalg.norm(v)
        n = np.cross(u, v)
        c = np.asarray(self.center, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        p = origin + t[..., None] * dirs
        a = (p - c) @ u
        b = (p - c) @ v
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(a) <= self.half_u) & (np.abs(b) <= self.half_v)
        return np.where(ok, t, _NO_HIT)


@dataclass(frozen=True)
class Disc:
    """Flat circular billboard with a fixed normal."""

    center: tuple
    normal: tuple
    radius: float
    label: Label = Label.BUILDING
    seed: int = 0
    tint: tuple = (0.8, 0.8, 0.8)
    is_cg: bool = False

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        c = np.asarray(self.center, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        p = origin + t[..., None] * dirs
        r2 = np.sum((p - c) ** 2, axis=-1)
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (r2 <= self.radius**2)
        return np.where(ok, t, _NO_HIT)


_SHAPE_TYPES = {"sphere": Sphere, "wall": Wall, "disc": Disc}


@dataclass
class SceneSpec:
    """Scene description: static primitives, CG primitives, camera path."""

    width: int
    height: int
    camera_path: list
    primitives: list = field(default_factory=list)
    cg_primitives: list = field(default_factory=list)
    sky_color: tuple = (0.55, 0.62, 0.72)
    uncertainty: float = 0.01

    def __post_init__(self):
        if self.width != 2 * self.height:
            raise ValueError("scene frames must be equirectangular (width = 2*height)")
        for pose in self.camera_path:
            for prim in self.primitives + self.cg_primitives:
                if isinstance(prim, Sphere):
                    if np.linalg.norm(np.asarray(prim.center) - pose.position) <= prim.radius:
                        raise ValueError("camera path enters a sphere primitive")


def _pixel_grid(width: int, height: int):
    gy, gx = np.mgrid[0:height, 0:width].astype(np.float64)
    return gx + 0.5, gy + 0.5


def _cast(primitives, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit over the primitive list: (t, index), index -1 = miss."""
    t_best = np.full(dirs.shape[:-1], _NO_HIT)
    idx = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        t = prim.intersect(origin, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        idx = np.where(closer, i, idx)
    return t_best, idx


def _shade(primitives, origin, dirs, t, idx, sky_color):
    h, w = t.shape
    color = np.empty((h, w, 3))
    color[:] = np.asarray(sky_color, dtype=np.float64)
    for i, prim in enumerate(primitives):
        m = idx == i
        if not m.any():
            continue
        pts = origin + t[m, None] * dirs[m]
        tex = _texture(pts, prim.seed)
        shade = 0.25 + 0.65 * np.clip(tex, 0.0, 1.0)
        color[m] = np.clip(shade[:, None] * np.asarray(prim.tint, dtype=np.float64), 0.0, 1.0)
    return color


def render_scene(spec: SceneSpec, frame_index: int):
    """Ray-cast one frame: returns (SphericalFrame, DepthMap, SemanticMap).

    Depth is the nearest-hit distance from the camera center (invalid on
    sky); labels come from the primitive tags with constant uncertainty.
    """
    pose = spec.camera_path[frame_index]
    gx, gy = _pixel_grid(spec.width, spec.height)
    dirs = pose.rotate(directions_from_pixels(gx, gy, spec.width, spec.height))
    t, idx = _cast(spec.primitives, pose.position, dirs)

    color = _shade(spec.primitives, pose.position, dirs, t, idx, spec.sky_color)
    hit = idx >= 0
    depth = DepthMap(np.where(hit, t, 0.0), hit)

    labels = np.full(t.shape, int(Label.SKY), dtype=np.uint8)
    for i, prim in enumerate(spec.primitives):
        labels[idx == i] = int(prim.label)
    sem = SemanticMap(labels, np.full(t.shape, spec.uncertainty))
    return SphericalFrame(color, timestamp_index=frame_index), depth, sem


def hit_points(spec: SceneSpec, frame_index: int):
    """World hit points per pixel plus the hit mask (oracle helper)."""
    pose = spec.camera_path[frame_index]
    gx, gy = _pixel_grid(spec.width, spec.height)
    dirs = pose.rotate(directions_from_pixels(gx, gy, spec.width, spec.height))
    t, idx = _cast(spec.primitives, pose.position, dirs)
    hit = idx >= 0
    pts = pose.position + np.where(hit, t, 0.0)[..., None] * dirs
    return pts, hit, dirs


def ground_truth_flow(spec: SceneSpec, index_prev: int, index_curr: int) -> FlowField:
    """Exact correspondence flow from frame ``index_prev`` to ``index_curr``.

    Finite hit points are re-projected into the second frame; sky pixels
    re-project by direction alone.  Correspondences that another surface
    occludes in the second frame are marked invalid.
    """
    pose_a = spec.camera_path[index_prev]
    pose_b = spec.camera_path[index_curr]
    w, h = spec.width, spec.height
    gx, gy = _pixel_grid(w, h)

    pts, hit, dirs_a = hit_points(spec, index_prev)

    delta = pts - pose_b.position
    dist_b = np.linalg.norm(delta, axis=-1)
    dirs_b_world = np.where(hit[..., None], delta / np.maximum(dist_b, 1e-300)[..., None], dirs_a)
    dirs_b_cam = pose_b.rotate_inverse(dirs_b_world.reshape(-1, 3)).reshape(h, w, 3)
    q = pixels_from_directions(dirs_b_cam, w, h)

    # occlusion: something nearer along the second frame's ray hides the point
    t_b, idx_b = _cast(spec.primitives, pose_b.position, dirs_b_world)
    expected = np.where(hit, dist_b, _NO_HIT)
    visible = np.where(
        hit,
        t_b >= expected * (1.0 - _OCCLUSION_TOL),
        idx_b < 0,
    )

    ux = np.mod(q[..., 0] - gx + w / 2.0, w) - w / 2.0
    uy = q[..., 1] - gy
    return FlowField(np.stack([ux, uy], axis=-1), visible)


def make_cg_layer(spec: SceneSpec, cg_primitives, frame_index: int):
    """Render only the CG primitives: RGBA color plus depth, as a CgLayer."""
    from .compositor import CgLayer

    pose = spec.camera_path[frame_index]
    gx, gy = _pixel_grid(spec.width, spec.height)
    dirs = pose.rotate(directions_from_pixels(gx, gy, spec.width, spec.height))
    t, idx = _cast(cg_primitives, pose.position, dirs)
    hit = idx >= 0

    rgb = _shade(cg_primitives, pose.position, dirs, t, idx, (0.0, 0.0, 0.0))
    color = np.zeros(t.shape + (4,))
    color[..., :3] = np.where(hit[..., None], rgb, 0.0)
    color[..., 3] = hit.astype(np.float64)
    depth = DepthMap(np.where(hit, t, 0.0), hit)
    return CgLayer(color, depth)


# ---------------------------------------------------------------------------
# scene spec files


def _prim_to_dict(prim) -> dict:
    shape = {Sphere: "sphere", Wall: "wall", Disc: "disc"}[type(prim)]
    out = {"shape": shape, "label": Label(prim.label).name, "seed": prim.seed,
           "tint": list(prim.tint)}
    if isinstance(prim, Sphere):
        out.update(center=list(prim.center), radius=prim.radius)
    elif isinstance(prim, Wall):
        out.update(center=list(prim.center), u_axis=list(prim.u_axis),
                   v_axis=list(prim.v_axis), half_u=prim.half_u, half_v=prim.half_v)
    else:
        out.update(center=list(prim.center), normal=list(prim.normal), radius=prim.radius)
    return out


def _prim_from_dict(d: dict):
    kind = _SHAPE_TYPES[d["shape"]]
    kwargs = {k: v for k, v in d.items() if k != "shape"}
    kwargs["label"] = Label[kwargs.get("label", "BUILDING")]
    kwargs["tint"] = tuple(kwargs.get("tint", (0.8, 0.8, 0.8)))
    for key in ("center", "u_axis", "v_axis", "normal"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return kind(**kwargs)


def save_scene_spec(spec: SceneSpec, path) -> None:
    data = {
        "width": spec.width,
        "height": spec.height,
        "sky_color": list(spec.sky_color),
        "uncertainty": spec.uncertainty,
        "camera_path": [
            {"position": pose.position.tolist(), "quaternion": pose.orientation.tolist()}
            for pose in spec.camera_path
        ],
        "primitives": [_prim_to_dict(p) for p in spec.primitives],
        "cg_primitives": [_prim_to_dict(p) for p in spec.cg_primitives],
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_scene_spec(path) -> SceneSpec:
    data = json.loads(Path(path).read_text())
    return SceneSpec(
        width=int(data["width"]),
        height=int(data["height"]),
        camera_path=[
            CameraPose(np.asarray(p["position"], dtype=np.float64),
                       np.asarray(p["quaternion"], dtype=np.float64))
            for p in data["camera_path"]
        ],
        primitives=[_prim_from_dict(d) for d in data.get("primitives", [])],
        cg_primitives=[_prim_from_dict(d) for d in data.get("cg_primitives", [])],
        sky_color=tuple(data.get("sky_color", (0.55, 0.62, 0.72))),
        uncertainty=float(data.get("uncertainty", 0.01)),
    )


def materialize_dataset(spec: SceneSpec, out_dir, write_ground_truth: bool = True) -> Path:
    """Render the scene into a pipeline-consumable dataset directory.

    Writes frames/, poses.json, labels/, uncertainty/, cg/ + cg_depth/,
    and (optionally) gt_depth/ + gt_flow/ where gt_flow/{i}.flo holds the
    forward flow from frame i to i+1.
    """
    from . import fileio

    root = Path(out_dir)
    for sub in ("frames", "labels", "uncertainty", "cg", "cg_depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if write_ground_truth:
        (root / "gt_depth").mkdir(exist_ok=True)
        (root / "gt_flow").mkdir(exist_ok=True)

    n = len(spec.camera_path)
    fileio.save_poses(root / "poses.json", {i: spec.camera_path[i] for i in range(n)})
    for i in range(n):
        frame, depth, sem = render_scene(spec, i)
        name = f"{i:06d}"
        fileio.save_frame_srgb(root / "frames" / f"{name}.png", frame.pixels)
        fileio.save_label_png(root / "labels" / f"{name}.png", sem.labels)
        fileio.save_uncertainty_png(root / "uncertainty" / f"{name}.png", sem.uncertainty)
        cg = make_cg_layer(spec, spec.cg_primitives, i)
        fileio.save_cg_png(root / "cg" / f"{name}.png", cg.color[..., :3], cg.color[..., 3])
        fileio.write_depth_pfm(root / "cg_depth" / f"{name}.pfm", cg.depth.depth, cg.depth.valid)
        if write_ground_truth:
            fileio.write_depth_pfm(root / "gt_depth" / f"{name}.pfm", depth.depth, depth.valid)
            if i + 1 < n:
                gt = ground_truth_flow(spec, i, i + 1)
                fileio.write_flow(root / "gt_flow" / f"{name}.flo", gt.u, gt.valid)
    return root


def demo_scene(width: int = 256, n_frames: int = 8, step: float = 0.25) -> SceneSpec:
    """A ready-made corridor scene: textured walls, ground, and two CG spheres.

    The camera translates along +y; one CG sphere sits behind the near
    wall (should be hidden), the other floats over open ground (should be
    opaque).
    """
    height = width // 2
    path = [CameraPose.identity((0.0, step * i, 1.2)) for i in range(n_frames)]
    span = step * n_frames
    primitives = [
        Wall(center=(-4.0, span / 2, 2.0), u_axis=(0, 1, 0), v_axis=(0, 0, 1),
             half_u=span / 2 + 12.0, half_v=3.0, label=Label.BUILDING, seed=11,
             tint=(0.45, 0.38, 0.32)),
        Wall(center=(0.0, span / 2, -0.0), u_axis=(1, 0, 0), v_axis=(0, 1, 0),
             half_u=30.0, half_v=span / 2 + 25.0, label=Label.GROUND, seed=7,
             tint=(0.55, 0.52, 0.45)),
        Sphere(center=(5.0, span + 6.0, 2.5), radius=1.5, label=Label.TREE, seed=23,
               tint=(0.35, 0.55, 0.25)),
    ]
    cg_primitives = [
        Sphere(center=(-12.0, span / 2 + 1.0, 1.8), radius=1.8, label=Label.UNKNOWN,
               seed=41, tint=(1.0, 1.0, 1.0), is_cg=True),
        Sphere(center=(4.0, span / 2 + 2.0, 2.2), radius=1.0, label=Label.UNKNOWN,
               seed=43, tint=(0.95, 0.9, 0.95), is_cg=True),
    ]
    return SceneSpec(width=width, height=height, camera_path=path,
                     primitives=primitives, cg_primitives=cg_primitives)

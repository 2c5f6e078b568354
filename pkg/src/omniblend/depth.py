"""Motion-stereo depth for equirectangular sequences.

Pipeline pieces: locate the divergence point (focus of expansion) of the
flow field, triangulate per-pixel depth from the parallax angles of
corresponding pixels against that point, average depth over a temporal
window along flow correspondences, and turn real/CG depth pairs into a
foreground probability map.

Triangulation geometry: the camera translates from c_prev to c_curr; a
scene point seen at s_prev / s_curr makes parallax angles a_prev / a_curr
with the motion direction.  The triangle (c_prev, c_curr, X) gives

    |X - c_curr| = B * sin(a_prev) / sin(a_curr - a_prev)
    |X - c_prev| = B * sin(a_curr) / sin(a_curr - a_prev)

with baseline B = |c_curr - c_prev|.  The distance from the current
camera is returned by default (that is the view being composited);
``reference_camera="previous"`` selects the other numerator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .flow import FlowField, warp_scalar_field
from .sphere import AngularPoint, CameraPose, directions_from_pixels, parallax_angle_map

log = logging.getLogger(__name__)

# Flow directions shorter than this (pixels) carry no usable orientation
# for the divergence response.
_DIR_EPS = 1e-9

# Smoothed divergence responses below this are treated as "no radial
# structure" and trigger the region-center fallback.
_RESPONSE_FLOOR = 1e-4


@dataclass
class DepthMap:
    """Per-pixel depth in meters with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth)
        v = np.asarray(self.valid, dtype=bool)
        if d.shape != v.shape or d.ndim != 2:
            raise ValueError("depth and valid must be matching 2D arrays")
        finite = np.isfinite(d)
        if not finite.all():
            d = np.where(finite, d, 0.0)
            v = v & finite
        self.depth = d
        self.valid = v

    @classmethod
    def invalid(cls, height: int, width: int) -> "DepthMap":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))


@dataclass
class ProbabilityMap:
    """Per-pixel probability in [0, 1]."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p)
        if p.ndim != 2:
            raise ValueError("probability map must be 2D")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        self.p = p


@dataclass(frozen=True)
class DivergenceSearchRegion:
    """Rectangular angular region around the expected motion direction."""

    center: AngularPoint
    half_extent: tuple  # (delta_theta, delta_phi) radians

    def pixel_bounds(self, width: int, height: int):
        """Row range (clamped) and column range (may wrap) in pixel units."""
        dth, dph = self.half_extent
        if dth <= 0 or dph <= 0:
            raise ValueError("half extents must be positive")
        cy = self.center.theta / math.pi * height
        cx = self.center.phi / (2.0 * math.pi) * width
        r0 = max(0, int(math.floor(cy - dth / math.pi * height)))
        r1 = min(height, int(math.ceil(cy + dth / math.pi * height)))
        c0 = int(math.floor(cx - dph / (2.0 * math.pi) * width))
        c1 = int(math.ceil(cx + dph / (2.0 * math.pi) * width))
        if c1 - c0 >= width:
            c0, c1 = 0, width
        if r1 <= r0:
            raise ValueError("divergence search region is empty after clamping")
        return (r0, r1), (c0, c1)


@dataclass(frozen=True)
class DivergencePoint:
    """Detected divergence point plus a fallback flag.

    ``fallback`` is True when the region had too little valid flow or no
    radial structure, in which case ``point`` is the region center.
    """

    point: AngularPoint
    fallback: bool = False
    response: float = 0.0


def _region_mask(width: int, height: int, rows, cols) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    (r0, r1), (c0, c1) = rows, cols
    col_idx = np.arange(c0, c1) % width
    mask[np.ix_(np.arange(r0, r1), col_idx)] = True
    return mask


def divergence_response(flow: FlowField, kernel_size: int = 9) -> np.ndarray:
    """Box-smoothed discrete divergence of the direction-normalized flow.

    Raw flow divergence is position-affine for any linear radial field, so
    the flow is first normalized to unit direction vectors; the divergence
    of the direction field peaks sharply at the point the flow radiates
    from.  The two axis contributions are smoothed separately and combined
    as twice their minimum: genuine radial expansion diverges along both
    axes, whereas line-like seams (e.g. where regularization fills
    textureless regions from opposite sides) diverge along only one and
    are suppressed.  Diverging flow gives a positive response; the maximum
    marks the divergence point.
    """
    ux = flow.u[..., 0].astype(np.float64)
    uy = flow.u[..., 1].astype(np.float64)
    mag = np.hypot(ux, uy)
    scale = 1.0 / (mag + _DIR_EPS)
    nx = np.where(flow.valid, ux * scale, 0.0)
    ny = np.where(flow.valid, uy * scale, 0.0)

    # central differences, wrapping the azimuth axis
    ddx = 0.5 * (np.roll(nx, -1, axis=1) - np.roll(nx, 1, axis=1))
    ddy = np.empty_like(ny)
    ddy[1:-1] = 0.5 * (ny[2:] - ny[:-2])
    ddy[0] = ny[1] - ny[0]
    ddy[-1] = ny[-1] - ny[-2]
    sx = uniform_filter(ddx, size=kernel_size, mode=("nearest", "wrap"))
    sy = uniform_filter(ddy, size=kernel_size, mode=("nearest", "wrap"))
    return 2.0 * np.minimum(sx, sy)


def find_divergence_point(flow: FlowField, region: DivergenceSearchRegion,
                          kernel_size: int = 9) -> DivergencePoint:
    """Locate the flow divergence point inside the search region.

    The returned position is the response-weighted centroid of the pixels
    within 70% of the response peak (a subpixel refinement of the argmax
    pixel).  Falls back to the region center (flagged) when less than
    half of the region carries valid flow or when the response is flat,
    e.g. for a uniform translation field.
    """
    h, w = flow.u.shape[:2]
    rows, cols = region.pixel_bounds(w, h)
    mask = _region_mask(w, h, rows, cols)

    n_region = int(mask.sum())
    n_valid = int((mask & flow.valid).sum())
    if n_valid < 0.5 * n_region:
        log.warning("divergence search: only %d/%d region pixels have valid flow; "
                    "falling back to region center", n_valid, n_region)
        return DivergencePoint(region.center, fallback=True)

    response = divergence_response(flow, kernel_size=kernel_size)
    masked = np.where(mask & flow.valid, response, -np.inf)
    idx = int(np.argmax(masked))
    peak = float(masked.flat[idx])
    if not np.isfinite(peak) or peak < _RESPONSE_FLOOR:
        log.warning("divergence search: response peak %.3g below floor; "
                    "falling back to region center", peak)
        return DivergencePoint(region.center, fallback=True)

    row, col = divmod(idx, w)
    near_peak = masked >= 0.7 * peak
    ys, xs = np.nonzero(near_peak)
    wts = response[ys, xs]
    dx = np.mod(xs - col + w / 2.0, w) - w / 2.0  # unwrap around the peak column
    cx = (col + (dx @ wts) / wts.sum() + 0.5) % w
    cy = (ys @ wts) / wts.sum() + 0.5
    point = AngularPoint(cy / h * math.pi, cx / w * 2.0 * math.pi)
    return DivergencePoint(point, fallback=False, response=peak)


def refine_divergence_point(flow: FlowField, initial: AngularPoint,
                            min_flow_px: float = 0.5,
                            max_shift_rad: float = 0.35) -> DivergencePoint:
    """Refine a divergence-point estimate by great-circle intersection.

    Under pure camera translation every flow correspondence lies on a
    great circle through the divergence point, so its direction is the
    common null direction of the correspondence great-circle normals:
    the smallest eigenvector of M = sum(m m^T) with m = d_prev x d_curr.
    The sin^2 of each arc weights the sum, which makes the estimate rely
    on long, reliable flow vectors far from the divergence point (exactly
    where the windowed response is weakest).

    Falls back to ``initial`` when too little flow exceeds ``min_flow_px``
    pixels, when the eigen-gap is poor (non-translational flow), or when
    the solution lands further than ``max_shift_rad`` from the initial
    estimate.
    """
    h, w = flow.u.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    x0 = gx + 0.5
    y0 = gy + 0.5
    x1 = x0 + flow.u[..., 0]
    y1 = np.clip(y0 + flow.u[..., 1], 0.0, h)
    d0 = directions_from_pixels(x0, y0, w, h)
    d1 = directions_from_pixels(x1, y1, w, h)
    normals = np.cross(d0, d1)

    sel = flow.valid & (np.hypot(flow.u[..., 0], flow.u[..., 1]) >= min_flow_px)
    if int(sel.sum()) < 64:
        return DivergencePoint(initial, fallback=True)
    m = normals[sel]
    eigvals, eigvecs = np.linalg.eigh(m.T @ m)
    if eigvals[0] > 0.05 * max(eigvals[1], 1e-300):
        return DivergencePoint(initial, fallback=True)

    v = eigvecs[:, 0]
    prior = initial.direction()
    if float(v @ prior) < 0.0:
        v = -v
    shift = float(np.arctan2(np.linalg.norm(np.cross(prior, v)), float(prior @ v)))
    if shift > max_shift_rad:
        return DivergencePoint(initial, fallback=True)
    return DivergencePoint(AngularPoint.from_direction(v), fallback=False,
                           response=float(shift))


def triangulate_depth(flow: FlowField, pose_prev: CameraPose, pose_curr: CameraPose,
                      div: AngularPoint, eps_tri_deg: float = 0.2, d_max: float = 1000.0,
                      baseline_min: float = 0.01,
                      reference_camera: str = "current") -> DepthMap:
    """Per-pixel depth from flow correspondences and the divergence point.

    ``flow`` maps previous-frame pixels to current-frame correspondences;
    the output is indexed by the previous frame's grid and holds each
    scene point's distance from the selected camera (current by default).

    Pixels whose parallax-angle difference has sine <= sin(eps_tri) or a
    non-positive depth are invalid; valid depths are clamped to d_max.
    A baseline below ``baseline_min`` invalidates the whole map.
    """
    if reference_camera not in ("current", "previous"):
        raise ValueError("reference_camera must be 'current' or 'previous'")
    h, w = flow.u.shape[:2]
    baseline = float(np.linalg.norm(pose_curr.position - pose_prev.position))
    if baseline <= baseline_min:
        log.warning("triangulation: baseline %.4f m below minimum %.4f m; "
                    "returning an all-invalid depth map", baseline, baseline_min)
        return DepthMap.invalid(h, w)

    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    x_prev = gx + 0.5
    y_prev = gy + 0.5
    x_curr = x_prev + flow.u[..., 0]
    y_curr = y_prev + flow.u[..., 1]

    a_prev = parallax_angle_map(x_prev, y_prev, div, w, h)
    in_range = (y_curr >= 0.0) & (y_curr <= h)
    a_curr = parallax_angle_map(x_curr, np.clip(y_curr, 0.0, h), div, w, h)

    sin_gap = np.sin(a_curr - a_prev)
    sin_eps = math.sin(math.radians(eps_tri_deg))
    numerator = np.sin(a_prev) if reference_camera == "current" else np.sin(a_curr)

    with np.errstate(divide="ignore", invalid="ignore"):
        depth = baseline * numerator / sin_gap
    valid = flow.valid & in_range & (sin_gap > sin_eps) & (depth > 0.0) & np.isfinite(depth)
    depth = np.where(valid, np.minimum(depth, d_max), 0.0)
    return DepthMap(depth, valid)


def fuse_depth_temporal(history) -> DepthMap:
    """Average a window of depth maps after warping them to the last frame.

    ``history`` is a sequence of (DepthMap, FlowField-or-None) pairs for
    consecutive frames, oldest first, ending at the reference frame t.
    Each entry's flow maps that frame's pixels BACK to the previous
    frame's coordinates (the backward flow), so chaining
    warp_scalar_field pulls every older map forward onto frame t's grid.
    The first entry's flow is never used.

    Output pixels average the valid warped samples; a pixel with no valid
    sample is invalid.  A single-entry history is returned unchanged.
    """
    history = list(history)
    if not history:
        raise ValueError("temporal fusion needs at least one frame")
    ref_depth, _ = history[-1]
    if len(history) == 1:
        return DepthMap(ref_depth.depth.copy(), ref_depth.valid.copy())

    h, w = ref_depth.depth.shape
    total = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for i, (dmap, _) in enumerate(history):
        vals = dmap.depth
        mask = dmap.valid
        if vals.shape != (h, w):
            raise ValueError("all depth maps in the history must share dimensions")
        for j in range(i + 1, len(history)):
            chain_flow = history[j][1]
            if chain_flow is None:
                raise ValueError("interior history entries need a chaining flow")
            vals, mask = warp_scalar_field(vals, chain_flow, field_valid=mask)
        total += np.where(mask, vals, 0.0)
        count += mask

    valid = count > 0
    with np.errstate(invalid="ignore"):
        mean = np.where(valid, total / np.maximum(count, 1), 0.0)
    return DepthMap(mean, valid)


def foreground_probability(d_real: DepthMap, d_cg: DepthMap, k: float = 1.0,
                           p_unknown: float = 0.5) -> ProbabilityMap:
    """Sigmoid of the scaled CG/real depth gap: 1 / (1 + exp(-k (d_cg - d_real))).

    High values mean the real scene is in front of the CG object.  Where
    the real depth is unknown the prior ``p_unknown`` is used; where the
    CG layer has no depth (no coverage) the probability is 0.
    """
    if d_real.depth.shape != d_cg.depth.shape:
        raise ValueError("real and CG depth dimensions differ")
    gap = k * (d_cg.depth - d_real.depth)
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + np.exp(-gap))
    p = np.where(d_real.valid, p, p_unknown)
    p = np.where(d_cg.valid, p, 0.0)
    return ProbabilityMap(p)

"""Multi-scale primal-dual TV-L1 optical flow and flow-based warping.

The solver follows the classic duality-based TV-L1 structure: a coarse-to-
fine pyramid, per-level warping of the second image, and an inner fixed
point that alternates a pointwise data-term thresholding step with dual
updates of the total-variation term.

Equirectangular inputs are handled by wrapping the horizontal axis
(azimuth is periodic) and clamping the vertical axis everywhere: warping,
derivatives and the pyramid all use the same boundary rule.

Everything here is deterministic: two runs on identical inputs produce
bit-identical flow regardless of thread count (the solver is plain
vectorized numpy and never spawns workers).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter, median_filter

_GRAD_EPS = 1e-12


@dataclass
class FlowField:
    """Per-pixel 2D displacement in pixels; u[..., 0] = dx, u[..., 1] = dy.

    Non-finite displacements are never stored: they are zeroed and the
    pixel is marked invalid instead.
    """

    u: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u)
        if u.ndim != 3 or u.shape[2] != 2:
            raise ValueError("flow must be (H, W, 2)")
        if self.valid is None:
            valid = np.ones(u.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != u.shape[:2]:
            raise ValueError("valid mask shape must match flow")
        finite = np.isfinite(u).all(axis=2)
        if not finite.all():
            u = np.where(finite[..., None], u, 0.0)
            valid = valid & finite
        self.u = u
        self.valid = valid

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @classmethod
    def zero(cls, height: int, width: int, dtype=np.float32) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=dtype), np.ones((height, width), dtype=bool))


@dataclass(frozen=True)
class FlowParams:
    """TV-L1 solver parameters.

    ``iterations`` is the total inner-iteration budget; by default it is
    split evenly across the warps of each pyramid level (115 iterations /
    5 warps = 23 per warp).  Set ``split_iterations_across_warps`` False
    to run the full count at every warp instead.
    """

    lambda_: float = 100.0
    theta: float = 0.3
    tau: float = 0.25
    iterations: int = 115
    pyramid_scale: float = 0.5
    levels: int = 6
    warps_per_level: int = 5
    median_filter: bool = True
    split_iterations_across_warps: bool = True

    def __post_init__(self):
        if min(self.lambda_, self.theta, self.tau) <= 0:
            raise ValueError("lambda, theta and tau must be positive")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        if self.levels < 1 or self.iterations < 1 or self.warps_per_level < 1:
            raise ValueError("levels, iterations and warps_per_level must be >= 1")

    @property
    def iterations_per_warp(self) -> int:
        if self.split_iterations_across_warps:
            return max(1, round(self.iterations / self.warps_per_level))
        return self.iterations


def luminance(rgb: np.ndarray) -> np.ndarray:
    """0.299 R + 0.587 G + 0.114 B over the last axis."""
    rgb = np.asarray(rgb)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray, wrap_x: bool = True):
    """Bilinear lookup of ``img`` (H, W) at continuous index coordinates.

    x wraps modulo W when ``wrap_x``; y is clamped for the lookup and
    reported out-of-range via the returned mask (valid domain [0, H-1]).
    Integer coordinates pass values through bit-exactly.

    Returns (values, in_bounds).
    """
    h, w = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if wrap_x:
        x = np.mod(x, w)
    in_bounds = (y >= 0.0) & (y <= h - 1) & (x >= 0.0) & (x <= w if wrap_x else x <= w - 1)

    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(np.clip(y, 0, h - 1)).astype(np.intp)
    fx = (x - x0).astype(img.dtype, copy=False)
    fy = np.clip(y - y0, 0.0, 1.0).astype(img.dtype, copy=False)
    if wrap_x:
        x0 = np.mod(x0, w)
        x1 = np.mod(x0 + 1, w)
    else:
        x0 = np.clip(x0, 0, w - 1)
        x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)

    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    exact = (fx == 0) & (fy == 0)
    if exact.any():
        out = np.where(exact, v00, out)
    return out, in_bounds


def _forward_grad(a: np.ndarray, wrap_x: bool = True):
    gx = np.empty_like(a)
    if wrap_x:
        gx[:] = np.roll(a, -1, axis=1) - a
    else:
        gx[:, :-1] = a[:, 1:] - a[:, :-1]
        gx[:, -1] = 0.0
    gy = np.empty_like(a)
    gy[:-1] = a[1:] - a[:-1]
    gy[-1] = 0.0
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray, wrap_x: bool = True) -> np.ndarray:
    # Adjoint of -_forward_grad, so the primal-dual updates stay consistent.
    if wrap_x:
        dx = px - np.roll(px, 1, axis=1)
    else:
        dx = px.copy()
        dx[:, 1:] = px[:, 1:] - px[:, :-1]
    dy = np.empty_like(py)
    dy[0] = py[0]
    dy[1:-1] = py[1:-1] - py[:-2]
    dy[-1] = -py[-2]
    return dx + dy


def _central_grad(a: np.ndarray, wrap_x: bool = True):
    if wrap_x:
        gx = 0.5 * (np.roll(a, -1, axis=1) - np.roll(a, 1, axis=1))
    else:
        gx = np.empty_like(a)
        gx[:, 1:-1] = 0.5 * (a[:, 2:] - a[:, :-2])
        gx[:, 0] = 0.5 * (a[:, 1] - a[:, 0])
        gx[:, -1] = 0.5 * (a[:, -1] - a[:, -2])
    gy = np.empty_like(a)
    gy[1:-1] = 0.5 * (a[2:] - a[:-2])
    gy[0] = 0.5 * (a[1] - a[0])
    gy[-1] = 0.5 * (a[-1] - a[-2])
    return gx, gy


def _resize_bilinear(img: np.ndarray, height: int, width: int, wrap_x: bool = True) -> np.ndarray:
    h, w = img.shape[:2]
    xs = (np.arange(width, dtype=np.float64) + 0.5) * (w / width) - 0.5
    ys = (np.arange(height, dtype=np.float64) + 0.5) * (h / height) - 0.5
    gx, gy = np.meshgrid(xs, np.clip(ys, 0, h - 1))
    out, _ = bilinear_sample(img, gx, gy, wrap_x=wrap_x)
    return out


def _build_pyramid(img: np.ndarray, levels: int, scale: float, wrap_x: bool, min_dim: int = 16):
    pyr = [img]
    sigma = 0.6 * np.sqrt(1.0 / scale**2 - 1.0)
    for _ in range(1, levels):
        prev = pyr[-1]
        h2 = int(round(prev.shape[0] * scale))
        w2 = int(round(prev.shape[1] * scale))
        if min(h2, w2) < min_dim:
            break
        mode = ("nearest", "wrap") if wrap_x else "nearest"
        smoothed = gaussian_filter(prev, sigma=sigma, mode=mode)
        pyr.append(_resize_bilinear(smoothed, h2, w2, wrap_x=wrap_x))
    return pyr


def _median3(a: np.ndarray, wrap_x: bool) -> np.ndarray:
    # rank filters reject per-axis modes, so pad by hand: edge rows, wrap cols
    p = np.pad(a, ((1, 1), (0, 0)), mode="edge")
    p = np.pad(p, ((0, 0), (1, 1)), mode="wrap" if wrap_x else "edge")
    return median_filter(p, size=3, mode="nearest")[1:-1, 1:-1]


def _solve_level(i0, i1, u1, u2, params: FlowParams, wrap_x: bool):
    h, w = i0.shape
    lt = params.lambda_ * params.theta
    taut = params.tau / params.theta
    n_iters = params.iterations_per_warp

    gy, gx = np.mgrid[0:h, 0:w].astype(i0.dtype)
    p11 = np.zeros_like(i0)
    p12 = np.zeros_like(i0)
    p21 = np.zeros_like(i0)
    p22 = np.zeros_like(i0)

    for warp in range(params.warps_per_level):
        i1w, _ = bilinear_sample(i1, gx + u1, gy + u2, wrap_x=wrap_x)
        i1wx, i1wy = _central_grad(i1w, wrap_x=wrap_x)
        grad2 = i1wx * i1wx + i1wy * i1wy
        rho_c = i1w - i1wx * u1 - i1wy * u2 - i0
        small_grad = grad2 < _GRAD_EPS
        inv_grad2 = 1.0 / np.where(small_grad, 1.0, grad2)

        for _ in range(n_iters):
            rho = rho_c + i1wx * u1 + i1wy * u2
            th = lt * grad2
            # pointwise proximal step on the L1 data term
            mid1 = np.where(small_grad, 0.0, -rho * inv_grad2 * i1wx)
            mid2 = np.where(small_grad, 0.0, -rho * inv_grad2 * i1wy)
            d1 = np.where(rho < -th, lt * i1wx, np.where(rho > th, -lt * i1wx, mid1))
            d2 = np.where(rho < -th, lt * i1wy, np.where(rho > th, -lt * i1wy, mid2))
            v1 = u1 + d1
            v2 = u2 + d2
            # dual ascent on the TV term
            u1 = v1 + params.theta * _divergence(p11, p12, wrap_x)
            u2 = v2 + params.theta * _divergence(p21, p22, wrap_x)
            g1x, g1y = _forward_grad(u1, wrap_x)
            g2x, g2y = _forward_grad(u2, wrap_x)
            den1 = 1.0 + taut * np.sqrt(g1x * g1x + g1y * g1y)
            den2 = 1.0 + taut * np.sqrt(g2x * g2x + g2y * g2y)
            p11 = (p11 + taut * g1x) / den1
            p12 = (p12 + taut * g1y) / den1
            p21 = (p21 + taut * g2x) / den2
            p22 = (p22 + taut * g2y) / den2

        if params.median_filter and warp < params.warps_per_level - 1:
            u1 = _median3(u1, wrap_x)
            u2 = _median3(u2, wrap_x)

    return u1, u2


def compute_flow(i_prev: np.ndarray, i_curr: np.ndarray, params: FlowParams | None = None,
                 wrap_x: bool = True) -> FlowField:
    """TV-L1 flow mapping ``i_prev`` pixels to ``i_curr`` correspondences.

    Inputs are single-channel images with values normalized to [0, 1].
    Deterministic for fixed inputs and parameters.
    """
    if params is None:
        params = FlowParams()
    i_prev = np.ascontiguousarray(i_prev, dtype=np.float32)
    i_curr = np.ascontiguousarray(i_curr, dtype=np.float32)
    if i_prev.shape != i_curr.shape or i_prev.ndim != 2:
        raise ValueError(f"images must be 2D with equal shapes, got {i_prev.shape} vs {i_curr.shape}")

    pyr0 = _build_pyramid(i_prev, params.levels, params.pyramid_scale, wrap_x)
    pyr1 = _build_pyramid(i_curr, params.levels, params.pyramid_scale, wrap_x)

    u1 = np.zeros_like(pyr0[-1])
    u2 = np.zeros_like(pyr0[-1])
    for level in range(len(pyr0) - 1, -1, -1):
        i0, i1 = pyr0[level], pyr1[level]
        if u1.shape != i0.shape:
            sy = i0.shape[0] / u1.shape[0]
            sx = i0.shape[1] / u1.shape[1]
            u1 = _resize_bilinear(u1, i0.shape[0], i0.shape[1], wrap_x) * np.float32(sx)
            u2 = _resize_bilinear(u2, i0.shape[0], i0.shape[1], wrap_x) * np.float32(sy)
        u1, u2 = _solve_level(i0, i1, u1, u2, params, wrap_x)

    return FlowField(np.stack([u1, u2], axis=-1), np.ones(i_prev.shape, dtype=bool))


def tvl1_energy(i_prev: np.ndarray, i_curr: np.ndarray, flow: FlowField, lambda_: float,
                wrap_x: bool = True) -> float:
    """TV-L1 objective: sum_p (|grad u_x| + |grad u_y|) + lambda * sum_p |rho|.

    The data residual samples ``i_curr`` bilinearly at p + u(p) with the
    horizontal wrap / vertical clamp boundary rule.  With zero flow the TV
    term vanishes and the value is lambda * sum |i_curr - i_prev|.
    """
    i_prev = np.asarray(i_prev, dtype=np.float64)
    i_curr = np.asarray(i_curr, dtype=np.float64)
    if i_prev.shape != i_curr.shape:
        raise ValueError("image shapes differ")
    if flow.u.shape[:2] != i_prev.shape:
        raise ValueError("flow dimensions do not match the images")
    u1 = flow.u[..., 0].astype(np.float64)
    u2 = flow.u[..., 1].astype(np.float64)
    g1x, g1y = _forward_grad(u1, wrap_x)
    g2x, g2y = _forward_grad(u2, wrap_x)
    tv = np.sum(np.sqrt(g1x**2 + g1y**2)) + np.sum(np.sqrt(g2x**2 + g2y**2))
    h, w = i_prev.shape
    gy, gx = np.mgrid[0:h, 0:w]
    warped, _ = bilinear_sample(i_curr, gx + u1, np.clip(gy + u2, 0, h - 1), wrap_x=wrap_x)
    data = np.sum(np.abs(warped - i_prev))
    return float(tv + lambda_ * data)


def warp_scalar_field(field: np.ndarray, flow: FlowField, field_valid: np.ndarray | None = None,
                      wrap_x: bool = True):
    """Backward-warp a scalar map: out(p) = field(p + u(p)), bilinear.

    The horizontal axis wraps; samples whose vertical coordinate leaves
    [0, H-1], whose flow is invalid, or that touch an invalid field pixel
    with nonzero interpolation weight are marked invalid (and zeroed).

    Returns (warped, valid).
    """
    field = np.asarray(field)
    h, w = field.shape
    if flow.u.shape[:2] != field.shape:
        raise ValueError("flow dimensions do not match the field")

    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = gx + flow.u[..., 0]
    y = gy + flow.u[..., 1]

    if field_valid is not None:
        field_valid = np.asarray(field_valid, dtype=bool)
        data = np.where(field_valid, field, 0.0)
    else:
        data = field
    out, in_bounds = bilinear_sample(data, x, y, wrap_x=wrap_x)
    valid = in_bounds & flow.valid

    if field_valid is not None:
        if wrap_x:
            xm = np.mod(x, w)
        else:
            xm = x
        x0 = np.floor(xm).astype(np.intp)
        y0 = np.floor(np.clip(y, 0, h - 1)).astype(np.intp)
        fx = xm - x0
        fy = np.clip(y - y0, 0.0, 1.0)
        x0 = np.mod(x0, w) if wrap_x else np.clip(x0, 0, w - 1)
        x1 = np.mod(x0 + 1, w) if wrap_x else np.clip(x0 + 1, 0, w - 1)
        y1 = np.clip(y0 + 1, 0, h - 1)
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        valid &= ((w00 <= 0) | field_valid[y0, x0])
        valid &= ((w01 <= 0) | field_valid[y0, x1])
        valid &= ((w10 <= 0) | field_valid[y1, x0])
        valid &= ((w11 <= 0) | field_valid[y1, x1])

    out = np.where(valid, out, 0.0)
    return out, valid


def invert_flow(flow: FlowField, iterations: int = 3, wrap_x: bool = True) -> FlowField:
    """Approximate the reverse flow on the target grid.

    Given flow mapping frame A pixels to frame B correspondences, returns
    the flow defined on frame B's grid mapping back to frame A, via the
    fixed point u_b(q) = -u_a(q + u_b(q)).  Accurate wherever the forward
    flow varies smoothly; pixels whose lookups leave the image vertically
    or land on invalid forward flow are marked invalid.
    """
    h, w = flow.u.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    ua = flow.u[..., 0].astype(np.float64)
    va = flow.u[..., 1].astype(np.float64)

    ub = -ua
    vb = -va
    ok = np.ones((h, w), dtype=bool)
    for _ in range(iterations):
        sx, okx = bilinear_sample(ua, gx + ub, gy + vb, wrap_x=wrap_x)
        sy, _ = bilinear_sample(va, gx + ub, gy + vb, wrap_x=wrap_x)
        vsrc, _ = bilinear_sample(flow.valid.astype(np.float64), gx + ub, gy + vb, wrap_x=wrap_x)
        ok = okx & (vsrc > 0.999)
        ub = np.where(ok, -sx, ub)
        vb = np.where(ok, -sy, vb)

    u = np.stack([ub, vb], axis=-1).astype(flow.u.dtype)
    return FlowField(u, ok)


def scaled(params: FlowParams, **overrides) -> FlowParams:
    """Convenience copy-with-changes for FlowParams."""
    return replace(params, **overrides)

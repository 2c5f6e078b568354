"""Final-frame rendering: visibility-driven blending plus two baselines.

All three modes operate on linear-light RGB in [0, 1] and only ever touch
pixels inside the CG coverage mask, so everything outside it stays
bit-identical to the real frame.

The visibility mode needs a model of how visible the CG object actually
is at a given opacity.  The original visibility predictor (a human-vision
model) is not available here; this module substitutes a deliberately
simple surrogate: the achieved visibility at opacity alpha in a window W
is modeled as V_hat = alpha * D_W / kappa, where D_W is the window's
luminance contrast between CG and real content and kappa a calibration
constant.  Solving V_hat = V_target gives the per-window opacity

    alpha_W = clamp(kappa * mean(V_cg) / max(D_W, eps_d), 0, 1)

which is then interpolated bilinearly between window centers.  Replace
``window_opacities`` to swap in a faithful visibility predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth import DepthMap, ProbabilityMap
from .flow import luminance
from .semantics import VisibilityField, fixed_visibility_field


@dataclass
class CgLayer:
    """Externally rendered CG content: RGBA color plus aligned depth.

    ``color`` is (H, W, 4) linear RGB + coverage alpha; depth must be
    valid wherever alpha > 0.
    """

    color: np.ndarray
    depth: DepthMap

    def __post_init__(self):
        c = np.asarray(self.color)
        if c.ndim != 3 or c.shape[2] != 4:
            raise ValueError("CG color must be (H, W, 4)")
        if self.depth.depth.shape != c.shape[:2]:
            raise ValueError("CG depth dimensions do not match the color layer")
        self.color = c

    @property
    def mask(self) -> np.ndarray:
        return self.color[..., 3] > 0.0


@dataclass(frozen=True)
class BlendConfig:
    """Windowed blending configuration.

    kappa calibrates visibility targets to opacities (0.2 drives a target
    of 5.0 to full opacity on unit-contrast content); eps_d floors the
    contrast so textureless windows stay well-defined.
    """

    window: int = 32
    kappa: float = 0.2
    eps_d: float = 0.01
    mode: str = "visibility"

    def __post_init__(self):
        if self.window < 4:
            raise ValueError("window must be at least 4 pixels")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.mode not in ("visibility", "alpha", "fixed_transparency"):
            raise ValueError(f"unknown blend mode {self.mode!r}")


def alpha_blend(real: np.ndarray, cg: CgLayer, prob: ProbabilityMap) -> np.ndarray:
    """Probability-weighted blend: RGB = Real * P_f + Cg * (1 - P_f).

    Applied only inside the CG coverage mask; elsewhere the real frame
    passes through untouched.
    """
    real = np.asarray(real)
    if real.shape[:2] != cg.color.shape[:2] or prob.p.shape != real.shape[:2]:
        raise ValueError("frame, CG layer and probability map dimensions differ")
    out = real.copy()
    m = cg.mask
    pf = prob.p[m][:, None]
    out[m] = real[m] * pf + cg.color[m, :3] * (1.0 - pf)
    return out


def _window_grid(height: int, width: int, window: int):
    """Window edges and centers (index space) for a square tiling."""
    row_edges = list(range(0, height, window)) + [height]
    col_edges = list(range(0, width, window)) + [width]
    row_centers = np.array([(row_edges[i] + row_edges[i + 1] - 1) / 2.0
                            for i in range(len(row_edges) - 1)])
    col_centers = np.array([(col_edges[i] + col_edges[i + 1] - 1) / 2.0
                            for i in range(len(col_edges) - 1)])
    return row_edges, col_edges, row_centers, col_centers


def _window_reduce(values: np.ndarray, weights: np.ndarray, row_edges, col_edges):
    """Weighted sums of ``values`` and ``weights`` per window cell."""
    ny, nx = len(row_edges) - 1, len(col_edges) - 1
    vsum = np.zeros((ny, nx))
    wsum = np.zeros((ny, nx))
    wv = values * weights
    for i in range(ny):
        r0, r1 = row_edges[i], row_edges[i + 1]
        for j in range(nx):
            c0, c1 = col_edges[j], col_edges[j + 1]
            wsum[i, j] = weights[r0:r1, c0:c1].sum()
            vsum[i, j] = wv[r0:r1, c0:c1].sum()
    return vsum, wsum


def local_salience(real: np.ndarray, cg: CgLayer, window: int, eps_d: float = 0.01) -> np.ndarray:
    """Per-window contrast D_W between the CG layer and the real frame.

    D_W = mean |luma(Cg) - luma(Real)| / (mean luma(Real) + eps_d), with
    both means taken over the CG-covered pixels of the window.  Windows
    without coverage get 0.

    Returns an (ny, nx) array over the window grid.
    """
    if window < 4:
        raise ValueError("window must be at least 4 pixels")
    h, w = real.shape[:2]
    row_edges, col_edges, _, _ = _window_grid(h, w, window)
    cover = cg.mask.astype(np.float64)
    diff = np.abs(luminance(cg.color[..., :3]) - luminance(real))
    dsum, csum = _window_reduce(diff, cover, row_edges, col_edges)
    lsum, _ = _window_reduce(luminance(real), cover, row_edges, col_edges)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_diff = np.where(csum > 0, dsum / np.maximum(csum, 1), 0.0)
        mean_luma = np.where(csum > 0, lsum / np.maximum(csum, 1), 0.0)
    return np.where(csum > 0, mean_diff / (mean_luma + eps_d), 0.0)


def window_opacities(real: np.ndarray, cg: CgLayer, v_cg: np.ndarray,
                     cfg: BlendConfig):
    """Per-window opacity targets alpha_W plus coverage weights.

    This is the surrogate visibility model described in the module
    docstring; returns (alpha (ny, nx), coverage (ny, nx)).
    """
    h, w = real.shape[:2]
    row_edges, col_edges, _, _ = _window_grid(h, w, cfg.window)
    cover = cg.mask.astype(np.float64)
    vsum, csum = _window_reduce(v_cg, cover, row_edges, col_edges)
    with np.errstate(invalid="ignore"):
        v_mean = np.where(csum > 0, vsum / np.maximum(csum, 1), 0.0)
    d_w = local_salience(real, cg, cfg.window, cfg.eps_d)
    alpha = np.clip(cfg.kappa * v_mean / np.maximum(d_w, cfg.eps_d), 0.0, 1.0)
    alpha = np.where(csum > 0, alpha, 0.0)
    return alpha, csum


def interpolate_window_field(alpha: np.ndarray, coverage: np.ndarray,
                             height: int, width: int, window: int) -> np.ndarray:
    """Coverage-weighted bilinear interpolation of window values to pixels.

    Weights combine the bilinear kernel with each window's CG coverage so
    empty windows never dilute their covered neighbours.  Pixels with no
    covered window in reach get 0.
    """
    _, _, row_centers, col_centers = _window_grid(height, width, window)
    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)

    def axis_weights(coords, centers):
        idx0 = np.clip(np.searchsorted(centers, coords) - 1, 0, len(centers) - 1)
        idx1 = np.clip(idx0 + 1, 0, len(centers) - 1)
        span = centers[idx1] - centers[idx0]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(span > 0, (coords - centers[idx0]) / np.where(span > 0, span, 1.0), 0.0)
        return idx0, idx1, np.clip(t, 0.0, 1.0)

    r0, r1, ty = axis_weights(ys, row_centers)
    c0, c1, tx = axis_weights(xs, col_centers)
    ty = ty[:, None]
    tx = tx[None, :]
    r0 = r0[:, None]
    r1 = r1[:, None]
    c0 = c0[None, :]
    c1 = c1[None, :]

    num = np.zeros((height, width))
    den = np.zeros((height, width))
    for ri, wy in ((r0, 1.0 - ty), (r1, ty)):
        for ci, wx in ((c0, 1.0 - tx), (c1, tx)):
            wgt = wy * wx * coverage[ri, ci]
            num += wgt * alpha[ri, ci]
            den += wgt
    with np.errstate(invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def composite_with_alpha(real: np.ndarray, cg: CgLayer, alpha: np.ndarray) -> np.ndarray:
    """RGB = alpha * Cg + (1 - alpha) * Real inside the mask."""
    out = real.copy()
    m = cg.mask
    a = alpha[m][:, None]
    out[m] = a * cg.color[m, :3] + (1.0 - a) * real[m]
    return out


def visibility_blend(real: np.ndarray, cg: CgLayer, vis: VisibilityField,
                     cfg: BlendConfig | None = None):
    """Windowed visibility-targeted composite.

    Returns (frame, alpha_field); the alpha field is the per-pixel opacity
    actually applied (zero outside the mask).
    """
    if cfg is None:
        cfg = BlendConfig()
    real = np.asarray(real)
    if vis.v_cg.shape != real.shape[:2] or cg.color.shape[:2] != real.shape[:2]:
        raise ValueError("frame, CG layer and visibility field dimensions differ")
    h, w = real.shape[:2]
    alpha_w, coverage = window_opacities(real, cg, vis.v_cg, cfg)
    alpha = interpolate_window_field(alpha_w, coverage, h, w, cfg.window)
    alpha = np.where(cg.mask, np.clip(alpha, 0.0, 1.0), 0.0)
    return composite_with_alpha(real, cg, alpha), alpha


def fixed_transparency_blend(real: np.ndarray, cg: CgLayer, categories: np.ndarray,
                             prob: ProbabilityMap, table=None, sigma=None,
                             cfg: BlendConfig | None = None):
    """Visibility blend with fixed per-category levels (V_f1, V_b1).

    Identical machinery to ``visibility_blend`` but the classifier
    uncertainty never enters, so g has no effect on the output.
    """
    kwargs = {} if sigma is None else {"sigma": sigma}
    vis = fixed_visibility_field(categories, prob, table, **kwargs)
    return visibility_blend(real, cg, vis, cfg)

"""File formats used at the pipeline boundaries.

PFM      single-channel float maps (depth caches, CG depth, probability
         maps).  Negative scale marks little-endian; rows are stored
         bottom-to-top.  Depth maps encode invalid pixels as 0.0 (valid
         depths are strictly positive by contract).
.flo     Middlebury-style flow: float32 magic 202021.25, int32 width and
         height, then interleaved little-endian float32 (u, v) pairs,
         row-major top-to-bottom.  Components with magnitude above 1e9
         mark invalid pixels.
PNG      8-bit sRGB frames and composites, RGBA CG layers, palette-
         indexed label maps, grayscale uncertainty maps.
poses    JSON manifest {"frames": [{"index": i, "position": [x, y, z],
         "quaternion": [w, x, y, z]}, ...]} with meters / unit quaternions.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .semantics import LABEL_PALETTE, UNCERTAINTY_EPS
from .sphere import CameraPose

FLO_MAGIC = 202021.25
FLO_INVALID = 1e9


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("only single-channel PFM maps are written here")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(f"{scale}\n".encode("ascii"))
        rows = np.flipud(data)
        if scale < 0:
            rows.astype("<f4").tofile(fh)
        else:
            rows.astype(">f4").tofile(fh)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().rstrip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.fromfile(fh, dtype, count=w * h * channels)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).copy()


def write_depth_pfm(path, depth: np.ndarray, valid: np.ndarray) -> None:
    """Depth map with the invalid-as-zero convention."""
    write_pfm(path, np.where(valid, depth, 0.0))


def read_depth_pfm(path):
    """Returns (depth, valid); nonpositive or non-finite values are invalid."""
    data = read_pfm(path)
    valid = np.isfinite(data) & (data > 0.0)
    return np.where(valid, data, 0.0), valid


# -- Middlebury flow ---------------------------------------------------------

def write_flow(path, u: np.ndarray, valid: np.ndarray | None = None) -> None:
    u = np.asarray(u, dtype=np.float32)
    if u.ndim != 3 or u.shape[2] != 2:
        raise ValueError("flow must be (H, W, 2)")
    if valid is not None:
        u = np.where(np.asarray(valid, dtype=bool)[..., None], u, np.float32(2 * FLO_INVALID))
    h, w = u.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        u.astype("<f4").tofile(fh)


def read_flow(path):
    """Returns (u, valid) from a .flo file."""
    with open(path, "rb") as fh:
        magic = struct.unpack("<f", fh.read(4))[0]
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise ValueError(f"{path}: bad flow file magic {magic}")
        w, h = struct.unpack("<ii", fh.read(8))
        data = np.fromfile(fh, "<f4", count=w * h * 2).reshape(h, w, 2)
    valid = np.all(np.abs(data) < FLO_INVALID, axis=2) & np.isfinite(data).all(axis=2)
    return np.where(valid[..., None], data, 0.0), valid


# -- PNG / sRGB --------------------------------------------------------------

def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def load_frame_linear(path) -> np.ndarray:
    """8-bit sRGB PNG -> float64 linear RGB in [0, 1]."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(img)


def save_frame_srgb(path, linear_rgb: np.ndarray) -> None:
    srgb = linear_to_srgb(linear_rgb)
    Image.fromarray((srgb * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_cg_png(path):
    """RGBA PNG -> (linear RGB (H, W, 3), coverage alpha (H, W) in [0, 1])."""
    img = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    return srgb_to_linear(img[..., :3]), img[..., 3]


def save_cg_png(path, linear_rgb: np.ndarray, alpha: np.ndarray) -> None:
    srgb = linear_to_srgb(linear_rgb)
    rgba = np.dstack([srgb, np.clip(alpha, 0.0, 1.0)])
    Image.fromarray((rgba * 255.0 + 0.5).astype(np.uint8), mode="RGBA").save(path)


def save_label_png(path, labels: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[: len(LABEL_PALETTE)] = LABEL_PALETTE
    img.putpalette(palette.flatten().tolist())
    img.save(path)


def load_label_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise ValueError(f"{path}: label maps must be palette-indexed or grayscale")
    return np.asarray(img, dtype=np.uint8)


def save_uncertainty_png(path, g: np.ndarray) -> None:
    v = np.clip(np.asarray(g, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((v * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_uncertainty_png(path) -> np.ndarray:
    v = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return np.clip(v, UNCERTAINTY_EPS, 1.0 - UNCERTAINTY_EPS)


# -- pose manifest -----------------------------------------------------------

def save_poses(path, poses: dict) -> None:
    """``poses`` maps frame index -> CameraPose."""
    records = [
        {"index": int(i),
         "position": poses[i].position.tolist(),
         "quaternion": poses[i].orientation.tolist()}
        for i in sorted(poses)
    ]
    Path(path).write_text(json.dumps({"frames": records}, indent=2) + "\n")


def load_poses(path) -> dict:
    data = json.loads(Path(path).read_text())
    poses = {}
    for rec in data["frames"]:
        poses[int(rec["index"])] = CameraPose(
            np.asarray(rec["position"], dtype=np.float64),
            np.asarray(rec["quaternion"], dtype=np.float64),
        )
    return poses

"""Equirectangular pixel <-> spherical direction <-> world ray conversions.

Conventions (used everywhere in this package):
  - Image: x in [0, W] (columns, x = W wraps onto x = 0), y in [0, H] (rows).
  - Polar angle theta in [0, pi] maps linearly to rows: row 0 edge is the
    +z pole (theta = 0), row H edge is the -z pole (theta = pi).
  - Azimuth phi in [0, 2*pi) maps linearly to columns, increasing to the
    right; phi is periodic.
  - Direction on the unit sphere: (sin(theta)cos(phi), sin(theta)sin(phi),
    cos(theta)).  World frame is right-handed with +z up.
  - The invariant W = 2*H gives square angular pixels.
  - Pixel centers sample at (col + 0.5, row + 0.5) to avoid half-pixel bias.
  - Poses rotate camera directions into world rays: ray = orientation * d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

# Pole handling: directions with |sin(theta)| below this have no defined
# azimuth; the conventional column 0 is returned.
_POLE_EPS = 1e-12


@dataclass(frozen=True)
class AngularPoint:
    """A point on the sphere as (theta, phi) angles in radians."""

    theta: float
    phi: float

    def __post_init__(self):
        if not 0.0 <= self.theta <= np.pi:
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")
        object.__setattr__(self, "phi", float(self.phi) % TWO_PI)

    def direction(self) -> np.ndarray:
        """Unit 3-vector for this angular position."""
        st = np.sin(self.theta)
        return np.array(
            [st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)]
        )

    @classmethod
    def from_direction(cls, d: np.ndarray) -> "AngularPoint":
        d = np.asarray(d, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("zero vector has no angular position")
        d = d / n
        theta = float(np.arccos(np.clip(d[2], -1.0, 1.0)))
        phi = float(np.arctan2(d[1], d[0])) % TWO_PI
        return cls(theta, phi)


@dataclass(frozen=True)
class CameraPose:
    """Camera position (meters, world frame) and world-from-camera rotation.

    The quaternion is stored (w, x, y, z) and must be unit norm within 1e-9.
    """

    position: np.ndarray
    orientation: np.ndarray  # quaternion (w, x, y, z)

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        quat = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(quat) - 1.0) > 1e-9:
            raise ValueError("orientation quaternion must be unit norm within 1e-9")
        pos.setflags(write=False)
        quat.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    def rotate(self, d: np.ndarray) -> np.ndarray:
        """Rotate camera-frame direction(s) into world rays.

        Accepts a (3,) vector or an (..., 3) array.
        """
        d = np.asarray(d, dtype=np.float64)
        w, x, y, z = self.orientation
        q = np.array([x, y, z])
        t = 2.0 * np.cross(q, d)
        return d + w * t + np.cross(q, t)

    def rotate_inverse(self, d: np.ndarray) -> np.ndarray:
        """Rotate world direction(s) into the camera frame."""
        d = np.asarray(d, dtype=np.float64)
        w, x, y, z = self.orientation
        q = np.array([-x, -y, -z])
        t = 2.0 * np.cross(q, d)
        return d + w * t + np.cross(q, t)

    @classmethod
    def identity(cls, position=(0.0, 0.0, 0.0)) -> "CameraPose":
        return cls(np.asarray(position, dtype=np.float64), np.array([1.0, 0, 0, 0]))


@dataclass
class SphericalFrame:
    """Equirectangular RGB image with the angular mapping described above.

    ``pixels`` is (H, W, 3) float, linear-light RGB in [0, 1].  Frames are
    immutable after construction so they can be read concurrently.
    """

    pixels: np.ndarray
    timestamp_index: int = 0
    width: int = field(init=False)
    height: int = field(init=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must be (H, W, 3)")
        h, w = px.shape[:2]
        if w != 2 * h:
            raise ValueError(f"equirectangular frame needs width = 2*height, got {w}x{h}")
        px.setflags(write=False)
        self.pixels = px
        self.width = w
        self.height = h


def _check_bounds(x, y, width: int, height: int) -> None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > width) or np.any(y < 0.0) or np.any(y > height):
        raise ValueError(
            f"pixel out of bounds for {width}x{height} image "
            f"(x in [0,{width}], y in [0,{height}])"
        )


def directions_from_pixels(x, y, width: int, height: int) -> np.ndarray:
    """Vectorized pixel -> unit direction, no bounds checking.

    ``x``/``y`` are continuous pixel coordinates (a pixel (col, row) has its
    center at (col + 0.5, row + 0.5)).  Returns (..., 3) float64.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    phi = (x / width) * TWO_PI
    theta = (y / height) * np.pi
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def pixel_to_direction(p, width: int, height: int) -> np.ndarray:
    """Convert one continuous pixel coordinate (x, y) to a unit direction.

    Raises ValueError when p lies outside [0, W] x [0, H].
    """
    x, y = float(p[0]), float(p[1])
    _check_bounds(x, y, width, height)
    return directions_from_pixels(x, y, width, height)


def pixels_from_directions(d: np.ndarray, width: int, height: int) -> np.ndarray:
    """Vectorized unit direction -> continuous pixel coordinate (..., 2).

    Directions within _POLE_EPS of a pole get the conventional column 0.
    """
    d = np.asarray(d, dtype=np.float64)
    z = np.clip(d[..., 2], -1.0, 1.0)
    theta = np.arccos(z)
    phi = np.arctan2(d[..., 1], d[..., 0]) % TWO_PI
    st = np.sqrt(np.maximum(d[..., 0] ** 2 + d[..., 1] ** 2, 0.0))
    phi = np.where(st < _POLE_EPS, 0.0, phi)
    x = phi / TWO_PI * width
    y = theta / np.pi * height
    return np.stack([x, y], axis=-1)


def direction_to_pixel(d: np.ndarray, width: int, height: int) -> np.ndarray:
    """Convert a single unit 3-vector to pixel coordinates (x, y).

    The input must be unit norm within 1e-6; the zero vector is rejected.
    """
    d = np.asarray(d, dtype=np.float64).reshape(3)
    n = np.linalg.norm(d)
    if n == 0.0:
        raise ValueError("zero vector has no pixel position")
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit norm within 1e-6, |d| = {n}")
    return pixels_from_directions(d / n, width, height)


def angle_between(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """Great-circle angle between unit vectors, elementwise over (..., 3).

    Uses atan2(|cross|, dot), which stays accurate near 0 and pi.
    """
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    cross = np.cross(d1, d2)
    sin_a = np.linalg.norm(cross, axis=-1)
    cos_a = np.sum(d1 * d2, axis=-1)
    return np.arctan2(sin_a, cos_a)


def parallax_angle(p, div: AngularPoint, width: int, height: int) -> float:
    """Great-circle angle between pixel p's direction and the divergence point.

    Returns a value in [0, pi]; parallax_angle(p, p) == 0.
    """
    d = pixel_to_direction(p, width, height)
    return float(angle_between(d, div.direction()))


def parallax_angle_map(x, y, div: AngularPoint, width: int, height: int) -> np.ndarray:
    """Vectorized parallax angles for continuous pixel coordinate arrays."""
    d = directions_from_pixels(x, y, width, height)
    return angle_between(d, div.direction())

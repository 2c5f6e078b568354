import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from omniblend.sphere import (
    AngularPoint,
    CameraPose,
    SphericalFrame,
    angle_between,
    direction_to_pixel,
    directions_from_pixels,
    parallax_angle,
    pixel_to_direction,
    pixels_from_directions,
)

W, H = 256, 128


def test_center_pixel_is_equator():
    d = pixel_to_direction((W / 2, H / 2), W, H)
    assert abs(d[2]) < 1e-12  # theta = pi/2 -> z = 0
    assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-12)


def test_phi_wraps_at_image_edge():
    d0 = pixel_to_direction((0.0, H / 2), W, H)
    d1 = pixel_to_direction((float(W), H / 2), W, H)
    assert np.allclose(d0, d1, atol=1e-12)


def test_pole_directions_map_to_conventional_column():
    x, y = direction_to_pixel(np.array([0.0, 0.0, 1.0]), W, H)
    assert (x, y) == (0.0, 0.0)
    x, y = direction_to_pixel(np.array([0.0, 0.0, -1.0]), W, H)
    assert x == 0.0 and y == pytest.approx(H)


def test_equator_phi_pi_is_half_width():
    x, y = direction_to_pixel(np.array([-1.0, 0.0, 0.0]), W, H)
    assert x == pytest.approx(W / 2, abs=1e-9)
    assert y == pytest.approx(H / 2, abs=1e-9)


def test_round_trip_random_pixels():
    rng = np.random.default_rng(42)
    # exclude the two pole rows where phi is degenerate
    x = rng.uniform(0.0, W, size=10_000)
    y = rng.uniform(1.0, H - 1.0, size=10_000)
    d = directions_from_pixels(x, y, W, H)
    back = pixels_from_directions(d, W, H)
    err_x = np.abs(back[:, 0] - x)
    err_x = np.minimum(err_x, W - err_x)  # phi seam
    assert err_x.max() < 1e-6
    assert np.abs(back[:, 1] - y).max() < 1e-6


def test_out_of_bounds_pixel_rejected():
    with pytest.raises(ValueError):
        pixel_to_direction((-0.5, 10.0), W, H)
    with pytest.raises(ValueError):
        pixel_to_direction((10.0, H + 0.5), W, H)


def test_direction_to_pixel_rejects_bad_vectors():
    with pytest.raises(ValueError):
        direction_to_pixel(np.zeros(3), W, H)
    with pytest.raises(ValueError):
        direction_to_pixel(np.array([1.0, 0.0, 1.0]), W, H)  # norm sqrt(2)


def test_parallax_angle_zero_at_divergence_point():
    div = AngularPoint(np.pi / 3, 1.0)
    x, y = pixels_from_directions(div.direction(), W, H)
    assert parallax_angle((x, y), div, W, H) == pytest.approx(0.0, abs=1e-9)


def test_parallax_angle_antipode_is_pi():
    div = AngularPoint(np.pi / 3, 1.0)
    anti = AngularPoint(np.pi - np.pi / 3, 1.0 + np.pi)
    x, y = pixels_from_directions(anti.direction(), W, H)
    assert parallax_angle((x, y), div, W, H) == pytest.approx(np.pi, abs=1e-9)


def test_parallax_angle_orthogonal_direction():
    div = AngularPoint(np.pi / 2, 0.0)  # +x
    x, y = pixels_from_directions(np.array([0.0, 1.0, 0.0]), W, H)
    assert parallax_angle((x, y), div, W, H) == pytest.approx(np.pi / 2, abs=1e-9)


def test_angle_matches_acos_dot_oracle():
    rng = np.random.default_rng(3)
    d1 = rng.normal(size=(500, 3))
    d2 = rng.normal(size=(500, 3))
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    oracle = np.arccos(np.clip(np.sum(d1 * d2, axis=1), -1.0, 1.0))
    ours = angle_between(d1, d2)
    assert np.abs(ours - oracle).max() < 1e-9
    # symmetry
    assert np.allclose(angle_between(d2, d1), ours, atol=1e-15)


def test_camera_pose_requires_unit_quaternion():
    with pytest.raises(ValueError):
        CameraPose(np.zeros(3), np.array([1.0, 0.0, 0.0, 1.0]))


def test_camera_pose_rotation_matches_scipy():
    rng = np.random.default_rng(11)
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        pose = CameraPose(np.zeros(3), q)
        rot = Rotation.from_quat([q[1], q[2], q[3], q[0]])  # scipy is (x, y, z, w)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        assert np.allclose(pose.rotate(d), rot.apply(d), atol=1e-12)
        assert np.allclose(pose.rotate_inverse(pose.rotate(d)), d, atol=1e-12)


def test_spherical_frame_invariants():
    with pytest.raises(ValueError):
        SphericalFrame(np.zeros((64, 100, 3)))
    frame = SphericalFrame(np.zeros((64, 128, 3)))
    assert frame.width == 128 and frame.height == 64
    with pytest.raises(ValueError):
        frame.pixels[0, 0, 0] = 1.0  # immutable after construction


def test_angular_point_normalizes_phi():
    p = AngularPoint(0.5, 2.0 * np.pi + 0.25)
    assert p.phi == pytest.approx(0.25)
    with pytest.raises(ValueError):
        AngularPoint(-0.1, 0.0)

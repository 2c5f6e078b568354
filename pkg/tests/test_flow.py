import numpy as np
import pytest

from omniblend.flow import (
    FlowField,
    FlowParams,
    compute_flow,
    invert_flow,
    luminance,
    tvl1_energy,
    warp_scalar_field,
)

from conftest import value_noise


def test_identical_frames_give_zero_flow(textured_pair):
    i0, _ = textured_pair
    flow = compute_flow(i0, i0)
    assert np.abs(flow.u).max() < 0.05
    assert flow.valid.all()


def test_constant_images_give_zero_flow():
    img = np.full((32, 64), 0.5, dtype=np.float32)
    flow = compute_flow(img, img)
    assert np.abs(flow.u).max() == 0.0
    assert flow.valid.all()


def test_integer_shift_recovered(textured_pair):
    i0, i1 = textured_pair
    flow = compute_flow(i0, i1)
    epe = np.hypot(flow.u[..., 0] - 3.0, flow.u[..., 1])
    assert epe.mean() < 0.5


def test_single_level_one_pixel_shift(textured_pair):
    i0, _ = textured_pair
    i1 = np.roll(i0, 1, axis=1)
    flow = compute_flow(i0, i1, FlowParams(levels=1))
    epe = np.hypot(flow.u[..., 0] - 1.0, flow.u[..., 1])
    assert epe.mean() < 0.7


def test_full_resolution_smoke():
    # published parameter set on a full-size frame pair
    i0 = value_noise(512, 1024, seed=9)
    i1 = np.roll(i0, 5, axis=1)
    flow = compute_flow(i0, i1, FlowParams())
    assert np.isfinite(flow.u).all()
    assert flow.valid.all()


def test_determinism_bit_identical(textured_pair):
    i0, i1 = textured_pair
    f1 = compute_flow(i0, i1)
    f2 = compute_flow(i0, i1)
    assert np.array_equal(f1.u, f2.u)


def test_dimension_mismatch_rejected(textured_pair):
    i0, _ = textured_pair
    with pytest.raises(ValueError):
        compute_flow(i0, i0[:-2])


def test_energy_zero_for_identical_frames(textured_pair):
    i0, _ = textured_pair
    e = tvl1_energy(i0, i0, FlowField.zero(*i0.shape), 100.0)
    assert e == 0.0


def test_energy_zero_flow_equals_data_sum(textured_pair):
    i0, i1 = textured_pair
    lam = 100.0
    e = tvl1_energy(i0, i1, FlowField.zero(*i0.shape), lam)
    oracle = lam * np.sum(np.abs(i1 - i0))  # independent direct summation
    assert e == pytest.approx(oracle, rel=1e-12)


def test_energy_decreases_after_solve(textured_pair):
    i0, i1 = textured_pair
    flow = compute_flow(i0, i1)
    e0 = tvl1_energy(i0, i1, FlowField.zero(*i0.shape), 100.0)
    e1 = tvl1_energy(i0, i1, flow, 100.0)
    assert e1 <= e0


def test_flow_field_sanitizes_nonfinite():
    u = np.zeros((4, 8, 2))
    u[1, 2, 0] = np.nan
    u[2, 3, 1] = np.inf
    f = FlowField(u, np.ones((4, 8), dtype=bool))
    assert np.isfinite(f.u).all()
    assert not f.valid[1, 2] and not f.valid[2, 3]
    assert f.valid.sum() == 4 * 8 - 2


def test_flow_params_validation():
    with pytest.raises(ValueError):
        FlowParams(lambda_=0.0)
    with pytest.raises(ValueError):
        FlowParams(pyramid_scale=1.0)
    with pytest.raises(ValueError):
        FlowParams(levels=0)
    assert FlowParams().iterations_per_warp == 23  # 115 split over 5 warps
    assert FlowParams(split_iterations_across_warps=False).iterations_per_warp == 115


def test_luminance_weights():
    rgb = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
    assert np.allclose(luminance(rgb)[0], [0.299, 0.587, 0.114])


# -- warping ------------------------------------------------------------------

def test_warp_zero_flow_is_identity(textured_pair):
    i0, _ = textured_pair
    out, valid = warp_scalar_field(i0, FlowField.zero(*i0.shape))
    assert np.array_equal(out, i0)
    assert valid.all()


def test_warp_constant_flow_shifts_ramp():
    h, w = 16, 32
    ramp = np.tile(np.arange(w, dtype=np.float64), (h, 1))
    u = np.zeros((h, w, 2))
    u[..., 0] = 1.0
    out, valid = warp_scalar_field(ramp, FlowField(u, np.ones((h, w), bool)))
    # interior exact: out(x) = ramp(x + 1); the wrap seam at the last column
    assert np.array_equal(out[:, :-1], ramp[:, 1:])
    assert valid.all()


def test_warp_above_top_row_marked_invalid():
    h, w = 8, 16
    field = np.ones((h, w))
    u = np.zeros((h, w, 2))
    u[0, :, 1] = -1.0  # top row samples above the image
    out, valid = warp_scalar_field(field, FlowField(u, np.ones((h, w), bool)))
    assert not valid[0].any()
    assert valid[1:].all()
    assert (out[0] == 0.0).all()


def test_warp_is_linear_in_field():
    rng = np.random.default_rng(5)
    h, w = 24, 48
    f1 = rng.random((h, w))
    f2 = rng.random((h, w))
    u = rng.uniform(-2, 2, size=(h, w, 2))
    flow = FlowField(u, np.ones((h, w), bool))
    a, b = 2.5, -1.25
    lhs, v1 = warp_scalar_field(a * f1 + b * f2, flow)
    r1, _ = warp_scalar_field(f1, flow)
    r2, _ = warp_scalar_field(f2, flow)
    assert np.abs(lhs[v1] - (a * r1 + b * r2)[v1]).max() < 1e-6


def test_warp_respects_field_validity():
    h, w = 8, 16
    field = np.ones((h, w))
    fvalid = np.ones((h, w), dtype=bool)
    fvalid[4, 7] = False
    u = np.full((h, w, 2), 0.5)
    out, valid = warp_scalar_field(field, FlowField(u, np.ones((h, w), bool)), field_valid=fvalid)
    # the four output pixels whose bilinear stencils touch (4, 7) are invalid,
    # and the bottom row samples below the last row center
    assert not valid[3:5, 6:8].any()
    assert not valid[-1].any()
    assert valid.sum() == h * w - 4 - w


def test_warp_dimension_mismatch():
    with pytest.raises(ValueError):
        warp_scalar_field(np.zeros((4, 8)), FlowField.zero(4, 10))


def test_invert_constant_flow_is_negation():
    h, w = 16, 32
    u = np.zeros((h, w, 2))
    u[..., 0] = 2.0
    u[..., 1] = -1.0
    inv = invert_flow(FlowField(u, np.ones((h, w), bool)))
    m = inv.valid
    assert m.any()
    assert np.allclose(inv.u[m, 0], -2.0, atol=1e-9)
    assert np.allclose(inv.u[m, 1], 1.0, atol=1e-9)


def test_invert_smooth_flow_fixed_point():
    h, w = 32, 64
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = np.stack([1.5 + np.sin(gx / 10.0), 0.5 * np.cos(gy / 7.0)], axis=-1)
    fwd = FlowField(u, np.ones((h, w), bool))
    inv = invert_flow(fwd, iterations=5)
    # residual of the defining fixed point u_b(q) = -u_f(q + u_b(q))
    sx, _ = warp_scalar_field(u[..., 0], inv)
    sy, _ = warp_scalar_field(u[..., 1], inv)
    m = inv.valid
    res = np.hypot(inv.u[..., 0] + sx, inv.u[..., 1] + sy)[m]
    assert res.max() < 1e-3

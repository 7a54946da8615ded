import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oatinv.errors import InvalidArgument, InvalidGeometry
from oatinv.forward import (
    Acquisition,
    Sinogram,
    add_noise,
    adjoint_time_derivative,
    apply_adjoint,
    apply_forward,
    apply_time_derivative,
    arrival_bins,
    bandpass_filter,
    build_finite_aperture_operator,
    build_system_matrix,
    subdivide_sensor,
    synthesize_sinogram,
)
from oatinv.geometry import EnvironmentSpec, SensorArray, build_grid, place_sensors, realize_environment
from oatinv.selftest import operator_adjoint_defect


@pytest.fixture(scope="module")
def small_op():
    return build_system_matrix(build_grid(32, 32, 100e-6, 100e-6), place_sensors(8, 4e-3), 1490.0, 256, 20e-9)


def _one_sensor(pos):
    return SensorArray(np.array([pos], dtype=float), float(np.hypot(*pos)), 360.0, 0.0, perturbed=True)


def test_single_pixel_hand_value():
    # 2x2 grid, pixel centers at (+-0.5 mm); put the sensor so that one pixel sits 5 mm away
    grid = build_grid(2, 2, 1e-3, 1e-3)
    centers = grid.pixel_centers()
    sensor = centers[0] + np.array([-5e-3, 0.0])
    op = build_system_matrix(grid, _one_sensor(sensor), 1490.0, 1024, 10e-9)
    col = op.shell_matrix[:, 0].toarray().ravel()
    (k,) = np.flatnonzero(col)
    assert k == round(5e-3 / (1490 * 1e-8)) == 336
    want = (1 / (4 * math.pi * 1490.0**2)) * (grid.voxel_volume / 1e-16) / 5e-3
    assert col[k] == pytest.approx(want, rel=1e-12)


def test_equidistant_pixels_share_bin():
    grid = build_grid(2, 2, 1e-3, 1e-3)
    op = build_system_matrix(grid, _one_sensor((0.0, 6e-3)), 1490.0, 1024, 10e-9)
    a = op.shell_matrix.toarray()
    c0, c1 = np.flatnonzero(a[:, 1]), np.flatnonzero(a[:, 3])  # both at y = +0.5 mm
    assert c0.tolist() == c1.tolist()
    assert a[c0[0], 1] == a[c1[0], 3]


def test_tie_goes_to_lower_bin():
    vs, dt = 1000.0, 1e-3
    assert arrival_bins(np.array([2.5]), vs, dt)[0] == 2
    assert arrival_bins(np.array([2.5000001]), vs, dt)[0] == 3
    assert arrival_bins(np.array([2.4999999]), vs, dt)[0] == 2


def test_nnz_bound_full_scale():
    op = build_system_matrix(build_grid(128, 128, 60e-6, 60e-6), place_sensors(32, 10e-3), 1490.0, 1024, 10e-9)
    assert op.shell_matrix.nnz <= 32 * 128 * 128
    assert op.shell_matrix.nnz + op.dropped == 32 * 128 * 128
    assert (op.shell_matrix.data > 0).all()


def test_nonzero_values_match_formula(small_op):
    coo = small_op.shell_matrix.tocoo()
    det = coo.row // small_op.n_t
    d = np.linalg.norm(small_op.sensors.positions[det] - small_op.grid.pixel_centers()[coo.col], axis=1)
    want = small_op.grid.voxel_volume / (4 * math.pi * 1490.0**2 * (20e-9) ** 2) / d
    np.testing.assert_allclose(coo.data, want, rtol=1e-12)
    # one entry per (detector, pixel) pair
    assert len(set(zip(det.tolist(), coo.col.tolist()))) == coo.nnz
    # arrival-time indicator
    t = (coo.row % small_op.n_t) * 20e-9
    assert np.all(np.abs(t - d / 1490.0) <= 10e-9 * (1 + 1e-9))


def test_window_drops_are_counted():
    op = build_system_matrix(build_grid(16, 16, 1e-4, 1e-4), place_sensors(4, 5e-3), 1490.0, 8, 20e-9)
    assert op.shell_matrix.nnz == 0 and op.dropped == 4 * 256


def test_sensor_inside_grid_rejected():
    grid = build_grid(16, 16, 1e-4, 1e-4)
    with pytest.raises(InvalidGeometry):
        build_system_matrix(grid, _one_sensor((1e-4, 0.0)), 1490.0, 64, 20e-9)


def test_derivative_stencil():
    np.testing.assert_allclose(apply_time_derivative(np.array([0.0, 1.0, 0.0])), [0.5, 0.0, -0.5])
    assert not apply_time_derivative(np.full((2, 9), 3.0))[:, 1:-1].any()
    with pytest.raises(InvalidArgument):
        apply_time_derivative(np.zeros(2))


def test_derivative_adjoint_is_transpose():
    n = 7
    d = np.stack([apply_time_derivative(e) for e in np.eye(n)], axis=1)
    dt = np.stack([adjoint_time_derivative(e) for e in np.eye(n)], axis=1)
    np.testing.assert_array_equal(d.T, dt)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 64))
def test_derivative_adjoint_identity(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 3, n))
    lhs = np.vdot(apply_time_derivative(x), y)
    rhs = np.vdot(x, adjoint_time_derivative(y))
    assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(x) * np.linalg.norm(y)


def test_operator_adjoint(small_op):
    assert operator_adjoint_defect(small_op, 20, seed=1) < 1e-12


def test_linearity(small_op):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, 32, 32))
    lhs = apply_forward(small_op, 2.0 * x - 0.5 * y).data
    rhs = 2.0 * apply_forward(small_op, x).data - 0.5 * apply_forward(small_op, y).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * np.abs(rhs).max())
    assert not apply_forward(small_op, np.zeros((32, 32))).data.any()
    assert not apply_adjoint(small_op, np.zeros(small_op.sinogram_shape)).any()


def test_single_pixel_sinogram_is_stencil(small_op):
    img = np.zeros((32, 32))
    img[10, 20] = 1.0
    sino = apply_forward(small_op, img).data
    col = small_op.shell_matrix[:, 10 * 32 + 20].toarray().reshape(small_op.n_d, small_op.n_t)
    for l in range(small_op.n_d):
        k = int(np.flatnonzero(col[l])[0])
        expect = np.zeros(small_op.n_t)
        expect[k - 1], expect[k + 1] = 0.5 * col[l, k], -0.5 * col[l, k]
        np.testing.assert_array_equal(sino[l], expect)


def test_shape_mismatch(small_op):
    with pytest.raises(InvalidArgument):
        apply_forward(small_op, np.zeros((31, 32)))
    with pytest.raises(InvalidArgument):
        apply_adjoint(small_op, np.zeros((8, 255)))


def test_point_adjoint_radially_symmetric():
    n = 33
    grid = build_grid(n, n, 100e-6, 100e-6)
    op = build_system_matrix(grid, place_sensors(16, 4e-3), 1490.0, 256, 20e-9)
    img = np.zeros((n, n))
    img[16, 16] = 1.0
    back = apply_adjoint(op, apply_forward(op, img))
    # symmetry group of a 16-sensor ring includes the 90 degree rotation and the axis flips
    scale = np.abs(back).max()
    for other in (np.rot90(back), back[::-1, :], back[:, ::-1], back.T):
        assert np.abs(other - back).max() < 1e-9 * scale


def test_bandpass_dc_removed():
    s = Sinogram(np.ones((2, 2048)), 10e-9)
    out = bandpass_filter(s)
    assert np.sum(out.data**2) < 1e-6 * np.sum(s.data**2)


def test_bandpass_passband_and_stopband():
    # long record: the 0.1 MHz edge rings for ~1000 samples, measure the steady state
    t = np.arange(16384) * 10e-9
    mid = slice(6000, 10000)
    five = bandpass_filter(Sinogram(np.sin(2 * np.pi * 5e6 * t)[None], 10e-9)).data[0]
    assert np.abs(five[mid]).max() == pytest.approx(1.0, abs=0.05)
    forty = bandpass_filter(Sinogram(np.sin(2 * np.pi * 40e6 * t)[None], 10e-9)).data[0]
    assert 20 * np.log10(np.abs(forty[mid]).max()) <= -30


def test_bandpass_zero_phase():
    t = np.arange(1001)
    pulse = np.exp(-0.5 * ((t - 500) / 3.0) ** 2) * np.cos(0.6 * (t - 500))
    out = bandpass_filter(Sinogram(pulse[None], 10e-9)).data[0]
    assert abs(int(np.argmax(np.abs(out))) - 500) <= 1
    centroid = np.sum(t * out**2) / np.sum(out**2)
    assert abs(centroid - 500) <= 1


@pytest.mark.parametrize("band", [(0.0, 15e6), (15e6, 1e6), (1e6, 60e6)])
def test_bandpass_bad_cutoffs(band):
    with pytest.raises(InvalidArgument):
        bandpass_filter(Sinogram(np.zeros((1, 64)), 10e-9), *band)


def test_noise_infinite_snr_identity():
    s = Sinogram(np.arange(12.0).reshape(2, 6), 1e-8)
    assert add_noise(s, math.inf, 0) is s


def test_noise_zero_power_rejected():
    with pytest.raises(InvalidArgument):
        add_noise(Sinogram(np.zeros((2, 8)), 1e-8), 40.0, 0)


@pytest.mark.parametrize("snr", [40.0, 50.0, 60.0])
def test_noise_calibration(snr):
    rng = np.random.default_rng(1)
    s = Sinogram(rng.standard_normal((64, 2048)), 1e-8)
    noisy = add_noise(s, snr, 9)
    realized = 10 * np.log10(np.mean(s.data**2) / np.mean((noisy.data - s.data) ** 2))
    assert abs(realized - snr) <= 0.5


def test_noise_seeded_and_channel_independent():
    s = Sinogram(np.ones((2, 1024)), 1e-8)
    a, b = add_noise(s, 10.0, 3), add_noise(s, 10.0, 3)
    np.testing.assert_array_equal(a.data, b.data)
    n = a.data - 1.0
    assert abs(np.corrcoef(n[0], n[1])[0, 1]) < 0.05


def test_synthesis_matches_manual_pipeline():
    grid = build_grid(32, 32, 100e-6, 100e-6)
    nominal = Acquisition(radius=4e-3, n_t=256, dt=20e-9)
    spec = EnvironmentSpec(n_detectors=8)
    env = realize_environment(spec, nominal.vs, nominal.radius, 4)
    rng = np.random.default_rng(0)
    img = rng.random((32, 32))
    got = synthesize_sinogram(img, env, grid, nominal, seed=7)
    op = build_system_matrix(grid, place_sensors(8, 4e-3), nominal.vs, 256, 20e-9)
    want = add_noise(bandpass_filter(apply_forward(op, img)), env.snr_db, 7)
    np.testing.assert_array_equal(got.data, want.data)


def test_synthesis_zero_phantom_no_noise():
    grid = build_grid(16, 16, 100e-6, 100e-6)
    nominal = Acquisition(radius=4e-3, n_t=128, dt=20e-9)
    env = realize_environment(EnvironmentSpec(n_detectors=4, snr_range_db=(math.inf, math.inf)),
                              nominal.vs, nominal.radius, 0)
    assert not synthesize_sinogram(np.zeros((16, 16)), env, grid, nominal, 0).data.any()


def test_speed_error_shifts_arrival():
    grid = build_grid(2, 2, 1e-4, 1e-4)
    sensor = _one_sensor((8e-3, 0.0))
    k0 = np.flatnonzero(build_system_matrix(grid, sensor, 1490.0, 2048, 10e-9).shell_matrix[:, 0].toarray())[0]
    k1 = np.flatnonzero(build_system_matrix(grid, sensor, 1490.0 * 1.02, 2048, 10e-9).shell_matrix[:, 0].toarray())[0]
    assert abs((k0 - k1) / k0 - 0.02 / 1.02) < 2 / k0


def test_subdivide_sensor():
    p = np.array([0.0, 10e-3])
    one = subdivide_sensor(p, 1e-3, 1)
    np.testing.assert_array_equal(one.positions, [p])
    three = subdivide_sensor(p, 2e-3, 3)
    np.testing.assert_allclose(three.positions[:, 0], [1e-3, 0.0, -1e-3], atol=1e-18)
    np.testing.assert_allclose(three.positions[:, 1], 10e-3)
    with pytest.raises(InvalidArgument):
        subdivide_sensor(p, 1e-3, 0)


def test_finite_aperture_lowers_peak():
    grid = build_grid(32, 32, 100e-6, 100e-6)
    sensors = place_sensors(4, 5e-3)
    img = np.zeros((32, 32))
    img[4, 26] = 1.0  # off-axis point
    point = apply_forward(build_system_matrix(grid, sensors, 1490.0, 512, 10e-9), img).data
    wide = apply_forward(build_finite_aperture_operator(grid, sensors, 1490.0, 512, 10e-9, 2e-3, 7), img).data
    assert np.abs(wide).max() < np.abs(point).max()

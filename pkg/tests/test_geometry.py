import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oatinv.errors import InvalidArgument
from oatinv.geometry import (
    EnvironmentSpec,
    ImagingGrid,
    build_grid,
    place_sensors,
    realize_environment,
    sensor_angles,
)


def test_grid_extent_covers_roi():
    g = build_grid(128, 128, 60e-6, 60e-6)
    xmin, xmax, ymin, ymax = g.extent
    assert xmax - xmin == pytest.approx(7.68e-3)
    assert xmax - xmin >= 7.2e-3 and ymax - ymin >= 7.2e-3


def test_two_by_two_centers():
    g = build_grid(2, 2, 1.0, 1.0)
    centers = {tuple(c) for c in g.pixel_centers()}
    assert centers == {(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)}


def test_desk_grid_first_pixel():
    g = build_grid(64, 64, 120e-6, 120e-6)
    np.testing.assert_allclose(g.pixel_centers()[0], (-3.78e-3, -3.78e-3), rtol=0, atol=1e-15)
    assert g.extent[1] - g.extent[0] == pytest.approx(build_grid(128, 128, 60e-6, 60e-6).extent[1] * 2)


def test_pixel_center_formula():
    g = ImagingGrid(5, 3, 0.2, 0.5, center=(1.0, -2.0))
    c = g.pixel_centers().reshape(5, 3, 2)
    for i in range(5):
        for j in range(3):
            np.testing.assert_allclose(c[i, j], (1.0 + (i - 2) * 0.2, -2.0 + (j - 1) * 0.5), atol=1e-15)


def test_voxel_volume_defaults_to_cube():
    g = build_grid(4, 4, 2e-4, 2e-4)
    assert g.voxel_volume == pytest.approx(8e-12)


@pytest.mark.parametrize("args", [(1, 4, 1.0, 1.0), (4, 4, 0.0, 1.0), (4, 4, 1.0, -1.0)])
def test_grid_rejects_bad_sizes(args):
    with pytest.raises(InvalidArgument):
        build_grid(*args)


def test_full_ring_spacing():
    s = place_sensors(32, 10e-3, 360, 0)
    assert len(s) == 32
    ang = np.sort(np.degrees(np.arctan2(s.positions[:, 1], s.positions[:, 0])) % 360)
    gaps = np.diff(np.concatenate([ang, [ang[0] + 360]]))
    np.testing.assert_allclose(gaps, 11.25, atol=1e-9)


def test_single_sensor_at_offset():
    s = place_sensors(1, 1.0, 360, 90)
    np.testing.assert_allclose(s.positions[0], (0.0, 1.0), atol=1e-15)


def test_partial_arc_inclusive():
    np.testing.assert_allclose(sensor_angles(4, 90, 0), [0, 30, 60, 90])


@pytest.mark.parametrize("cov", [0.0, -10.0, 360.5])
def test_bad_coverage(cov):
    with pytest.raises(InvalidArgument):
        place_sensors(4, 1.0, cov)


def test_positions_read_only():
    s = place_sensors(4, 1.0)
    with pytest.raises(ValueError):
        s.positions[0, 0] = 3.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 64), r=st.floats(1e-3, 1.0), cov=st.floats(1.0, 360.0), off=st.floats(-180, 180))
def test_sensors_on_circle(n, r, cov, off):
    s = place_sensors(n, r, cov, off)
    np.testing.assert_allclose(np.hypot(*s.positions.T), r, rtol=0, atol=1e-12)
    assert not s.perturbed


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 64))
def test_full_ring_rotation_closure(n):
    s = place_sensors(n, 0.01, 360, 0)
    a = np.radians(360.0 / n)
    rot = s.positions @ np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
    d = np.linalg.norm(rot[:, None, :] - s.positions[None, :, :], axis=2)
    assert d.min(axis=1).max() < 1e-12
    gaps = np.linalg.norm(s.positions[:, None] - s.positions[None], axis=2)
    np.fill_diagonal(gaps, np.inf)
    assert gaps.min() > 0


def test_zero_uncertainty_identity():
    spec = EnvironmentSpec(n_detectors=8, snr_range_db=(60, 60))
    env = realize_environment(spec, 1490.0, 10e-3, seed=3)
    np.testing.assert_array_equal(env.sensors_true.positions, place_sensors(8, 10e-3).positions)
    assert env.vs_true == 1490.0 and env.snr_db == 60.0
    assert not env.sensors_true.perturbed


def test_realization_deterministic():
    spec = EnvironmentSpec(position_uncertainty_pct=1.0, vs_uncertainty_pct=0.5)
    a = realize_environment(spec, 1490.0, 10e-3, 11)
    b = realize_environment(spec, 1490.0, 10e-3, 11)
    assert a.sensors_true.positions.tobytes() == b.sensors_true.positions.tobytes()
    assert (a.vs_true, a.snr_db) == (b.vs_true, b.snr_db)
    c = realize_environment(spec, 1490.0, 10e-3, 12)
    assert not np.array_equal(a.sensors_true.positions, c.sensors_true.positions)


def test_position_perturbation_std():
    spec = EnvironmentSpec(n_detectors=16, position_uncertainty_pct=1.0)
    nominal = place_sensors(16, 10e-3).positions
    disp = np.concatenate([
        (realize_environment(spec, 1490.0, 10e-3, s).sensors_true.positions - nominal).ravel()
        for s in range(400)])
    assert disp.size >= 1e4
    assert abs(disp.std() - 100e-6) / 100e-6 < 0.05


def test_vs_perturbation_std():
    spec = EnvironmentSpec(vs_uncertainty_pct=2.0)
    vs = np.array([realize_environment(spec, 1490.0, 10e-3, s).vs_true for s in range(4000)])
    assert abs((vs / 1490.0 - 1).std() - 0.02) / 0.02 < 0.05


def test_snr_uniform_in_range():
    spec = EnvironmentSpec(snr_range_db=(40, 60))
    snr = np.array([realize_environment(spec, 1490.0, 10e-3, s).snr_db for s in range(2000)])
    assert snr.min() >= 40 and snr.max() <= 60
    assert abs(snr.mean() - 50) < 0.5


def test_paired_draws_share_variates():
    lax = EnvironmentSpec(position_uncertainty_pct=0.5)
    hard = EnvironmentSpec(position_uncertainty_pct=1.5)
    nominal = place_sensors(16, 10e-3).positions
    a = realize_environment(lax, 1490.0, 10e-3, 5).sensors_true.positions - nominal
    b = realize_environment(hard, 1490.0, 10e-3, 5).sensors_true.positions - nominal
    np.testing.assert_allclose(b, 3 * a, rtol=1e-12, atol=1e-18)


@pytest.mark.parametrize("kw", [dict(n_detectors=0), dict(position_uncertainty_pct=-1),
                                dict(vs_uncertainty_pct=-0.1), dict(snr_range_db=(60, 40))])
def test_spec_validation(kw):
    with pytest.raises(InvalidArgument):
        EnvironmentSpec(**kw)

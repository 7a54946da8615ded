import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oatinv.errors import InvalidArgument
from oatinv.forward import (
    Acquisition,
    apply_adjoint,
    apply_forward,
    build_system_matrix,
    nominal_operator,
    synthesize_sinogram,
)
from oatinv.geometry import EnvironmentSpec, build_grid, place_sensors, realize_environment
from oatinv.io import MAGIC, export_png, read_sidecar, read_tensor, sha256_file, write_tensor
from oatinv.lbp import lbp_reconstruct
from oatinv.metrics import ssim
from oatinv.phantoms import generate_vessel_phantom


@pytest.fixture(scope="module")
def op32():
    return build_system_matrix(build_grid(32, 32, 120e-6, 120e-6), place_sensors(32, 5e-3), 1490.0, 512, 10e-9)


def test_zero_sinogram(op32):
    out = lbp_reconstruct(op32, np.zeros(op32.sinogram_shape))
    assert out.scale == 1.0 and not out.data.any()


def test_normalized_and_denormalizable(op32):
    rng = np.random.default_rng(0)
    sino = rng.standard_normal(op32.sinogram_shape)
    out = lbp_reconstruct(op32, sino)
    assert np.abs(out.data).max() == 1.0
    np.testing.assert_allclose(out.denormalized(), apply_adjoint(op32, sino), rtol=1e-14)


def test_negative_values_kept(op32):
    img = np.zeros((32, 32))
    img[12:20, 15] = 1.0
    out = lbp_reconstruct(op32, apply_forward(op32, img))
    assert out.data.min() < 0


def test_point_localization(op32):
    img = np.zeros((32, 32))
    img[9, 21] = 1.0
    out = lbp_reconstruct(op32, apply_forward(op32, img))
    i, j = np.unravel_index(np.argmax(out.data), out.data.shape)
    assert abs(i - 9) <= 1 and abs(j - 21) <= 1


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_prenormalization_superposition(op32, seed, a, b):
    rng = np.random.default_rng(seed)
    s1, s2 = rng.standard_normal((2,) + op32.sinogram_shape)
    lhs = lbp_reconstruct(op32, a * s1 + b * s2).denormalized()
    rhs = a * apply_adjoint(op32, s1) + b * apply_adjoint(op32, s2)
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(np.abs(rhs).max(), 1e-300) + 1e-300


def test_shape_mismatch(op32):
    with pytest.raises(InvalidArgument):
        lbp_reconstruct(op32, np.zeros((32, 511)))


def test_position_mismatch_lowers_ssim():
    grid = build_grid(64, 64, 120e-6, 120e-6)
    nominal = Acquisition(n_t=512, dt=20e-9)
    op = nominal_operator(grid, nominal, 16)
    matched, mismatched = [], []
    for seed in range(8):
        ph = generate_vessel_phantom(grid, seed).image
        for pct, bucket in ((0.0, matched), (1.5, mismatched)):
            env = realize_environment(EnvironmentSpec(position_uncertainty_pct=pct,
                                                      snr_range_db=(60, 60)), nominal.vs, nominal.radius, seed)
            sino = synthesize_sinogram(ph, env, grid, nominal, seed)
            bucket.append(ssim(lbp_reconstruct(op, sino).data, ph))
    assert np.mean(mismatched) < np.mean(matched)
    assert sum(m < u for m, u in zip(mismatched, matched)) >= 7


def test_tensor_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((3, 5, 7))
    path = write_tensor(tmp_path / "x.oat", arr, {"dt": 1e-8, "seed": 4})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC and len(raw) == 16 + 3 * 8 + arr.size * 8
    back = read_tensor(path)
    assert back.tobytes() == arr.tobytes()
    meta = read_sidecar(path)
    assert meta == {"dt": 1e-8, "seed": 4}


def test_tensor_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.oat"
    bad.write_bytes(b"NOTATENSOR" + bytes(30))
    with pytest.raises(InvalidArgument):
        read_tensor(bad)


def test_png_export_mapping(tmp_path):
    img = np.linspace(0, 1, 64).reshape(8, 8)
    mapping = export_png(tmp_path / "a.png", img)
    codes = np.asarray(Image.open(tmp_path / "a.png"))
    assert codes.max() == 65535 and codes.min() == 0
    assert json.loads((tmp_path / "a.png.json").read_text()) == mapping
    np.testing.assert_allclose(codes / 65535.0, img, atol=1 / 65535)


def test_sha256_stable(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"abc")
    assert sha256_file(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

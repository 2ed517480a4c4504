import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loop_cross_correlation, loop_loss
from prl.errors import PreconditionError, ValidationError
from prl.ssl import (
    BtLossConfig,
    DistortionSpec,
    apply_distortions,
    barlow_twins_loss,
    bt_loss_and_gradient,
    bt_loss_gradient,
    cross_correlation,
    planted_factor_data,
    train_toy_encoder,
)
from prl.tiles import RasterImage


def test_loss_examples():
    assert barlow_twins_loss(np.eye(5))[0] == 0.0
    assert barlow_twins_loss(np.zeros((8, 8)), BtLossConfig(lambda_=0.005))[0] == 8.0


def test_cross_correlation_integer_oracle():
    A = np.array([[1, 2, 0], [3, 1, 1], [0, 4, 2], [2, 2, 5]], float)
    B = np.array([[2, 0, 1], [1, 1, 3], [4, 2, 0], [0, 3, 1]], float)
    np.testing.assert_allclose(cross_correlation(A, B), loop_cross_correlation(A.tolist(), B.tolist()), atol=1e-14)


def test_self_and_anti_correlation(rng):
    A = rng.normal(size=(400, 4))
    np.testing.assert_allclose(np.diag(cross_correlation(A, A)), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.diag(cross_correlation(A, -A)), -1.0, atol=1e-6)


def test_loss_matches_scalar_oracle(rng):
    for _ in range(20):
        C = rng.uniform(-1, 1, size=(5, 5))
        assert abs(barlow_twins_loss(C)[0] - loop_loss(C.tolist(), 0.005)) < 1e-12


def _fd_gradient(A, B, cfg, h=1e-5):
    gA, gB = np.zeros_like(A), np.zeros_like(B)
    for M, G in ((A, gA), (B, gB)):
        for idx in np.ndindex(*M.shape):
            old = M[idx]
            M[idx] = old + h
            up = bt_loss_and_gradient(A, B, cfg)[0]
            M[idx] = old - h
            down = bt_loss_and_gradient(A, B, cfg)[0]
            M[idx] = old
            G[idx] = (up - down) / (2 * h)
    return gA, gB


@pytest.mark.parametrize("n,d", [(4, 3), (8, 5), (6, 4)])
def test_gradient_matches_finite_differences(rng, n, d):
    cfg = BtLossConfig(lambda_=0.05)
    for _ in range(5):
        A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        _, dA, dB = bt_loss_and_gradient(A, B, cfg)
        fA, fB = _fd_gradient(A, B, cfg)
        for g, f in ((dA, fA), (dB, fB)):
            rel = np.abs(g - f) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(f)))
            assert rel.max() < 1e-4


def test_gradient_zero_at_minimum():
    # orthogonal +-1 columns: exactly decorrelated, unit variance
    H = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], float)
    Z = H[:, 1:]
    dA, dB = bt_loss_gradient(Z, Z.copy())
    assert np.linalg.norm(dA) < 1e-8 and np.linalg.norm(dB) < 1e-8


def test_column_scaling_gradient_orthogonal(rng):
    A, B = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    l0, dA, _ = bt_loss_and_gradient(A, B)
    A2 = A.copy()
    A2[:, 1] *= 10
    l1 = bt_loss_and_gradient(A2, B)[0]
    assert abs(l0 - l1) < 1e-9
    assert abs(np.dot(dA[:, 1], A[:, 1])) < 1e-6


@settings(max_examples=40, deadline=None)
@given(
    st.integers(4, 12),
    st.integers(2, 6),
    st.integers(0, 2**31 - 1),
    st.floats(0.1, 10.0),
)
def test_loss_invariances(n, d, seed, scale):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    cfg = BtLossConfig()
    loss = barlow_twins_loss(cross_correlation(A, B), cfg)
    assert loss[0] == pytest.approx(loss[1] + cfg.lambda_ * loss[2], abs=1e-12)
    perm = rng.permutation(d)
    assert barlow_twins_loss(cross_correlation(A[:, perm], B[:, perm]), cfg)[0] == pytest.approx(loss[0], abs=1e-10)
    shift = rng.normal(size=d)
    scaled = barlow_twins_loss(cross_correlation(A * scale + shift, B), cfg)[0]
    assert abs(scaled - loss[0]) < 1e-6


def test_precondition_errors():
    with pytest.raises(PreconditionError):
        cross_correlation(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(PreconditionError):
        cross_correlation(np.ones((4, 3)), np.ones((4, 2)))
    with pytest.raises(ValidationError):
        BtLossConfig(lambda_=0.0)
    with pytest.raises(ValidationError):
        DistortionSpec(zoom_range=(1.1, 1.2))


def _identity_spec(seed=0):
    return DistortionSpec((1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed=seed)


def test_identity_distortions(rng):
    tile = RasterImage(rng.integers(0, 256, (224, 224, 3), dtype=np.uint8))
    a, b = apply_distortions(tile, _identity_spec(), np.random.default_rng(0))
    np.testing.assert_array_equal(a.pixels, tile.pixels)
    np.testing.assert_array_equal(b.pixels, tile.pixels)


def test_distortions_deterministic_and_shape(rng):
    tile = RasterImage(rng.integers(0, 256, (224, 224, 3), dtype=np.uint8))
    spec = DistortionSpec()
    a1, b1 = apply_distortions(tile, spec, np.random.default_rng(3))
    a2, b2 = apply_distortions(tile, spec, np.random.default_rng(3))
    np.testing.assert_array_equal(a1.pixels, a2.pixels)
    np.testing.assert_array_equal(b1.pixels, b2.pixels)
    assert a1.pixels.shape == b1.pixels.shape == (224, 224, 3)


def test_toy_training_decorrelates():
    data = planted_factor_data(n=512, d=16, factors=4, seed=0)
    spec = DistortionSpec(noise_std=0.1)
    res = train_toy_encoder(data[:448], spec, epochs=60, out_dim=8, seed=0)
    trace = np.array(res.loss_trace)
    assert trace[-20:].mean() < trace[:20].mean()
    held = data[448:]
    rng = np.random.default_rng(1)
    from prl.ssl import distort_vectors

    C = cross_correlation(res.encoder.project(distort_vectors(held, spec, rng)), res.encoder.project(distort_vectors(held, spec, rng)))
    off = np.abs(C[~np.eye(8, dtype=bool)])
    assert off.mean() < 0.2


def test_toy_training_edge_cases():
    data = planted_factor_data(n=256, d=8, seed=0)
    res = train_toy_encoder(data, epochs=0, seed=4)
    np.testing.assert_array_equal(res.encoder.W1, res.initial.W1)
    assert res.loss_trace == []
    with pytest.raises(PreconditionError):
        train_toy_encoder(data, batch_size=1)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualnet import ssl
from dualnet.ssl import (
    AugmentConfig,
    augment,
    augment_pair,
    barlow_twins_loss,
    cross_correlation,
    random_resized_crop,
    simclr_loss,
)
from dualnet.tensor import Tensor, float64_mode
from oracles import barlow_twins_scalar, nt_xent_scalar


@given(st.integers(2, 8), st.integers(1, 8), st.integers(0, 2**31), st.booleans())
def test_barlow_twins_matches_scalar_loops(n, d, seed, center):
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    lam = float(rng.uniform(0, 1))
    with float64_mode():
        got = barlow_twins_loss(Tensor(za), Tensor(zb), lam, center).item()
    assert got == pytest.approx(barlow_twins_scalar(za, zb, lam, center), abs=1e-6)


def test_identity_correlation_gives_zero_loss():
    # orthogonal, zero-mean columns: C = I exactly
    z = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
    with float64_mode():
        c = cross_correlation(Tensor(z), Tensor(z)).data
        loss = barlow_twins_loss(Tensor(z), Tensor(z)).item()
    np.testing.assert_allclose(c, np.eye(2), atol=1e-12)
    assert loss < 1e-10


def test_barlow_twins_small_batch_and_zero_variance():
    with pytest.raises(ValueError):
        barlow_twins_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))
    with pytest.raises(ValueError):
        barlow_twins_loss(Tensor(np.ones((3, 3))), Tensor(np.ones((3, 2))))
    before = ssl.diagnostics["zero_variance_dims"]
    z = np.random.default_rng(0).normal(size=(4, 3))
    z[:, 1] = 2.0
    loss = barlow_twins_loss(Tensor(z), Tensor(z))
    assert np.isfinite(loss.item())
    assert ssl.diagnostics["zero_variance_dims"] > before


@given(st.integers(2, 5), st.integers(2, 6), st.floats(0.1, 2.0), st.integers(0, 2**31))
def test_simclr_matches_scalar_loops(n, d, t, seed):
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    with float64_mode():
        got = simclr_loss(Tensor(za), Tensor(zb), t).item()
    assert got == pytest.approx(nt_xent_scalar(za, zb, t), rel=1e-9)


def test_simclr_rejects_bad_input():
    with pytest.raises(ValueError):
        simclr_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))
    with pytest.raises(ValueError):
        simclr_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), 0.0)


# -------------------------------------------------------------- augmentation
def test_augment_pair_range_shape_and_determinism():
    imgs = np.random.default_rng(0).uniform(size=(6, 3, 32, 32)).astype(np.float32)
    a1, b1, src = augment_pair(imgs, np.random.default_rng(7))
    a2, b2, _ = augment_pair(imgs, np.random.default_rng(7))
    assert a1.shape == imgs.shape and a1.dtype == np.float32
    assert src is imgs
    assert a1.min() >= 0 and a1.max() <= 1
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)
    assert not np.array_equal(a1, b1)


def test_identity_config_is_a_no_op():
    imgs = np.random.default_rng(1).uniform(size=(3, 3, 32, 32))
    out = augment(imgs, np.random.default_rng(0), AugmentConfig.identity(), blur_p=0.0)
    np.testing.assert_allclose(out, imgs, atol=1e-12)


def test_full_crop_is_identity():
    imgs = np.random.default_rng(2).uniform(size=(2, 3, 16, 16))
    out = random_resized_crop(imgs, np.random.default_rng(0), 16, (1.0, 1.0), (1.0, 1.0))
    np.testing.assert_allclose(out, imgs, atol=1e-12)


def test_crop_flip_only_disables_colour_ops():
    cfg = AugmentConfig().crop_flip_only()
    assert cfg.jitter_p == cfg.grey_p == cfg.blur_p_a == cfg.blur_p_b == 0.0
    # a constant-colour image is invariant to crop and flip
    imgs = np.full((2, 3, 32, 32), 0.3)
    imgs[:, 1] = 0.7
    np.testing.assert_allclose(augment(imgs, np.random.default_rng(0), cfg, 0.0), imgs, atol=1e-12)


def test_greyscale_equalizes_channels():
    imgs = np.random.default_rng(3).uniform(size=(4, 3, 8, 8))
    out = ssl.random_greyscale(imgs, np.random.default_rng(0), p=1.0)
    np.testing.assert_allclose(out[:, 0], out[:, 2])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scibilic import numkernel as nk
from scibilic.rng import RngStream

from gradcheck import TOLERANCES, away_from_zero, numerical_grad, relative_error


def direct_conv(x, k, b, stride, padding):
    """Quadruple-loop direct sum in float64."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[fi])
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[ni, ci, i * stride + dy, j * stride + dx] * k[fi, ci, dy, dx]
                    out[ni, fi, i, j] = acc
    return out


# ---- conv2d -----------------------------------------------------------------

def test_identity_kernel_reproduces_input():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    out = nk.conv2d(x, k, np.zeros(1, np.float32), 1, 1)
    np.testing.assert_array_equal(out, x)


def test_zero_kernel_gives_bias():
    x = np.random.default_rng(1).standard_normal((1, 2, 4, 4)).astype(np.float32)
    out = nk.conv2d(x, np.zeros((3, 2, 3, 3), np.float32), np.array([0.5, -1.0, 2.0], np.float32), 1, 1)
    for f, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out[:, f] == np.float32(b))


def test_matches_direct_sum_oracle_float32():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
    k = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = nk.conv2d(x, k, b, 1, 1)
    ref = direct_conv(x, k, b, 1, 1)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("stride,padding,ksize", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1), (3, 2, 5)])
def test_matches_direct_sum_oracle_shapes(stride, padding, ksize):
    rng = np.random.default_rng(stride * 10 + padding + ksize)
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, ksize, ksize))
    b = rng.standard_normal(4)
    out = nk.conv2d(x, k, b, stride, padding)
    ref = direct_conv(x, k, b, stride, padding)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
    out32 = nk.conv2d(x.astype(np.float32), k.astype(np.float32), b.astype(np.float32), stride, padding)
    assert out32.dtype == np.float32
    np.testing.assert_allclose(out32, ref, rtol=1e-5, atol=1e-5 * np.abs(ref).max())


def test_output_extent_formula():
    x = np.zeros((1, 1, 9, 8), np.float32)
    out = nk.conv2d(x, np.zeros((1, 1, 3, 3), np.float32), np.zeros(1, np.float32), stride=2, padding=1)
    assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1)


def test_channel_mismatch_is_rejected():
    with pytest.raises(nk.ShapeError, match="channels"):
        nk.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_even_kernel_and_small_input_rejected():
    with pytest.raises(nk.ShapeError, match="odd"):
        nk.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(nk.ShapeError, match="smaller"):
        nk.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)), np.zeros(1), padding=1)


def test_conv_grad_zero_upstream():
    rng = np.random.default_rng(3)
    x, k, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    gx, gk, gb = nk.conv2d_grad(x, k, b, np.zeros((1, 3, 4, 4)), 1, 1)
    assert not gx.any() and not gk.any() and not gb.any()


def test_conv_grad_identity_kernel_passes_upstream():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 1, 4, 5))
    g = rng.standard_normal((2, 1, 4, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    gx, _, _ = nk.conv2d_grad(x, k, np.zeros(1), g, 1, 1)
    np.testing.assert_array_equal(gx, g)


def test_conv_grad_shape_mismatch():
    with pytest.raises(nk.ShapeError):
        nk.conv2d_grad(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), np.zeros((1, 1, 3, 3)), 1, 1)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("trial", range(4))
def test_conv_grad_finite_differences(dtype, trial):
    rng = np.random.default_rng(100 + trial)
    h, tol = TOLERANCES[dtype]
    stride = 1 + trial % 2
    x = rng.standard_normal((2, 2, 5, 4)).astype(dtype)
    k = rng.standard_normal((3, 2, 3, 3)).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    out = nk.conv2d(x, k, b, stride, 1)
    proj = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(nk.conv2d(x, k, b, stride, 1).astype(np.float64) * proj))

    gx, gk, gb = nk.conv2d_grad(x, k, b, proj.astype(dtype), stride, 1)
    for analytic, arr in ((gx, x), (gk, k), (gb, b)):
        assert relative_error(analytic, numerical_grad(f, arr, h)) < tol


# ---- fused upsample + conv ----------------------------------------------------

@pytest.mark.parametrize("factor,ksize", [(2, 5), (2, 3), (3, 5), (1, 3)])
def test_fused_upsample_conv_equals_composition(factor, ksize):
    rng = np.random.default_rng(factor * 7 + ksize)
    x = rng.standard_normal((2, 3, 4, 3))
    k = rng.standard_normal((2, 3, ksize, ksize))
    b = rng.standard_normal(2)
    ref_out, ref_cache = nk.conv2d_forward(nk.nearest_upsample(x, factor), k, b, 1, ksize // 2)
    out, cache = nk.upsample_conv2d_forward(x, k, b, factor)
    np.testing.assert_allclose(out, ref_out, rtol=1e-12, atol=1e-12)
    g = rng.standard_normal(out.shape)
    rgx, rgk, rgb = nk.conv2d_backward(ref_cache, g)
    gx, gk, gb = nk.upsample_conv2d_backward(cache, g)
    np.testing.assert_allclose(gx, nk.nearest_upsample_grad(rgx, factor), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gk, rgk, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gb, rgb, rtol=1e-12, atol=1e-12)


# ---- nearest_upsample -----------------------------------------------------------

def test_upsample_factor_one_is_identity():
    x = np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3)
    np.testing.assert_array_equal(nk.nearest_upsample(x, 1), x)


def test_upsample_pair():
    x = np.array([[[[1.0, 2.0]]]])
    out = nk.nearest_upsample(x, 2)
    np.testing.assert_array_equal(out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


def test_upsample_definition():
    x = np.random.default_rng(5).standard_normal((2, 3, 3, 4))
    out = nk.nearest_upsample(x, 3)
    i, j = np.meshgrid(np.arange(9), np.arange(12), indexing="ij")
    np.testing.assert_array_equal(out, x[:, :, i // 3, j // 3])


def test_upsample_gradient_of_ones_is_factor_squared():
    x = np.random.default_rng(6).standard_normal((1, 2, 3, 3))

    def f():
        return float(nk.nearest_upsample(x, 2).sum())

    num = numerical_grad(f, x, 1e-5)
    np.testing.assert_allclose(num, 4.0, rtol=1e-6)
    np.testing.assert_array_equal(nk.nearest_upsample_grad(np.ones((1, 2, 6, 6)), 2), 4.0)


def test_upsample_rejects_bad_factor():
    with pytest.raises(nk.ShapeError):
        nk.nearest_upsample(np.zeros((1, 1, 2, 2)), 0)


# ---- spatial_dropout ---------------------------------------------------------------

@pytest.mark.parametrize("mode", ["train", "mc_sample", "off"])
def test_dropout_p_zero_is_identity(mode):
    x = np.random.default_rng(7).standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(nk.spatial_dropout(x, 0.0, mode, RngStream(1)), x)


def test_dropout_off_is_identity():
    x = np.random.default_rng(8).standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(nk.spatial_dropout(x, 0.5, "off", None), x)


def test_dropout_whole_channels_and_rate():
    x = np.random.default_rng(9).uniform(0.5, 1.5, size=(100, 100, 2, 2)).astype(np.float32)
    zeroed = 0
    total = 0
    root = RngStream(42)
    for trial in range(100):
        out = nk.spatial_dropout(x, 0.5, "train", root.child(trial))
        zero = (out == 0).all(axis=(2, 3))
        doubled = np.isclose(out, 2 * x).all(axis=(2, 3))
        assert np.all(zero | doubled)
        zeroed += int(zero.sum())
        total += zero.size
    # 10,000 channels per trial x 100 trials
    assert abs(zeroed / total - 0.5) < 0.02


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        nk.spatial_dropout(np.zeros((1, 1, 2, 2)), 1.0, "train", RngStream(0))


def test_dropout_replays_bit_exactly():
    x = np.random.default_rng(10).standard_normal((4, 8, 3, 3)).astype(np.float32)
    a = nk.spatial_dropout(x, 0.3, "mc_sample", RngStream(5, (1, 2)))
    b = nk.spatial_dropout(x, 0.3, "mc_sample", RngStream(5).child(1, 2))
    np.testing.assert_array_equal(a, b)


# ---- relu / concat -----------------------------------------------------------------

def test_relu_cases():
    assert not nk.relu(-np.ones((2, 3))).any()
    x = np.abs(np.random.default_rng(11).standard_normal((3, 3))) + 0.1
    np.testing.assert_array_equal(nk.relu(x), x)
    np.testing.assert_array_equal(nk.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(nk.relu_grad(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_concat_identity_and_order():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(nk.concat_channels(x, np.zeros((2, 0, 4, 4))), x)
    a, b = rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 2, 2))
    out = nk.concat_channels(a, b)
    np.testing.assert_array_equal(out[:, 0], a[:, 0])
    np.testing.assert_array_equal(out[:, 1], b[:, 0])


def test_concat_spatial_mismatch():
    with pytest.raises(nk.ShapeError):
        nk.concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_concat_gradient_split():
    rng = np.random.default_rng(13)
    a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))
    proj = rng.standard_normal((2, 5, 3, 3))
    ga, gb = nk.concat_channels_grad(proj, 2)
    assert ga.shape == a.shape and gb.shape == b.shape

    def f():
        return float(np.sum(nk.concat_channels(a, b) * proj))

    assert relative_error(ga, numerical_grad(f, a, 1e-5)) < 1e-8
    assert relative_error(gb, numerical_grad(f, b, 1e-5)) < 1e-8


# ---- properties ----------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), h=st.integers(3, 6), w=st.integers(3, 6),
       stride=st.integers(1, 2), seed=st.integers(0, 2**16))
def test_conv_matches_oracle_property(n, c, f, h, w, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w))
    k = rng.standard_normal((f, c, 3, 3))
    b = rng.standard_normal(f)
    np.testing.assert_allclose(nk.conv2d(x, k, b, stride, 1), direct_conv(x, k, b, stride, 1), rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), p=st.floats(0.0, 0.9))
def test_ops_are_finite_on_finite_input(seed, p):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, (2, 2, 4, 4), np.float32)
    k = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    out = nk.spatial_dropout(nk.relu(nk.conv2d(x, k, np.zeros(2, np.float32), 1, 1)), p, "train", RngStream(seed))
    assert np.isfinite(out).all()
    assert np.isfinite(nk.nearest_upsample(out, 2)).all()

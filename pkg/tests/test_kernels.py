import numpy as np
import pytest

from srisp import kernels
from srisp.kernels import conv2d_backward, conv2d_forward, same_padding


def _have_cython():
    try:
        kernels.get_backend("cython")
        return True
    except ImportError:
        return False


def test_same_padding_out_size():
    out, lo, hi = same_padding(5, 3, 1)
    assert (out, lo + hi) == (5, 2)
    out, lo, hi = same_padding(5, 3, 2)
    assert out == 3  # ceil(5/2)
    out, lo, hi = same_padding(6, 1, 2)
    assert (out, lo, hi) == (3, 0, 0)


def test_forward_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 7, 2)).astype(np.float32)
    w = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = conv2d_forward(x, w, b, stride=1)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    expected = np.empty_like(out)
    for i in range(6):
        for j in range(7):
            patch = xp[i : i + 3, j : j + 3]
            expected[i, j] = np.tensordot(patch, w, axes=3) + b
    np.testing.assert_allclose(out, expected, atol=1e-5)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3])
def test_backend_parity(stride, k):
    if not _have_cython():
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(1)
    x = rng.standard_normal((9, 8, 3)).astype(np.float32)
    w = rng.standard_normal((k, k, 3, 5)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    out_c = conv2d_forward(x, w, b, stride=stride, backend="cython")
    out_n = conv2d_forward(x, w, b, stride=stride, backend="numpy")
    np.testing.assert_allclose(out_c, out_n, atol=1e-5)
    gy = rng.standard_normal(out_c.shape).astype(np.float32)
    gx_c, gw_c, gb_c = conv2d_backward(x, w, stride, gy, backend="cython")
    gx_n, gw_n, gb_n = conv2d_backward(x, w, stride, gy, backend="numpy")
    np.testing.assert_allclose(gx_c, gx_n, atol=1e-4)
    np.testing.assert_allclose(gw_c, gw_n, atol=1e-4)
    np.testing.assert_allclose(gb_c, gb_n, atol=1e-4)


def test_backward_is_adjoint():
    # the conv is linear in x, so <conv(x), gy> == <x, grad_x> for any x
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    out = conv2d_forward(x, w, np.zeros(3), stride=2)
    gy = rng.standard_normal(out.shape)
    gx, gw, gb = conv2d_backward(x, w, 2, gy)
    x2 = rng.standard_normal(x.shape)
    out2 = conv2d_forward(x2, w, np.zeros(3), stride=2)
    assert float((out2 * gy).sum()) == pytest.approx(float((x2 * gx).sum()), rel=1e-8)
    np.testing.assert_allclose(gb, gy.sum(axis=(0, 1)), rtol=1e-8)


def test_non_float32_routes_to_numpy():
    x = np.ones((4, 4, 1), dtype=np.float64)
    w = np.ones((1, 1, 1, 1), dtype=np.float64)
    out = conv2d_forward(x, w, np.zeros(1), stride=1)
    assert out.dtype == np.float64


def test_backend_lookup():
    assert kernels.get_backend("numpy").BACKEND_NAME == "numpy"
    assert kernels.BACKEND_NAME in ("numpy", "cython")
    with pytest.raises(ValueError):
        kernels.get_backend("nonsense")

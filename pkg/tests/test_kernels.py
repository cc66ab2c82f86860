import os
import subprocess
import sys

import numpy as np
import pytest

from cadit import _kernels as K

SHAPES = [
    ((4, 1, 16, 16), (8, 1, 3, 3), 2),
    ((4, 8, 8, 8), (16, 8, 3, 3), 2),
    ((3, 5, 7, 7), (2, 5, 3, 3), 1),
    ((2, 3, 6, 5), (4, 3, 5, 5), 2),
]


def both(fn):
    with K.use_backend("numpy"):
        a = fn()
    with K.use_backend("numba"):
        b = fn()
    return a, b


@pytest.mark.parametrize("xs,ws,stride", SHAPES)
def test_backends_agree(xs, ws, stride):
    rng = np.random.default_rng(sum(xs))
    x, w = rng.normal(size=xs), rng.normal(size=ws)
    pad = (ws[2] - 1) // 2
    (o1, c1), (o2, c2) = both(lambda: K.conv2d(x, w, stride, pad))
    np.testing.assert_allclose(o1, o2, rtol=1e-13, atol=1e-13)
    np.testing.assert_array_equal(c1, c2)
    gy = rng.normal(size=o1.shape)
    g1, g2 = both(lambda: K.conv2d_grad_input(gy, w, stride, pad, xs[2], xs[3]))
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-12)
    d1, d2 = both(lambda: K.pairwise_sq_dist(x.reshape(xs[0], -1)))
    np.testing.assert_allclose(d1, d2, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("xs,ws,stride", SHAPES)
@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_col2im_is_adjoint_of_im2col(xs, ws, stride, backend):
    rng = np.random.default_rng(7)
    k = ws[2]
    pad = (k - 1) // 2
    x = rng.normal(size=xs)
    with K.use_backend(backend):
        cols, _, _ = K.im2col(x, k, stride, pad)
        r = rng.normal(size=cols.shape)
        back = K.col2im(r, *xs, k, stride, pad)
    assert abs(np.vdot(cols, r) - np.vdot(x, back)) <= 1e-10 * max(1.0, abs(np.vdot(cols, r)))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    for backend in ("numpy", "numba"):
        with K.use_backend(backend):
            np.testing.assert_allclose(K.conv2d(x, w, 2, 1)[0], ref, rtol=1e-12, atol=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        K.set_backend("fortran")


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba"), ("", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, CADIT_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from cadit import _kernels; print(_kernels.get_backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected

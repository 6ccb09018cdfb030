"""Analytic backward passes vs the central finite-difference oracle.

All checks run in float64 shadow mode with h=1e-4 and require max
relative error < 1e-5, on inputs kept away from kink points.
"""

import numpy as np
import pytest

from prrm import ops
from prrm.rng import Rng
from prrm.tensor import Tensor

from gradcheck import away_from_zero, check_grad, distinct_pool_input, rel_error

TOL = 1e-5


@pytest.mark.parametrize("case", range(6))
def test_conv2d_gradients(case):
    rng = Rng(1000 + case)
    n = 1 + rng.below(2)
    cin = 1 + rng.below(2)
    cout = 1 + rng.below(3)
    k = 1 + rng.below(3)
    stride = 1 + rng.below(2)
    pad = rng.below(2)
    h = k + 1 + rng.below(5)
    w = k + 1 + rng.below(5)
    x = rng.uniform(-1, 1, (n, cin, h, w)).astype(np.float64)
    wt = rng.uniform(-1, 1, (cout, cin, k, k)).astype(np.float64)
    b = rng.uniform(-1, 1, (cout,)).astype(np.float64)
    out = ops.conv2d_forward(Tensor(x), Tensor(wt), Tensor(b), stride, pad)
    r = rng.uniform(-1, 1, out.shape).astype(np.float64)

    gx, gw, gb = ops.conv2d_backward(Tensor(x), Tensor(wt), Tensor(r), stride, pad)
    fx = lambda t: float((ops.conv2d_forward(t, Tensor(wt), Tensor(b), stride, pad).data * r).sum())
    fw = lambda t: float((ops.conv2d_forward(Tensor(x), t, Tensor(b), stride, pad).data * r).sum())
    fb = lambda t: float((ops.conv2d_forward(Tensor(x), Tensor(wt), t, stride, pad).data * r).sum())
    assert check_grad(fx, x, gx.data) < TOL
    assert check_grad(fw, wt, gw.data) < TOL
    assert check_grad(fb, b, gb.data) < TOL


@pytest.mark.parametrize("case", range(3))
def test_bn_train_gradients(case):
    rng = Rng(2000 + case)
    shape = (3, 2, 4, 4)
    x = rng.uniform(-1, 1, shape).astype(np.float64)
    gamma = rng.uniform(0.5, 1.5, (2,)).astype(np.float64)
    beta = rng.uniform(-0.5, 0.5, (2,)).astype(np.float64)
    eps = 1e-5
    y, _, _, cache = ops.bn_train_core(x, gamma, beta, eps)
    r = rng.uniform(-1, 1, shape).astype(np.float64)
    gx, ggamma, gbeta = ops.bn_train_backward(cache, r)

    fx = lambda t: float((ops.bn_train_core(t.data, gamma, beta, eps)[0] * r).sum())
    fg = lambda t: float((ops.bn_train_core(x, t.data, beta, eps)[0] * r).sum())
    fb = lambda t: float((ops.bn_train_core(x, gamma, t.data, eps)[0] * r).sum())
    assert check_grad(fx, x, gx) < TOL
    assert check_grad(fg, gamma, ggamma) < TOL
    assert check_grad(fb, beta, gbeta) < TOL


def test_relu_gradient():
    rng = Rng(3000)
    x = away_from_zero(rng, (2, 3, 4, 4))
    r = rng.uniform(-1, 1, x.shape).astype(np.float64)
    g = ops.relu_backward(Tensor(x), Tensor(r))
    f = lambda t: float((ops.relu_forward(t).data * r).sum())
    assert check_grad(f, x, g.data) < TOL


def test_maxpool_gradient():
    rng = Rng(3100)
    x = distinct_pool_input(rng, (2, 2, 4, 4))
    r = rng.uniform(-1, 1, (2, 2, 2, 2)).astype(np.float64)
    g = ops.maxpool2_backward(Tensor(x), Tensor(r))
    f = lambda t: float((ops.maxpool2_forward(t).data * r).sum())
    assert check_grad(f, x, g.data) < TOL


def test_upsample_gradient():
    rng = Rng(3200)
    x = rng.uniform(-1, 1, (2, 3, 3, 3)).astype(np.float64)
    r = rng.uniform(-1, 1, (2, 3, 6, 6)).astype(np.float64)
    g = ops.upsample_nearest2_backward(Tensor(x), Tensor(r))
    f = lambda t: float((ops.upsample_nearest2_forward(t).data * r).sum())
    assert check_grad(f, x, g.data) < TOL


def test_global_avg_pool_gradient():
    rng = Rng(3300)
    x = rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float64)
    r = rng.uniform(-1, 1, (2, 3, 1, 1)).astype(np.float64)
    g = ops.global_avg_pool_backward(Tensor(x), Tensor(r))
    f = lambda t: float((ops.global_avg_pool_forward(t).data * r).sum())
    assert check_grad(f, x, g.data) < TOL


def test_concat_gradient():
    rng = Rng(3400)
    a = rng.uniform(-1, 1, (1, 2, 3, 3)).astype(np.float64)
    b = rng.uniform(-1, 1, (1, 3, 3, 3)).astype(np.float64)
    r = rng.uniform(-1, 1, (1, 5, 3, 3)).astype(np.float64)
    ga, gb = ops.concat_channels_backward(Tensor(r), [2, 3])
    fa = lambda t: float((ops.concat_channels_forward([t, Tensor(b)]).data * r).sum())
    fb = lambda t: float((ops.concat_channels_forward([Tensor(a), t]).data * r).sum())
    assert check_grad(fa, a, ga.data) < TOL
    assert check_grad(fb, b, gb.data) < TOL


def test_add_gradient():
    rng = Rng(3500)
    a = rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float64)
    b = rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float64)
    r = rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float64)
    ga, gb = ops.add_backward(Tensor(r))
    fa = lambda t: float((ops.add_forward(t, Tensor(b)).data * r).sum())
    assert check_grad(fa, a, ga.data) < TOL
    assert rel_error(gb.data, r) == 0.0

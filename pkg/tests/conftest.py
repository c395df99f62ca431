"""Shared test oracles.

``check_gradients`` compares every reverse-mode gradient against central
finite differences on a float64 graph.  ``conv_oracle`` is a direct
summation reference for the convolution layer, deliberately written as
plain loops so it shares no code with the implementation under test.
"""
import numpy as np
import pytest

from eegitnet.tensor import Tensor, no_grad

FD_STEP = 1e-5
FD_TOL = 1e-3


def _scalar_value(graph_fn, arrays):
    with no_grad():
        out = graph_fn([Tensor(a, dtype=np.float64) for a in arrays])
    return float(out.data.reshape(()))


def numeric_grad(graph_fn, arrays, index, h=FD_STEP):
    """Central-difference gradient of the scalar graph w.r.t. arrays[index]."""
    work = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(work[index])
    flat_in = work[index].reshape(-1)
    flat_out = grad.reshape(-1)
    for i in range(flat_in.size):
        orig = flat_in[i]
        flat_in[i] = orig + h
        hi = _scalar_value(graph_fn, work)
        flat_in[i] = orig - h
        lo = _scalar_value(graph_fn, work)
        flat_in[i] = orig
        flat_out[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradients(graph_fn, arrays, tol=FD_TOL, h=FD_STEP):
    """Assert autodiff and finite-difference gradients agree elementwise.

    ``graph_fn`` maps a list of Tensors to a scalar Tensor and must be
    deterministic (re-seed any randomness inside).  Relative error uses
    max(|a|, |b|, 1e-4) as the scale so zero gradients compare absolutely.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = graph_fn(leaves)
    assert out.data.size == 1, "gradient check target must be scalar"
    out.backward()
    worst = 0.0
    for k, leaf in enumerate(leaves):
        fd = numeric_grad(graph_fn, arrays, k, h)
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(fd)
        scale = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-4)
        rel = np.abs(ad - fd) / scale
        worst = max(worst, float(rel.max()))
        assert rel.max() < tol, (
            f"input {k}: max rel err {rel.max():.3e} at {np.unravel_index(rel.argmax(), rel.shape)}")
    return worst


def conv_oracle(x, w, pad_elec=(0, 0), pad_time=(0, 0), dilation=1, depthwise=False):
    """Reference convolution: explicit loops, correlation order, zero padding."""
    xp = np.pad(np.asarray(x, dtype=np.float64),
                ((0, 0), (0, 0), pad_elec, pad_time))
    n, c, h, t = xp.shape
    _, _, kh, kw = w.shape
    ho = h - (kh - 1)
    to = t - (kw - 1) * dilation
    if depthwise:
        out = np.zeros((n, c, ho, to))
        for ni in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(to):
                        s = 0.0
                        for a in range(kh):
                            for b in range(kw):
                                s += w[ci, 0, a, b] * xp[ni, ci, i + a, j + b * dilation]
                        out[ni, ci, i, j] = s
        return out
    f = w.shape[0]
    out = np.zeros((n, f, ho, to))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(to):
                    s = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                s += w[fi, ci, a, b] * xp[ni, ci, i + a, j + b * dilation]
                    out[ni, fi, i, j] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

"""Shared test oracles: finite differences and a naive convolution loop."""

import numpy as np

from layerview.tensor import Tensor


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at float64 array x."""
    assert x.dtype == np.float64
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-6)
    return np.abs(analytic - numeric).max() / scale


def check_gradient(build, x0, tol=1e-4, h=1e-5):
    """Compare backward() against central differences.

    build: ndarray -> scalar Tensor (the graph under test). x0 must be
    float64; a fixed random projection makes the scalar sensitive to every
    output element.
    """
    x0 = np.asarray(x0, dtype=np.float64)

    def scalar(arr):
        return float(build(Tensor(arr.copy())).data)

    leaf = Tensor(x0.copy(), requires_grad=True)
    out = build(leaf)
    out.backward()
    err = rel_error(leaf.grad, numeric_grad(scalar, x0.copy(), h=h))
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
    return err


def weighted_sum(t, seed=0):
    """Deterministic random projection of a tensor to a scalar."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal(t.shape).astype(t.dtype.type if hasattr(t.dtype, "type") else t.dtype))
    return (t * w).sum()


def naive_conv2d(x, w, b=None, stride=1, padding=1):
    """Direct 6-nested-loop convolution used as the conv oracle."""
    n_b, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n_b, c_out, ho, wo), dtype=np.float64)
    for n in range(n_b):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                yi = i * stride + ki - padding
                                xj = j * stride + kj - padding
                                if 0 <= yi < h and 0 <= xj < wd:
                                    acc += float(x[n, ci, yi, xj]) * float(w[co, ci, ki, kj])
                    out[n, co, i, j] = acc
    return out

"""Central finite-difference gradient checks."""

import numpy as np

from orientdetr import tensor as T

STEP = 1e-6


def numeric_grad(f, arrays, which, step=STEP):
    x = arrays[which]
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        hi = f(*arrays)
        x[idx] = old - step
        lo = f(*arrays)
        x[idx] = old
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn, *arrays, seed=0, step=STEP):
    """Largest relative error between autodiff and finite differences.

    ``fn`` maps tensors to a tensor; it is contracted against a fixed random
    weight so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    weight = np.random.default_rng(seed).normal(size=out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(fn(*[T.Tensor(a) for a in arrs]).data * weight))

    params = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    (fn(*params) * weight).sum().backward()
    worst = 0.0
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numeric_grad(scalar, arrays, i, step)))
    return worst

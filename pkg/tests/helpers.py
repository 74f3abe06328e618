"""Gradient checking shared by several test modules."""
import numpy as np

from fpgan import ops
from fpgan.tensor import Tensor, backward
from oracles import rel_err


def grad_check(f, arrays, wrt, eps=1e-4, seed=0):
    """Relative error between backward and central differences for ``arrays[wrt]``.

    The scalar checked is ``sum(f(*tensors) * R)`` for a fixed random ``R``
    so every output element contributes with a distinct weight.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = f(*[Tensor(a) for a in arrays])
    r = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(arrs):
        out = f(*[Tensor(a) for a in arrs])
        return float((out.data * r).sum())

    ts = [Tensor(a.copy(), requires_grad=(i == wrt)) for i, a in enumerate(arrays)]
    out = f(*ts)
    backward(ops.sum(ops.mul(out, Tensor(r))))
    analytic = ts[wrt].grad
    numeric = np.zeros_like(arrays[wrt])
    flat = numeric.reshape(-1)
    for i in range(arrays[wrt].size):
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[wrt].reshape(-1)[i] += eps
        minus[wrt].reshape(-1)[i] -= eps
        flat[i] = (scalar(plus) - scalar(minus)) / (2 * eps)
    return rel_err(analytic, numeric)

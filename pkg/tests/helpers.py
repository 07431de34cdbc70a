"""Shared test oracles.

central_difference_grads is the independent gradient check: it knows
nothing about the backward rules and just perturbs raw parameter
storage one entry at a time.
"""

import numpy as np


def central_difference_grads(func, tensors, h=1e-5):
    """Finite-difference gradients of a scalar-valued recomputation.

    func must rebuild the loss from the tensors' current .data and
    return a scalar Tensor. Returns one gradient array per tensor.
    """
    grads = []
    for t in tensors:
        flat = t.data.ravel()
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = func().item()
            flat[i] = orig - h
            fm = func().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def max_rel_err(got, want, floor=1e-6):
    """Infinity-norm relative error with an absolute floor to avoid
    dividing by a vanishing reference gradient.
    """
    got, want = np.asarray(got), np.asarray(want)
    return np.abs(got - want).max() / max(np.abs(want).max(), floor)

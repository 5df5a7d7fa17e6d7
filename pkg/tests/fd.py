"""Central finite-difference gradient oracle used across the test suite."""

import numpy as np

from matxfer import autodiff as ad


def fd_gradient(fn, tensors, index, h=1e-6):
    """d fn / d tensors[index] by central differences, elementwise."""
    t = tensors[index]
    base = t.data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        hi = fn(tensors).item()
        flat[i] = orig - step
        lo = fn(tensors).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def check_grads(fn, tensors, rel_tol=1e-5, h=1e-6):
    """Compare analytic gradients of scalar ``fn(tensors)`` against central FD.

    Returns the worst relative error seen.  Relative error for an element is
    |analytic - fd| / max(1, |fd|).
    """
    for t in tensors:
        t.zero_grad()
    loss = fn(tensors)
    ad.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = fd_gradient(fn, tensors, i, h=h)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = max(worst, float(err.max()))
        assert err.max() <= rel_tol, (
            f"gradient mismatch on input {i} (op {loss._op}): "
            f"rel err {err.max():.3g} > {rel_tol:.3g}"
        )
    return worst

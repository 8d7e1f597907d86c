"""Central finite-difference gradient checking.

The numeric side only ever calls the forward path (no tape), so it stays an
independent oracle for the backward rules.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(fn, tensors, index: int, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn(*tensors)`` w.r.t. one input.

    ``fn`` must return a scalar Tensor and must not depend on hidden mutable
    state (re-create batchnorm running stats inside ``fn`` if needed).
    """
    x = tensors[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(*tensors).item()
        flat[i] = orig - h
        lo = fn(*tensors).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(fn, tensors, h: float = 1e-5) -> float:
    """Worst relative disagreement between tape and numeric gradients.

    Per input tensor, the error is ``max|g - fd| / max(max|g|, max|fd|, 1e-12)``
    so a uniformly tiny gradient does not blow the ratio up.
    """
    for t in tensors:
        t._track()
        t.zero_grad()
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        fd = numeric_gradient(fn, tensors, i, h=h)
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = max(np.abs(g).max(), np.abs(fd).max(), 1e-12)
        worst = max(worst, float(np.abs(g - fd).max() / denom))
    return worst

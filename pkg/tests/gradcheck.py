"""Shared finite-difference oracle for gradient tests.

Central differences with step 1e-5 in float64. The forward callable is
re-evaluated with parameters perturbed in place, so parameter Tensors
must wrap the same ndarray objects the test mutates.
"""

import numpy as np

from ctsseg.tensor import Tape

FD_STEP = 1e-5
FD_TOL = 1e-4


def fd_max_rel_error(forward, param_tensors, step=FD_STEP) -> float:
    """Worst relative error between tape gradients and central differences.

    forward() must build a fresh scalar-loss Tensor from `param_tensors`.
    """
    with Tape() as tape:
        loss = forward()
        tape.backward(loss)
    worst = 0.0
    for t in param_tensors:
        assert t.grad is not None, "parameter missed by backward()"
        analytic = t.grad.copy()
        flat = t.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(forward().data)
            flat[i] = orig - step
            lo = float(forward().data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
        numeric = numeric.reshape(analytic.shape)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float((np.abs(analytic - numeric) / scale).max()))
    return worst

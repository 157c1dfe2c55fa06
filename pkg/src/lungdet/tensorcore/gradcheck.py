from __future__ import annotations

import numpy as np


def grad_check(fn, inputs, eps: float = 1e-5, max_entries: int | None = None, rng=None,
               return_details: bool = False, refine: int = 0, kink_tol: float = 1e-3):
    """Compare analytic gradients of scalar ``fn()`` against central differences.

    ``inputs`` are tensors whose ``.data`` is perturbed in place; ``fn`` is called
    with no arguments and must be deterministic.  Every entry is checked unless
    ``max_entries`` is given, in which case that many entries per tensor are
    drawn with ``rng``.  Returns the max relative error
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    With ``refine > 0`` an entry whose forward and backward one-sided
    quotients disagree by more than ``kink_tol`` (relative) is re-measured
    with the step divided by 10, up to ``refine`` times.  Such a disagreement
    means a non-differentiable point lies within the step, where the central
    difference does not estimate the derivative.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs 64-bit tensors")
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar function")
    f0 = float(out.data)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    details = []
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = np.random.default_rng(0) if rng is None else rng
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[ti].reshape(-1)
        for i in idx:
            orig = flat[i]
            h = eps
            for attempt in range(refine + 1):
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) <= kink_tol * max(abs(fwd), abs(bwd), 1e-8):
                    break
                if attempt < refine:
                    h /= 10
            num = (fp - fm) / (2 * h)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if return_details:
                details.append((ti, int(i), a, num, err))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    if return_details:
        return worst, details
    return worst

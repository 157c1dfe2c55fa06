from __future__ import annotations

import numpy as np

from .tensor import StateError


def sgd_step(params, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """Momentum SGD: ``v <- mu*v + g + wd*p``, ``p <- p - lr*v``; gradients are cleared."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {getattr(p, 'name', '') or p!r} has no gradient")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity *= momentum
        p.velocity += g
        p.data -= (lr * p.velocity).astype(p.data.dtype, copy=False)
        p.grad = None

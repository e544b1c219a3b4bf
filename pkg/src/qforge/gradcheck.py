"""Central finite-difference checking of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(f, t: Tensor, indices=None, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued ``f()`` w.r.t. ``t.data``.

    Perturbs ``t.data`` in place and restores it. When ``indices`` is given
    (flat positions), only those entries are evaluated and the rest stay 0.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    idxs = range(flat.size) if indices is None else indices
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f())
        flat[i] = orig - step
        lo = float(f())
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(t.shape)


def check_gradients(
    loss_fn,
    params: list,
    rng: np.random.Generator,
    max_per_param: int = 8,
    step: float = 1e-5,
    atol: float = 1e-8,
) -> float:
    """Compare analytic and numerical gradients for named parameters.

    ``loss_fn()`` must rebuild the forward graph from the current parameter
    values and return a scalar Tensor. Returns the worst relative error over
    a random subsample of entries per parameter; entries whose absolute
    disagreement is below ``atol`` count as exact (they are dominated by
    finite-difference roundoff when the true gradient is ~0).
    """
    for _, p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for name, p in params:
        if p.grad is None:
            raise AssertionError(f"no gradient reached parameter {name!r}")
        n = p.size
        idxs = (
            range(n)
            if n <= max_per_param
            else sorted(rng.choice(n, size=max_per_param, replace=False).tolist())
        )
        num = numerical_grad(lambda: loss_fn().item(), p, indices=idxs, step=step)
        ana = p.grad.reshape(-1)
        numf = num.reshape(-1)
        for i in idxs:
            diff = abs(ana[i] - numf[i])
            if diff < atol:
                continue
            denom = max(abs(ana[i]), abs(numf[i]), 1e-8)
            worst = max(worst, diff / denom)
    return worst

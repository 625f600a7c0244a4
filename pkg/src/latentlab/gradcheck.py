"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    grad_of: Tensor | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``f`` must be scalar-valued. Each checked coordinate i compares the
    reverse-mode gradient against (f(x + eps e_i) - f(x - eps e_i)) / 2eps,
    with relative error |a - b| / max(1, |a|, |b|). If ``sample`` is given,
    only that many randomly chosen coordinates are differenced (full
    finite differencing on large parameter tensors is quadratic-cost).

    ``grad_of`` names the tensor whose accumulated gradient is the analytic
    side; it defaults to the perturbed input. Use it when ``f`` copies the
    input's values into a model parameter: the graph then reaches that
    parameter, not the fresh input tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = Tensor(np.array(x.data, copy=True), requires_grad=True)
    source = grad_of if grad_of is not None else x
    source.grad = None
    out = f(x)
    if out.shape != ():
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    backward(out)
    analytic = np.zeros_like(x.data) if source.grad is None else source.grad.copy()
    if analytic.shape != x.data.shape:
        raise ValueError("grad_of tensor shape does not match the perturbed input")

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=sample, replace=False)
    else:
        coords = np.arange(n)

    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(Tensor(x.data)).data)
        flat[i] = orig - eps
        f_minus = float(f(Tensor(x.data)).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic_flat[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst

"""Central finite-difference gradient checking (64-bit)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, no_grad


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
    params: Sequence[Parameter] = (),
) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps float64 tensors to a tensor; a fixed random projection reduces
    its output to a scalar so every Jacobian entry contributes. The error for
    one element is ``|a - n| / (|a| + 1e-12)``.

    ``params`` are float64 parameters captured by ``fn`` (layer weights); they
    are checked too, perturbed in place and restored afterwards.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {p.name} is {p.data.dtype}")
        p.grad = None
    rng = np.random.default_rng(seed)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()

    def scalar():
        with no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    targets = [(arrays[i], leaves[i].grad) for i in wrt]
    targets += [(p.data, p.grad) for p in params]
    worst = 0.0
    for base, analytic in targets:
        if analytic is None:
            analytic = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + step
            f_plus = scalar()
            base[idx] = orig - step
            f_minus = scalar()
            base[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / (abs(a) + 1e-12))
    for p in params:
        p.grad = None
    return worst

"""Central finite-difference validation of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class GradcheckError(ArithmeticError):
    """A non-finite value showed up while checking gradients."""

    def __init__(self, message, input_index=None, coord=None):
        super().__init__(message)
        self.input_index = input_index
        self.coord = coord


def _scalar(out, proj):
    if proj is None:
        return out.sum()
    return (out * Tensor(proj, dtype=out.dtype)).sum()


def gradcheck(fn, inputs, step=1e-5, seed=0, floor=1e-3, wrt=None):
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are reduced with a fixed
    random projection so every output entry contributes. Per coordinate the
    error is ``|a - n| / max(|a|, |n|, floor)``. ``wrt`` restricts the check to
    a subset of input indices (others are held constant).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    rng = np.random.default_rng(seed)

    probe = fn(*[Tensor(a) for a in arrays])
    proj = None if probe.data.size == 1 else rng.uniform(0.5, 1.5, size=probe.shape)

    def value(arrs):
        v = float(_scalar(fn(*[Tensor(a) for a in arrs]), proj).data)
        return v

    leaves = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = _scalar(fn(*leaves), proj)
    if not np.isfinite(out.data):
        raise GradcheckError("non-finite forward value")
    out.backward()

    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        base = arrays[i]
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + step
            fp = value(arrays)
            base[idx] = orig - step
            fm = value(arrays)
            base[idx] = orig
            num = (fp - fm) / (2.0 * step)
            a = float(analytic[idx])
            if not (np.isfinite(num) and np.isfinite(a)):
                raise GradcheckError(f"non-finite gradient at input {i}, coordinate {idx}",
                                     input_index=i, coord=idx)
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst

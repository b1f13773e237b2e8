"""Central finite-difference checking of tape gradients (64-bit)."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index: tuple, h: float) -> float:
    old = t.data[index]
    step = h * max(1.0, abs(float(old)))
    t.data[index] = old + step
    fp = float(fn().data)
    t.data[index] = old - step
    fm = float(fn().data)
    t.data[index] = old
    return (fp - fm) / (2.0 * step)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    samples: Optional[int] = None, h: float = 1e-5,
                    rng: Optional[np.random.Generator] = None,
                    floor: float = 1e-7) -> float:
    """Return the max relative error between tape and central-difference gradients.

    ``fn`` must rebuild the scalar loss from the current contents of
    ``tensors`` on every call.  When ``samples`` is given, only that many
    randomly chosen entries of each tensor are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = np.arange(t.data.size)
        if samples is not None and samples < t.data.size:
            flat = rng.choice(t.data.size, size=samples, replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), t.shape)
            num = numerical_grad(fn, t, idx, h)
            ana = float(analytic[idx])
            denom = max(abs(num), abs(ana), floor)
            worst = max(worst, abs(num - ana) / denom)
    return worst

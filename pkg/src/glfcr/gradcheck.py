"""Central finite-difference gradient verification.

Analytic gradients from :func:`glfcr.engine.backward` are compared against
(f(p+h) - f(p-h)) / 2h per parameter coordinate, in float64. Large tensors
are subsampled coordinate-wise with a seeded choice so the check stays fast
while remaining reproducible.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .engine import Node, backward


def numeric_partial(build_loss: Callable[[], Node], param: Node, flat_index: int,
                    h: float = 1e-4) -> float:
    flat = param.value.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    hi = float(build_loss().value)
    flat[flat_index] = orig - h
    lo = float(build_loss().value)
    flat[flat_index] = orig
    return (hi - lo) / (2.0 * h)


def check_gradients(build_loss: Callable[[], Node], params: Iterable[Node],
                    h: float = 1e-4, rtol: float = 1e-4, floor: float = 1e-8,
                    max_coords: int | None = 8, seed: int = 0) -> float:
    """Return the worst relative error over all checked coordinates.

    ``build_loss`` must rebuild the forward graph from the current parameter
    values and return a scalar node. Relative error uses
    |analytic - numeric| / max(floor, |analytic|, |numeric|). Raises
    AssertionError when any coordinate exceeds ``rtol``.
    """
    params = list(params)
    for p in params:
        if p.value.dtype != np.float64:
            raise ValueError(f"gradient checks run in float64, parameter "
                             f"{p.name or '?'} is {p.value.dtype}")
        p.grad = None
    loss = build_loss()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        size = p.value.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        # a parameter on a dead path (no route to the loss) has gradient 0;
        # the numeric side below confirms that
        grad = p.grad if p.grad is not None else np.zeros_like(p.value)
        analytic = grad.reshape(-1)
        for idx in coords:
            num = numeric_partial(build_loss, p, int(idx), h=h)
            ana = float(analytic[idx])
            rel = abs(ana - num) / max(floor, abs(ana), abs(num))
            worst = max(worst, rel)
            if rel > rtol:
                raise AssertionError(
                    f"gradient mismatch at {p.name or '?'}[{idx}]: "
                    f"analytic={ana:.8e} numeric={num:.8e} rel={rel:.3e}")
    return worst

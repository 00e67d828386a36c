"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .tape import Tape


def numeric_grad(loss_fn, params: dict, name: str, eps: float = 1e-5) -> np.ndarray:
    """d loss / d params[name] by central differences; ``loss_fn(params) -> float``."""
    p = params[name]
    g = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        old = p[i]
        p[i] = old + eps
        hi = loss_fn(params)
        p[i] = old - eps
        lo = loss_fn(params)
        p[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm (0 when both vanish)."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(build, params: dict, eps: float = 1e-5) -> dict:
    """Compare tape gradients with finite differences for every parameter.

    ``build(tape, tensors) -> scalar Tensor`` where ``tensors`` maps names to
    leaves created on ``tape``.  Returns name -> relative error.
    """
    def loss_of(ps):
        t = Tape(grad=False)
        return float(build(t, {k: t.param(v, k) for k, v in ps.items()}).data)

    tape = Tape()
    leaves = {k: tape.param(v, k) for k, v in params.items()}
    grads = tape.backward(build(tape, leaves))
    return {k: relative_error(grads[leaves[k]], numeric_grad(loss_of, params, k, eps)) for k in params}

"""Central finite-difference gradient checking for ops built on the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradientTape, Tensor


def numeric_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, weights: np.ndarray,
                 h: float = 1e-5) -> np.ndarray:
    """d/dx_index of sum(weights * f(*inputs)) by central differences."""
    x = inputs[index]
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        plus = float(np.sum(weights * f(*inputs).data))
        flat[i] = old - h
        minus = float(np.sum(weights * f(*inputs).data))
        flat[i] = old
        grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(f: Callable[..., Tensor], inputs: Sequence[Tensor], weights: np.ndarray) -> list[np.ndarray | None]:
    for x in inputs:
        x.grad = None
    with GradientTape() as tape:
        out = f(*inputs)
    tape.backward(out, grad=np.asarray(weights, dtype=out.dtype))
    return [x.grad for x in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a|| + ||b||, tiny), so exact zeros compare as 0."""
    num = np.linalg.norm((a - b).ravel())
    den = np.linalg.norm(a.ravel()) + np.linalg.norm(b.ravel())
    return float(num / max(den, 1e-12))


def check_gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator | None = None,
                    h: float = 1e-5, atol: float = 1e-7) -> float:
    """Largest relative error between tape and finite-difference gradients.

    The output is contracted with random weights so every output element
    contributes. Only inputs with ``requires_grad`` are checked. An input whose
    analytic and numeric gradients both have norm below ``atol`` counts as a
    match: e.g. a key bias under softmax has an exactly zero gradient, and the
    ratio of two round-off residues is meaningless.
    """
    rng = rng or np.random.default_rng(0)
    out = f(*inputs)
    weights = rng.standard_normal(out.shape)
    grads = analytic_grads(f, inputs, weights)
    worst = 0.0
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = grads[i] if grads[i] is not None else np.zeros_like(x.data)
        numeric = numeric_grad(f, inputs, i, weights, h)
        if np.linalg.norm(analytic) < atol and np.linalg.norm(numeric) < atol:
            continue
        worst = max(worst, relative_error(analytic, numeric))
    return worst

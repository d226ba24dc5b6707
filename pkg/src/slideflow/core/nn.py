"""Dense layers and MLPs on top of the autodiff engine."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeError
from . import autodiff as ad

LEAKY_SLOPE = 0.2

ACTIVATIONS = ("relu", "leaky_relu", "identity")


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Fan-in scaled uniform init with the leaky-ReLU gain."""
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, widths: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Weights ``(W, b)`` for consecutive widths; ``W`` has shape (in, out)."""
    return [
        (kaiming_uniform(rng, a, b), np.zeros(b))
        for a, b in zip(widths[:-1], widths[1:])
    ]


def _activate(x, activation: str):
    if activation == "leaky_relu":
        return ad.leaky_relu(x, LEAKY_SLOPE)
    if activation == "relu":
        return ad.relu(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def mlp_forward(x, layers, activation: str = "leaky_relu", activate_last: bool = False):
    """Apply ``x @ W + b`` per layer with ``activation`` between layers.

    ``x`` may be a numpy array or a :class:`~slideflow.core.autodiff.Tensor`;
    the result has the same kind. ``layers`` is a list of ``(W, b)`` pairs whose
    entries may themselves be tensors (trainable) or arrays (frozen).
    """
    as_array = not isinstance(x, ad.Tensor)
    h = ad.const(x)
    if h.value.ndim != 2:
        raise ShapeError(f"mlp_forward expects a 2-D input, got shape {h.shape}")
    for i, (w, b) in enumerate(layers):
        w, b = ad.const(w), ad.const(b)
        if w.shape[0] != h.shape[1]:
            raise ShapeError(
                f"layer {i}: expects input width {w.shape[0]}, got {h.shape[1]}"
            )
        if b.shape[-1] != w.shape[1]:
            raise ShapeError(f"layer {i}: bias width {b.shape[-1]} != output width {w.shape[1]}")
        h = h @ w + b
        if i < len(layers) - 1 or activate_last:
            h = _activate(h, activation)
    return h.value if as_array else h

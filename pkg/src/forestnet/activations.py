"""Elementwise and per-pixel activation functions shared by stacks and nets."""

import numpy as np

GUARD_EPS = 1e-6

ACTIVATION_KINDS = ("classnorm", "softmax", "identity")


def class_normalize(v: np.ndarray, eps: float = GUARD_EPS):
    """Divide each class vector (last axis) by its sum.

    Vectors whose sum is within ``eps`` of zero are replaced by the uniform
    distribution. Returns ``(out, guarded)`` where ``guarded`` is a boolean mask
    over the leading axes.
    """
    v = np.asarray(v, dtype=np.float64)
    s = v.sum(axis=-1, keepdims=True)
    guarded = np.abs(s) < eps
    out = np.where(guarded, 1.0 / v.shape[-1], v / np.where(guarded, 1.0, s))
    return out, guarded[..., 0]


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def apply(kind: str, v: np.ndarray):
    """Returns ``(activation, guarded mask or None)``."""
    if kind == "classnorm":
        return class_normalize(v)
    if kind == "softmax":
        return softmax(v), None
    if kind == "identity":
        return np.array(v, dtype=np.float64), None
    raise ValueError("unknown activation %r" % kind)


def tanh01(z: np.ndarray) -> np.ndarray:
    """tanh rescaled to [0, 1]."""
    return 0.5 * (np.tanh(z) + 1.0)

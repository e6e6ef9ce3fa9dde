"""Row kernels for softmax and layer normalization.

The compiled extension ``carformer._kernels`` is used when it imports;
otherwise the numpy implementations below are used. Set
``CARFORMER_PURE_PYTHON=1`` to force the fallback.

Every kernel takes and returns C-contiguous float64 arrays of shape
``(rows, cols)`` and reduces over the last axis.
"""
from __future__ import annotations

import os

import numpy as np


def py_softmax_forward(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    # sequential row sums: trailing exact zeros (masked entries) leave them unchanged
    return e / np.cumsum(e, axis=1)[:, -1:]


def py_softmax_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def py_layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def py_layer_norm_backward(gy, xhat, rstd, gain):
    g = gy * gain
    s1 = g.mean(axis=1, keepdims=True)
    s2 = (g * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (g - s1 - xhat * s2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


PURE = {
    "softmax_forward": py_softmax_forward,
    "softmax_backward": py_softmax_backward,
    "layer_norm_forward": py_layer_norm_forward,
    "layer_norm_backward": py_layer_norm_backward,
}


def _load_compiled():
    try:
        from carformer import _kernels
    except ImportError:
        return None
    return {name: getattr(_kernels, name) for name in PURE}


COMPILED = _load_compiled()

if COMPILED is not None and os.environ.get("CARFORMER_PURE_PYTHON", "") not in ("1", "true"):
    BACKEND = "compiled"
    _active = dict(COMPILED)
else:
    BACKEND = "python"
    _active = dict(PURE)


def use_backend(name: str) -> None:
    """Switch kernel implementation at runtime ("compiled" or "python")."""
    global BACKEND
    if name == "compiled":
        if COMPILED is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active.update(COMPILED)
    elif name == "python":
        _active.update(PURE)
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if COMPILED is not None else [])


def softmax_forward(x):
    return _active["softmax_forward"](x)


def softmax_backward(y, gy):
    return _active["softmax_backward"](y, gy)


def layer_norm_forward(x, gain, bias, eps):
    return _active["layer_norm_forward"](x, gain, bias, eps)


def layer_norm_backward(gy, xhat, rstd, gain):
    return _active["layer_norm_backward"](gy, xhat, rstd, gain)

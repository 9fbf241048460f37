"""Bias-corrected Adam and plain SGD with sparse row-wise updates.

Adam moments are lazy: only rows touched by a step update their first and
second moments, which keeps untouched embedding rows bit-identical across
steps. The step counter t is shared across all parameters and managed by
the caller.
"""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    t: int,
    rows: np.ndarray | None = None,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
) -> None:
    """One in-place Adam update. With ``rows`` given, ``grad`` holds the
    gradient rows for exactly those indices and only they are touched."""
    if t < 1:
        raise ValueError("Adam step counter must be >= 1")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    if rows is None:
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    else:
        m_rows = beta1 * m[rows] + (1.0 - beta1) * grad
        v_rows = beta2 * v[rows] + (1.0 - beta2) * grad * grad
        m[rows] = m_rows
        v[rows] = v_rows
        param[rows] -= lr * (m_rows / bc1) / (np.sqrt(v_rows / bc2) + eps)


def sgd_step(
    param: np.ndarray, grad: np.ndarray, lr: float, rows: np.ndarray | None = None
) -> None:
    if rows is None:
        param -= lr * grad
    else:
        param[rows] -= lr * grad

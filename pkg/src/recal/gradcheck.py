"""Central finite differences for checking analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

STEP = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Gradient of the scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def within_tolerance(analytic: np.ndarray, numeric: np.ndarray, abs_tol: float = 1e-6,
                     rel_tol: float = 1e-4) -> bool:
    """``|a - n| <= max(abs_tol, rel_tol * |a|)`` element-wise."""
    return bool(np.all(np.abs(analytic - numeric) <= np.maximum(abs_tol, rel_tol * np.abs(analytic))))


def worst_ratio(analytic: np.ndarray, numeric: np.ndarray, abs_tol: float = 1e-6, rel_tol: float = 1e-4) -> float:
    """Largest error divided by its allowed tolerance (<= 1 means pass)."""
    allowed = np.maximum(abs_tol, rel_tol * np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / allowed)) if analytic.size else 0.0


def model_loss_gradients(model, X: np.ndarray, lam: float = 1.0, step: float = STEP):
    """Analytic and finite-difference gradients of the clustering loss for
    every model parameter, as ``{name: (analytic, numeric)}``.

    The model is run in its current mode; in train mode batch-norm
    running statistics change but the loss does not depend on them.
    """
    from . import tensor as T
    from .loss import recal_loss
    from .nn import softmax_rows

    def loss_value() -> float:
        with T.no_grad():
            return recal_loss(softmax_rows(model.forward(X)), lam).total

    model.zero_grad()
    T.backward(recal_loss(softmax_rows(model.forward(X)), lam).loss)
    out = {}
    for name, p in model.parameters().items():
        analytic = p.grad.copy()
        out[name] = (analytic, numeric_grad(loss_value, p.data, step))
    model.zero_grad()
    return out

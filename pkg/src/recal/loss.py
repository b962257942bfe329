"""Two-entropy clustering objective.

``L = lam * H_phi - H_psi`` where ``H_phi`` is the mean per-sample entropy of
the cluster posteriors (low when every sample is confidently assigned) and
``H_psi`` is the entropy of the batch-level cluster marginal (high when the
clusters are balanced). Natural logarithms throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

# probabilities are clamped to [PROB_FLOOR, 1] inside every log
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    h_phi: float
    h_psi: float
    total: float
    lam: float
    loss: Tensor | None = None

    def as_row(self) -> tuple[float, float, float]:
        return self.h_phi, self.h_psi, self.total


def plogp_sum(p: Tensor) -> Tensor:
    """``sum_m sum_l p_ml log p_ml`` (non-positive)."""
    return T.tsum(p * T.log(p, PROB_FLOOR))


def classification_entropy(p: Tensor) -> Tensor:
    return -plogp_sum(p) / float(p.shape[0])


def class_marginal(p: Tensor) -> Tensor:
    col = T.tsum(p, axis=0)
    return col / T.tsum(col)


def class_entropy(p_l: Tensor) -> Tensor:
    return -T.tsum(p_l * T.log(p_l, PROB_FLOOR))


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not lam > 0:
        raise ConfigError(f"lambda must be > 0, got {lam}")
    return lam


def loss_from_sums(plogp: Tensor, col_sums: Tensor, count: int, lam: float) -> LossBreakdown:
    """Assemble the objective from its sufficient statistics.

    ``plogp`` is the summed ``p log p`` over ``count`` samples and
    ``col_sums`` the per-cluster probability mass.
    """
    lam = check_lambda(lam)
    h_phi = -plogp / float(count)
    h_psi = class_entropy(col_sums / T.tsum(col_sums))
    total = lam * h_phi - h_psi
    return LossBreakdown(h_phi.item(), h_psi.item(), total.item(), lam, total)


def recal_loss(p: Tensor, lam: float = 1.0) -> LossBreakdown:
    """Loss breakdown for an (M, K) posterior matrix; ``.loss`` is differentiable."""
    return loss_from_sums(plogp_sum(p), T.tsum(p, axis=0), p.shape[0], lam)


def entropies_np(p: np.ndarray) -> tuple[float, float]:
    """``(H_phi, H_psi)`` for a plain array, without recording."""
    with T.no_grad():
        b = recal_loss(Tensor(p))
    return b.h_phi, b.h_psi

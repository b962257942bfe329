"""Momentum-SGD training on the two-entropy objective.

Every parameter update sees one *macro-batch* made of ``t`` micro-batches.
The macro-batch loss depends on the micro-batches only through ``K + 1``
running sums (summed ``p log p`` and the per-cluster probability mass), so
these are all that :class:`MacroBatchAccumulator` keeps between forwards.

Two gradient semantics are supported:

``exact``
    every micro-batch graph stays on the tape until the update, so the
    gradient equals the gradient of the single big-batch loss.
``literal``
    earlier micro-batches enter the loss as constants and only the most
    recent micro-batch is differentiated. Cheaper, but the gradient is
    biased.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericalError, ShapeError, StateError
from .loss import LossBreakdown, check_lambda, loss_from_sums, plogp_sum, recal_loss
from .nn import Model, softmax_rows
from .tensor import Tensor

log = logging.getLogger(__name__)

ACCUMULATION_MODES = ("exact", "literal")


@dataclass
class TrainConfig:
    K: int
    lam: float = 1.0
    lr: float = 1e-4
    momentum: float = 0.9
    micro_batch_size: int = 64
    micro_batches_per_step: int = 1
    max_epochs: int = 200
    convergence_tol: float = 1e-4
    seed: int = 0
    accumulation_mode: str = "exact"

    def __post_init__(self):
        if int(self.K) < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        check_lambda(self.lam)
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if int(self.micro_batch_size) < 1 or int(self.micro_batches_per_step) < 1:
            raise ConfigError("micro_batch_size and micro_batches_per_step must be >= 1")
        if self.micro_batch_size * self.micro_batches_per_step < self.K:
            raise ConfigError(
                f"macro-batch of {self.micro_batch_size}x{self.micro_batches_per_step} "
                f"samples cannot cover K={self.K} clusters")
        if int(self.max_epochs) < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.accumulation_mode not in ACCUMULATION_MODES:
            raise ConfigError(f"accumulation_mode must be one of {ACCUMULATION_MODES}")

    @property
    def macro_batch_size(self) -> int:
        return self.micro_batch_size * self.micro_batches_per_step


# -- optimiser -----------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)


def _named_params(model_or_params) -> dict[str, Tensor]:
    if isinstance(model_or_params, Model):
        return model_or_params.parameters()
    return dict(model_or_params)


def sgd_step(model_or_params, opt_state: OptimizerState, lr: float, momentum: float) -> None:
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``; grads are cleared.

    An update that would leave a parameter non-finite raises
    :class:`NumericalError` instead of being applied.
    """
    params = _named_params(model_or_params)
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    updates = {}
    for name, p in params.items():
        v = opt_state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity for {name!r} has shape {v.shape}, parameter {p.shape}")
        v = momentum * v + p.grad
        new = p.data - lr * v
        if not np.all(np.isfinite(new)):
            raise NumericalError(
                f"update made parameter {name!r} non-finite (max |grad|={np.max(np.abs(p.grad)):.3e}, lr={lr})")
        updates[name] = (v, new)
    for name, p in params.items():
        opt_state.velocity[name], p.data = updates[name]
        p.grad = None


# -- forward helpers -----------------------------------------------------

def _forward_probs(model: Model, batch) -> Tensor:
    logits = model.forward(batch)
    r = logits.data
    if not np.all(np.isfinite(r)):
        finite = r[np.isfinite(r)]
        raise NumericalError(
            f"non-finite logits: {np.count_nonzero(~np.isfinite(r))} of {r.size} entries, "
            f"finite min={finite.min() if finite.size else 'n/a'}, max={finite.max() if finite.size else 'n/a'}")
    return softmax_rows(logits)


def _check_loss(b: LossBreakdown, p: Tensor | None = None) -> None:
    if not np.isfinite(b.total):
        detail = ""
        if p is not None:
            detail = f"; probabilities min={p.data.min():.3e} max={p.data.max():.3e}"
        raise NumericalError(f"loss is not finite (h_phi={b.h_phi}, h_psi={b.h_psi}){detail}")


def train_step_simple(model: Model, batch, cfg: TrainConfig, opt_state: OptimizerState) -> LossBreakdown:
    """One forward / loss / backward / update on a single batch."""
    if len(batch) < cfg.K:
        warnings.warn(f"batch of {len(batch)} samples is smaller than K={cfg.K}", RuntimeWarning, stacklevel=2)
    model.train()
    p = _forward_probs(model, batch)
    b = recal_loss(p, cfg.lam)
    _check_loss(b, p)
    T.backward(b.loss)
    sgd_step(model, opt_state, cfg.lr, cfg.momentum)
    return b


# -- accumulation --------------------------------------------------------

class MacroBatchAccumulator:
    """Running ``(h_phi, h_psi, count)`` over the micro-batches of one step.

    ``h_phi`` is the summed ``p log p`` (a single number) and ``h_psi`` the
    per-cluster probability mass (``K`` numbers).
    """

    def __init__(self, K: int, mode: str = "exact"):
        if mode not in ACCUMULATION_MODES:
            raise ConfigError(f"accumulation mode must be one of {ACCUMULATION_MODES}")
        self.K = int(K)
        self.mode = mode
        self.reset()

    def reset(self) -> None:
        self.count = 0
        self._phi: Tensor | None = None
        self._psi: Tensor | None = None
        # literal mode: constants from earlier micro-batches + the live tail
        self._const_phi = 0.0
        self._const_psi = np.zeros(self.K)
        self._live_range: tuple[int, int] | None = None
        tape = T.active_tape()
        self._mark = (tape.generation, len(tape))

    @property
    def h_phi(self) -> float:
        if self.mode == "exact":
            return 0.0 if self._phi is None else self._phi.item()
        return self._const_phi + (0.0 if self._phi is None else self._phi.item())

    @property
    def h_psi(self) -> np.ndarray:
        if self.mode == "exact":
            return np.zeros(self.K) if self._psi is None else self._psi.data.copy()
        return self._const_psi + (0.0 if self._psi is None else self._psi.data)

    def state_values(self) -> np.ndarray:
        """The ``K + 1`` running values, ``[h_phi, h_psi...]``."""
        return np.concatenate([[self.h_phi], self.h_psi])

    @property
    def state_size(self) -> int:
        return self.state_values().size

    def _tape_start(self) -> int:
        tape = T.active_tape()
        gen, pos = self._mark
        return pos if gen == tape.generation else 0

    def add(self, p: Tensor) -> "MacroBatchAccumulator":
        if p.ndim != 2 or p.shape[1] != self.K:
            raise ShapeError(f"expected (M, {self.K}) probabilities, got {p.shape}")
        start = self._tape_start()
        phi = plogp_sum(p)
        psi = T.tsum(p, axis=0)
        tape = T.active_tape()
        if self.mode == "exact":
            self._phi = phi if self._phi is None else self._phi + phi
            self._psi = psi if self._psi is None else self._psi + psi
        else:
            if self._phi is not None:
                # fold the previous tail into constants and drop its graph
                self._const_phi = self._const_phi + self._phi.item()
                self._const_psi = self._const_psi + self._psi.data
                if self._live_range is not None:
                    tape.discard(*self._live_range)
            self._phi, self._psi = phi, psi
            self._live_range = (start, len(tape))
        self.count += p.shape[0]
        self._mark = (tape.generation, len(tape))
        return self

    def loss(self, lam: float) -> LossBreakdown:
        if self.count == 0:
            raise StateError("cannot finalize an empty macro-batch accumulator")
        if self.mode == "exact":
            phi, psi = self._phi, self._psi
        else:
            phi = self._phi + self._const_phi
            psi = self._psi + Tensor._wrap(self._const_psi)
        return loss_from_sums(phi, psi, self.count, lam)


def accumulate_microbatch(acc: MacroBatchAccumulator, p: Tensor) -> MacroBatchAccumulator:
    return acc.add(p)


def finalize_macrobatch(acc: MacroBatchAccumulator, model: Model, cfg: TrainConfig,
                        opt_state: OptimizerState) -> LossBreakdown:
    """Compute the macro-batch loss, backpropagate, update and reset."""
    b = acc.loss(cfg.lam)
    _check_loss(b)
    if b.loss.tracked():
        T.backward(b.loss)
    sgd_step(model, opt_state, cfg.lr, cfg.momentum)
    acc.reset()
    return b


# -- full training loop --------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    h_phi: float
    h_psi: float
    loss: float
    nmi: float | None
    empty_clusters: int


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    opt_state: OptimizerState


def _micro_batches(order: np.ndarray, size: int, min_size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        # a singleton cannot be batch-normalised: merge it into its neighbour
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def predict_labels(model: Model, X: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode argmax cluster labels; restores the model's previous mode."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(X), batch_size):
        out.append(np.argmax(model.predict_proba(X[i:i + batch_size]), axis=1))
    if was_training:
        model.train()
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train(model: Model, X: np.ndarray, cfg: TrainConfig, labels: np.ndarray | None = None,
          opt_state: OptimizerState | None = None) -> TrainResult:
    """Run epochs of shuffled macro-batches until convergence or ``max_epochs``.

    Convergence means the relative change of the mean epoch loss stays
    below ``cfg.convergence_tol`` for three consecutive epochs.
    """
    from .metrics import nmi

    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ContractError("cannot train on an empty dataset")
    if model.K != cfg.K:
        raise ConfigError(f"model has {model.K} outputs but K={cfg.K}")
    opt_state = opt_state or OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    has_bn = any(s.kind == "batchnorm" for s in model.specs)
    acc = MacroBatchAccumulator(cfg.K, cfg.accumulation_mode)
    history: list[EpochRecord] = []
    prev_loss = None
    calm = 0

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(X))
        micro = _micro_batches(order, cfg.micro_batch_size, 2 if has_bn else 1)
        acc.reset()
        steps = []
        for i, idx in enumerate(micro):
            acc.add(_forward_probs(model, X[idx]))
            if (i + 1) % cfg.micro_batches_per_step == 0 or i == len(micro) - 1:
                steps.append(finalize_macrobatch(acc, model, cfg, opt_state))

        h_phi = float(np.mean([s.h_phi for s in steps]))
        h_psi = float(np.mean([s.h_psi for s in steps]))
        loss = float(np.mean([s.total for s in steps]))
        pred = predict_labels(model, X)
        hist = np.bincount(pred, minlength=cfg.K)
        empty = int(np.sum(hist == 0))
        if empty:
            warnings.warn(f"epoch {epoch}: {empty} empty cluster(s)", RuntimeWarning, stacklevel=2)
        score = nmi(labels, pred) if labels is not None else None
        history.append(EpochRecord(epoch, h_phi, h_psi, loss, score, empty))
        log.debug("epoch %d loss=%.6f h_phi=%.6f h_psi=%.6f nmi=%s", epoch, loss, h_phi, h_psi, score)

        if prev_loss is not None:
            rel = abs(loss - prev_loss) / max(abs(prev_loss), 1e-12)
            calm = calm + 1 if rel < cfg.convergence_tol else 0
            if calm >= 3:
                break
        prev_loss = loss

    model.eval()
    return TrainResult(model, history, opt_state)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "h_phi", "h_psi", "loss", "nmi_vs_ground_truth", "empty_clusters"])
        for r in history:
            w.writerow([_fmt(v) for v in asdict(r).values()])

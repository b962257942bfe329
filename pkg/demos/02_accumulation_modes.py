"""Why the accumulator keeps every micro-batch graph by default.

A macro-batch is split into micro-batches. Its loss depends on them only
through sum(p log p) and the per-cluster mass. The loss value is the same
in both modes. The gradient is not:

* ``exact`` keeps every micro-batch on the tape, so it matches the big batch.
* ``literal`` freezes earlier micro-batches as constants.
"""
import numpy as np

from recal import tensor as T
from recal.loss import recal_loss
from recal.nn import mlp, softmax_rows
from recal.trainer import MacroBatchAccumulator

rng = np.random.default_rng(3)
X = rng.normal(size=(12, 4))
model = mlp(4, [6], 3, batchnorm=False, head_batchnorm=False, seed=1)


def grads():
    out = {k: p.grad.copy() for k, p in model.parameters().items()}
    model.zero_grad()
    return out


big = recal_loss(softmax_rows(model.forward(X)))
T.backward(big.loss)
reference = grads()
print(f"single batch of 12: loss {big.total:+.12f}")

for mode in ("exact", "literal"):
    acc = MacroBatchAccumulator(3, mode)
    for part in np.split(X, 3):
        acc.add(softmax_rows(model.forward(part)))
    print(f"  {mode:7s} running state ({acc.state_size} numbers): {np.round(acc.state_values(), 4)}")
    b = acc.loss(1.0)
    T.backward(b.loss)
    g = grads()
    gap = max(float(np.max(np.abs(g[k] - reference[k]))) for k in g)
    print(f"  {mode:7s} loss {b.total:+.12f}  max gradient gap {gap:.2e}")

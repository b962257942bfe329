"""Clustering 1000 MNIST digits with a small conv stack.

Uses the IDX fixture shipped with the tests (100 images per digit).
Takes about a minute on one CPU core.
"""
import time
import warnings
from pathlib import Path

import numpy as np

from recal.data import load_idx, normalize_dataset
from recal.metrics import contingency_table, nmi
from recal.nn import convnet
from recal.trainer import TrainConfig, predict_labels, train

warnings.simplefilter("ignore", RuntimeWarning)
fixtures = Path(__file__).resolve().parent.parent / "tests" / "data"
digits = normalize_dataset(load_idx(fixtures / "mnist1k-images-idx3-ubyte.gz",
                                    fixtures / "mnist1k-labels-idx1-ubyte.gz"))
print("samples:", digits.samples.shape, "stats:", digits.stats)

# Two stride-2 conv blocks (32 and 64 channels), a 128-unit feature layer, then the head.
model = convnet((1, 28, 28), [32, 64], 10, fc=128, seed=0)
cfg = TrainConfig(K=10, lr=0.01, momentum=0.9, micro_batch_size=100, micro_batches_per_step=2,
                  max_epochs=40, seed=0)
t0 = time.time()
result = train(model, digits.samples, cfg, labels=digits.labels)
print(f"trained {len(result.history)} epochs in {time.time() - t0:.0f}s")
for rec in result.history[::10] + result.history[-1:]:
    print(f"epoch {rec.epoch:2d}  loss={rec.loss:+.4f}  nmi={rec.nmi:.3f}  empty={rec.empty_clusters}")

labels = predict_labels(result.model, digits.samples)
print("NMI:", round(nmi(digits.labels, labels), 4))
print("rows: true digit, columns: cluster")
print(contingency_table(digits.labels, labels))
print("cluster sizes:", np.bincount(labels, minlength=10).tolist())

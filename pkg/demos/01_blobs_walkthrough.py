"""Clustering three Gaussian blobs, start to finish.

Run with ``python3 demos/01_blobs_walkthrough.py``. Takes a few seconds.
"""
import warnings

from recal.data import normalize_dataset, synth_blobs
from recal.kmeans import embed_dataset, kmeans_fit
from recal.metrics import cluster_histogram, nmi
from recal.nn import mlp
from recal.trainer import TrainConfig, predict_labels, train

warnings.simplefilter("ignore", RuntimeWarning)

# Three clusters, 200 points each, centres 6 standard deviations apart.
blobs = synth_blobs(200, 3, d=2, separation=6.0, sigma=1.0, seed=0)
data = normalize_dataset(blobs)
print("normalisation stats:", data.stats)

# A 2 -> 16 -> 3 network. The head is linear, batch-norm, ReLU, then softmax.
model = mlp(2, [16], 3, seed=0)

# Each update sees 2 micro-batches of 50 samples. The loss over those 100
# samples is rebuilt from K+1 running sums, so it equals the loss of a
# single 100-sample batch.
cfg = TrainConfig(K=3, lam=1.0, lr=1e-3, momentum=0.9, micro_batch_size=50,
                  micro_batches_per_step=2, max_epochs=200, seed=0)
result = train(model, data.samples, cfg, labels=blobs.labels)

for rec in result.history[::40] + result.history[-1:]:
    print(f"epoch {rec.epoch:3d}  H_phi={rec.h_phi:.4f}  H_psi={rec.h_psi:.4f}  "
          f"loss={rec.loss:+.4f}  nmi={rec.nmi:.3f}")

labels = predict_labels(result.model, data.samples)
print("cluster sizes:", cluster_histogram(labels, 3).tolist())
print("NMI vs generating labels:", round(nmi(blobs.labels, labels), 4))

# The usual baseline: k-means on the raw points and on the learned features.
raw = kmeans_fit(data.samples, 3, seed=0)
emb = kmeans_fit(embed_dataset(result.model, data.samples), 3, seed=0)
print("k-means NMI, raw inputs:", round(nmi(blobs.labels, raw.assignment.labels), 4))
print("k-means NMI, embeddings:", round(nmi(blobs.labels, emb.assignment.labels), 4))
print("embedding dimension:", result.model.embedding_dim)

"""Segmenting a synthetic 3-band raster from its patches.

The raster has four textured quadrants. It is cut into 16x16 patches at
stride 8, each patch is clustered, and the patch labels are painted back
with a majority vote. Two models with different seeds are then compared
through the cross-model Jaccard matrix. Outputs go to ``demo-out/``.
"""
import warnings
from pathlib import Path

import numpy as np

from recal.data import assemble_segmentation, extract_patches, normalize_dataset, synth_texture_raster
from recal.metrics import best_match_jaccard, cross_model_consensus, write_matrix_csv
from recal.nn import mlp
from recal.trainer import TrainConfig, predict_labels, train

warnings.simplefilter("ignore", RuntimeWarning)
out = Path("demo-out")
out.mkdir(exist_ok=True)

raster, region = synth_texture_raster(128, seed=0)
patches, grid = extract_patches(raster, 16, 8)
print(f"{len(grid)} patches on a {grid.n_rows}x{grid.n_cols} grid")
X = normalize_dataset(patches, per_channel=True).samples.reshape(len(grid), -1)

maps = []
for seed in (0, 1):
    cfg = TrainConfig(K=4, lr=0.01, micro_batch_size=75, max_epochs=100, seed=seed)
    result = train(mlp(X.shape[1], [128], 4, seed=seed), X, cfg)
    seg = assemble_segmentation(grid, predict_labels(result.model, X), K=4)
    seg.write_pgm(out / f"segmentation-seed{seed}.pgm")
    seg.write_csv(out / f"segmentation-seed{seed}.csv")
    scores = best_match_jaccard(region, seg.labels, 4)
    print(f"seed {seed}: best-match Jaccard per quadrant {np.round(scores, 3).tolist()}")
    maps.append(seg.labels)

consensus = cross_model_consensus(maps[0].ravel(), maps[1].ravel(), 4)
write_matrix_csv(consensus, out / "cross_jaccard.csv")
print("cross-model Jaccard (rows: seed 0 labels, columns: seed 1 labels)")
print(np.round(consensus, 3))

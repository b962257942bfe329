"""Deep clustering with an entropy trade-off objective.

A network maps samples to cluster posteriors and is trained to make each
posterior confident while keeping the clusters balanced. The package
bundles the autodiff engine, layers, loss, trainer, metrics, a k-means
baseline, data formats and patch segmentation.
"""
__version__ = "0.1.0"

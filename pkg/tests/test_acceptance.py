"""End-to-end acceptance checks.

Each criterion is a plain function returning ``(passed, detail)`` so the
module can run under pytest or directly with ``python3 tests/test_acceptance.py``.
Either way one PASS/FAIL line per criterion is printed.
"""
from __future__ import annotations

import itertools
import math
import shutil
import sys
import tempfile
import time
import warnings
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from recal import tensor as T
from recal.cli import main as cli_main
from recal.data import (
    assemble_segmentation, extract_patches, load_idx, normalize_dataset, synth_blobs, synth_texture_raster,
)
from recal.errors import NumericalError
from recal.gradcheck import model_loss_gradients, worst_ratio
from recal.kmeans import embed_dataset, kmeans_fit
from recal.loss import recal_loss
from recal.metrics import best_match_jaccard, cross_model_consensus, jaccard, nmi
from recal.nn import LayerSpec, Model, convnet, mlp, softmax_rows
from recal.tensor import Tensor
from recal.trainer import MacroBatchAccumulator, TrainConfig, predict_labels, train

DATA = Path(__file__).parent / "data"
REPORT: list[str] = []


def report(number: int, title: str, passed: bool, detail: str, seconds: float, budget: float | None) -> bool:
    within = budget is None or seconds < budget
    ok = passed and within
    limit = f" / limit {budget:.0f}s" if budget else ""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} [{detail}] ({seconds:.1f}s{limit})"
    REPORT.append(line)
    print(line, flush=True)
    return ok


def timed(fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return passed, detail, time.perf_counter() - t0


# -- 1. gradients ----------------------------------------------------------

def random_model(rng: np.random.Generator, index: int) -> tuple[Model, np.ndarray]:
    K = int(rng.integers(2, 6))
    M = int(rng.integers(4, 17))
    use_bn = index % 2 == 0
    seed = int(rng.integers(1 << 30))
    if index % 4 < 2:
        d = int(rng.integers(2, 6))
        model = mlp(d, [int(rng.integers(3, 7))], K, batchnorm=use_bn, head_batchnorm=use_bn,
                    head_relu=False, seed=seed)
        X = rng.normal(size=(M, d))
    else:
        C, H = int(rng.integers(1, 3)), int(rng.integers(4, 7))
        ch = int(rng.integers(2, 4))
        specs = [LayerSpec.conv2d(C, ch, 3, int(rng.integers(1, 3)), 1)]
        if use_bn:
            specs.append(LayerSpec.batchnorm(ch))
        specs += [LayerSpec.relu(), LayerSpec.flatten()]
        flat = Model(specs, (C, H, H), len(specs)).shapes[-1][0]
        head = [LayerSpec.linear(flat, K)] + ([LayerSpec.batchnorm(K)] if use_bn else [])
        model = Model(specs + head, (C, H, H), len(specs), seed=seed)
        X = rng.normal(size=(M, C, H, H))
    return model, X


def criterion_gradients(n_models: int = 24):
    rng = np.random.default_rng(2024)
    worst, largest, kinds = 0.0, 0.0, Counter()
    for i in range(n_models):
        model, X = random_model(rng, i)
        kinds[("mlp" if X.ndim == 2 else "conv") + ("+bn" if i % 2 == 0 else "")] += 1
        lam = float(rng.uniform(0.5, 2.0))
        for analytic, numeric in model_loss_gradients(model, X, lam).values():
            worst = max(worst, worst_ratio(analytic, numeric))
            largest = max(largest, float(np.max(np.abs(analytic))))
    detail = (f"{n_models} models {dict(sorted(kinds.items()))}, worst error/tolerance {worst:.2e}, "
              f"largest |grad| {largest:.2e}")
    return worst <= 1.0 and largest > 0 and n_models >= 20, detail


# -- 2. entropy bounds -----------------------------------------------------

def criterion_entropy_bounds(n: int = 1000):
    rng = np.random.default_rng(7)
    bad = 0
    for i in range(n):
        M, K = int(rng.integers(1, 20)), int(rng.integers(1, 9))
        if i % 10 == 0:
            p = np.eye(K)[rng.integers(0, K, M)]
        else:
            p = rng.dirichlet(np.full(K, rng.uniform(0.05, 5.0)), size=M)
        with T.no_grad():
            b = recal_loss(Tensor(p))
        lnK = math.log(K)
        ok = (0 <= b.h_phi <= lnK + 1e-12) and (0 <= b.h_psi <= lnK + 1e-12) and b.h_psi >= b.h_phi - 1e-9
        bad += not ok
    return bad == 0, f"{n} matrices, {bad} violations"


# -- 3. minimiser structure ----------------------------------------------

def criterion_minimiser(cases=((4, 2), (6, 2), (6, 3))):
    notes = []
    ok = True
    for M, K in cases:
        totals = {}
        with T.no_grad():
            for assign in itertools.product(range(K), repeat=M):
                totals[assign] = recal_loss(Tensor(np.eye(K)[list(assign)]), 1.0).total
        best = min(totals.values())
        minimisers = {a for a, v in totals.items() if v <= best + 1e-12}
        balanced = {a for a in totals if all(c == M // K for c in Counter(a).values()) and len(set(a)) == K}
        case_ok = minimisers == balanced and abs(best + math.log(K)) <= 1e-12
        ok &= case_ok
        notes.append(f"({M},{K}): {len(minimisers)} minimisers = {len(balanced)} balanced")
    return ok, "; ".join(notes)


# -- 4. accumulation equivalence ------------------------------------------

def criterion_accumulation(n_cases: int = 50):
    rng = np.random.default_rng(11)
    worst_loss = worst_grad = 0.0
    structural = True
    for case in range(n_cases):
        d, K = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        model = mlp(d, [int(rng.integers(3, 8))], K, batchnorm=False, head_batchnorm=False,
                    head_relu=bool(case % 2), seed=case)
        sizes = rng.integers(1, 7, size=int(rng.integers(1, 6)))
        X = rng.normal(size=(int(sizes.sum()), d))
        lam = float(rng.uniform(0.2, 3.0))

        model.zero_grad()
        ref = recal_loss(softmax_rows(model.forward(X)), lam)
        T.backward(ref.loss)
        ref_grads = {k: p.grad.copy() for k, p in model.parameters().items()}
        model.zero_grad()

        for mode in ("exact", "literal"):
            acc = MacroBatchAccumulator(K, mode)
            for part in np.split(X, np.cumsum(sizes)[:-1]):
                acc.add(softmax_rows(model.forward(part)))
                structural &= acc.state_values().shape == (K + 1,)
            b = acc.loss(lam)
            worst_loss = max(worst_loss, abs(b.total - ref.total))
            T.backward(b.loss)
            if mode == "exact":
                for k, p in model.parameters().items():
                    worst_grad = max(worst_grad, float(np.max(np.abs(p.grad - ref_grads[k]))))
            model.zero_grad()
    ok = worst_loss <= 1e-9 and worst_grad <= 1e-9 and structural
    return ok, (f"{n_cases} cases, max loss gap {worst_loss:.1e}, max exact-grad gap {worst_grad:.1e}, "
                f"state K+1: {structural}")


# -- 5. blobs end to end -------------------------------------------------

def criterion_blobs(seeds=range(5)):
    scores, km_gaps = [], []
    for seed in seeds:
        d = synth_blobs(200, 3, d=2, separation=6.0, sigma=1.0, seed=seed)
        X = normalize_dataset(d).samples
        cfg = TrainConfig(K=3, lam=1.0, lr=1e-3, momentum=0.9, micro_batch_size=50, micro_batches_per_step=2,
                          max_epochs=200, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = train(mlp(2, [16], 3, seed=seed), X, cfg, labels=d.labels)
        scores.append(nmi(d.labels, predict_labels(res.model, X)))
        raw = nmi(d.labels, kmeans_fit(X, 3, seed=seed).assignment.labels)
        emb = nmi(d.labels, kmeans_fit(embed_dataset(res.model, X), 3, seed=seed).assignment.labels)
        km_gaps.append(emb - raw)
    good = sum(s >= 0.8 for s in scores)
    ok = good >= 4 and min(km_gaps) >= -0.05
    return ok, (f"NMI {[round(s, 3) for s in scores]} ({good}/5 >= 0.8), "
                f"k-means embedding minus raw {[round(g, 3) for g in km_gaps]}")


# -- 6. MNIST subset -----------------------------------------------------

MNIST_CONFIG = dict(channels=[32, 64], fc=128, lr=0.01, momentum=0.9, micro_batch_size=100,
                    micro_batches_per_step=2, max_epochs=40, seed=0)


def criterion_mnist():
    d = normalize_dataset(load_idx(DATA / "mnist1k-images-idx3-ubyte.gz", DATA / "mnist1k-labels-idx1-ubyte.gz"))
    c = MNIST_CONFIG
    model = convnet((1, 28, 28), c["channels"], 10, fc=c["fc"], seed=c["seed"])
    cfg = TrainConfig(K=10, lam=1.0, lr=c["lr"], momentum=c["momentum"], micro_batch_size=c["micro_batch_size"],
                      micro_batches_per_step=c["micro_batches_per_step"], max_epochs=c["max_epochs"],
                      seed=c["seed"])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = train(model, d.samples, cfg, labels=d.labels)
    except NumericalError as exc:
        return False, f"numerical failure: {exc}"
    finite = all(np.isfinite(r.loss) for r in res.history)
    labels = predict_labels(res.model, d.samples)
    nonempty = int(np.count_nonzero(np.bincount(labels, minlength=10)))
    score = nmi(d.labels, labels)
    ok = finite and nonempty >= 8 and score >= 0.30
    return ok, f"NMI {score:.3f}, {nonempty} nonempty clusters, {len(res.history)} epochs, finite={finite}"


# -- 7. metric oracles ---------------------------------------------------

def brute_nmi(a, b):
    n = len(a)
    pa, pb, pab = Counter(a), Counter(b), Counter(zip(a, b))
    ha = -sum(c / n * math.log(c / n) for c in pa.values())
    hb = -sum(c / n * math.log(c / n) for c in pb.values())
    if ha == 0 or hb == 0:
        return 1.0 if ha == 0 and hb == 0 else 0.0
    mi = sum(c / n * math.log(c * n / (pa[x] * pb[y])) for (x, y), c in pab.items())
    return mi / math.sqrt(ha * hb)


def criterion_metrics(n: int = 200):
    rng = np.random.default_rng(5)
    worst_nmi = worst_jac = worst_perm = 0.0
    for _ in range(n):
        size = int(rng.integers(1, 60))
        a = rng.integers(0, int(rng.integers(1, 7)), size)
        b = rng.integers(0, int(rng.integers(1, 7)), size)
        v = nmi(a, b)
        worst_nmi = max(worst_nmi, abs(v - brute_nmi(a.tolist(), b.tolist())))
        pa = rng.permutation(a.max() + 1)[a]
        pb = rng.permutation(b.max() + 1)[b]
        worst_perm = max(worst_perm, abs(nmi(pa, pb) - v))
        s1 = {i for i in range(size) if a[i] == 0}
        s2 = {i for i in range(size) if b[i] == 0}
        union = s1 | s2
        expect = len(s1 & s2) / len(union) if union else 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            worst_jac = max(worst_jac, abs(jaccard(s1, s2) - expect))
    ok = max(worst_nmi, worst_jac, worst_perm) <= 1e-12
    return ok, f"{n} fixtures, max |NMI - oracle| {worst_nmi:.1e}, Jaccard {worst_jac:.1e}, permuted {worst_perm:.1e}"


# -- 8. segmentation -----------------------------------------------------

SEGMENT_CONFIG = dict(P=16, S=8, hidden=[128], lr=0.01, micro_batch_size=75, max_epochs=100)


def segment_once(seed: int, raster, region):
    c = SEGMENT_CONFIG
    d, grid = extract_patches(raster, c["P"], c["S"])
    X = normalize_dataset(d, per_channel=True).samples.reshape(len(d), -1)
    cfg = TrainConfig(K=4, lr=c["lr"], micro_batch_size=c["micro_batch_size"], max_epochs=c["max_epochs"], seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = train(mlp(X.shape[1], c["hidden"], 4, seed=seed), X, cfg)
    seg = assemble_segmentation(grid, predict_labels(res.model, X), K=4)
    return seg, best_match_jaccard(region, seg.labels, 4)


def criterion_segmentation(seeds=(0, 1)):
    raster, region = synth_texture_raster(128, seed=0)
    maps, scores = [], []
    for seed in seeds:
        seg, best = segment_once(seed, raster, region)
        maps.append(seg.labels)
        scores.append(best)
    consensus = cross_model_consensus(maps[0].ravel(), maps[1].ravel(), 4)
    schema_ok = consensus.shape == (4, 4) and np.all((consensus >= 0) & (consensus <= 1))
    ok = all(min(s) >= 0.6 for s in scores) and schema_ok and (maps[0] >= 0).all()
    rounded = [[round(v, 3) for v in s] for s in scores]
    return ok, (f"best-match Jaccard per region {rounded}, "
                f"consensus row maxima {np.round(consensus.max(axis=1), 3).tolist()}")


# -- 9. CLI determinism --------------------------------------------------

def criterion_determinism():
    root = Path(tempfile.mkdtemp(prefix="recal-accept-"))
    try:
        ckpt = root / "train" / "model.rclm"
        blobs = ["--data", "blobs", "--k", "3", "--n-per-cluster", "60", "--seed", "3"]
        commands = {
            "train": ["train", *blobs, "--epochs", "20", "--lr", "0.001", "--micro-batch", "30",
                      "--accum-steps", "2", "--out-dir", root / "train"],
            "predict": ["predict", *blobs, "--model", ckpt, "--out-dir", root / "predict"],
            "evaluate": ["evaluate", *blobs, "--model", ckpt, "--out-dir", root / "evaluate"],
            "kmeans": ["kmeans", *blobs, "--model", ckpt, "--restarts", "3", "--out-dir", root / "kmeans"],
            "seg-train": ["train", "--data", "texture", "--raster-size", "64", "--patch-size", "16", "--stride", "8",
                          "--k", "4", "--hidden", "32", "--lr", "0.01", "--micro-batch", "25", "--epochs", "10",
                          "--per-channel", "true", "--out-dir", root / "seg-train"],
            "seg-train-2": ["train", "--config", root / "seg-train" / "config.txt", "--seed", "1",
                            "--out-dir", root / "seg-train-2"],
            "segment": ["segment", "--model", root / "seg-train" / "model.rclm",
                        "--model2", root / "seg-train-2" / "model.rclm", "--raster-size", "64",
                        "--out-dir", root / "segment"],
        }
        snapshots: dict[str, list[dict]] = {name: [] for name in commands}
        for _ in range(2):
            for name, argv in commands.items():
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    code = cli_main([str(a) for a in argv])
                if code != 0:
                    return False, f"{name} exited with {code}"
                out = Path(argv[argv.index("--out-dir") + 1])
                snapshots[name].append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        differing = [n for n, (a, b) in snapshots.items() if a != b]
        total = sum(len(s[0]) for s in snapshots.values())
        return not differing, f"{len(commands)} commands, {total} files compared, differing: {differing or 'none'}"
    finally:
        shutil.rmtree(root, ignore_errors=True)


CRITERIA = [
    (1, "gradient correctness", criterion_gradients, 60),
    (2, "entropy bounds and Jensen", criterion_entropy_bounds, 5),
    (3, "loss-minimiser structure", criterion_minimiser, 5),
    (4, "macro-batch accumulation equivalence", criterion_accumulation, 30),
    (5, "Gaussian blobs end to end", criterion_blobs, 300),
    (6, "MNIST-1k sanity", criterion_mnist, 900),
    (7, "metric oracles", criterion_metrics, 5),
    (8, "patch segmentation", criterion_segmentation, 600),
    (9, "CLI determinism", criterion_determinism, None),
]


@pytest.mark.acceptance
@pytest.mark.parametrize("number,title,fn,budget", CRITERIA, ids=[f"criterion{c[0]}" for c in CRITERIA])
def test_criterion(number, title, fn, budget):
    passed, detail, seconds = timed(fn)
    assert report(number, title, passed, detail, seconds, budget), REPORT[-1]


if __name__ == "__main__":
    results = []
    for number, title, fn, budget in CRITERIA:
        passed, detail, seconds = timed(fn)
        results.append(report(number, title, passed, detail, seconds, budget))
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)

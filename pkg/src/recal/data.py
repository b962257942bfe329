"""Datasets, file formats, radiometric preprocessing and patch segmentation."""
from __future__ import annotations

import csv
import gzip
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DomainError, FormatError


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray | None = None
    stats: dict | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.samples):
                raise ContractError(f"{len(self.labels)} labels for {len(self.samples)} samples")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple:
        return self.samples.shape[1:]


# -- normalization -------------------------------------------------------

def compute_stats(samples: np.ndarray, per_channel: bool = False) -> dict:
    x = np.asarray(samples, dtype=np.float64)
    if per_channel:
        axes = tuple(i for i in range(x.ndim) if i != 1)
        mu, sigma = x.mean(axis=axes), x.std(axis=axes)
        if np.any(sigma == 0):
            raise DomainError(f"channel(s) {np.flatnonzero(sigma == 0).tolist()} are constant")
        return {"mu": mu.tolist(), "sigma": sigma.tolist(), "per_channel": True}
    mu, sigma = float(x.mean()), float(x.std())
    if sigma == 0:
        raise DomainError("dataset is constant; standard deviation is 0")
    return {"mu": mu, "sigma": sigma, "per_channel": False}


def apply_stats(samples: np.ndarray, stats: dict) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if stats.get("per_channel"):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        mu = np.asarray(stats["mu"]).reshape(shape)
        sigma = np.asarray(stats["sigma"]).reshape(shape)
    else:
        mu, sigma = stats["mu"], stats["sigma"]
    return (x - mu) / sigma


def normalize_dataset(d: Dataset, stats: dict | None = None, per_channel: bool = False) -> Dataset:
    """``(x - mu) / sigma`` with dataset-global (or per-channel) statistics.

    Pass ``stats`` to reuse training statistics at inference time.
    """
    if len(d) == 0:
        raise ContractError("cannot normalize an empty dataset")
    stats = stats if stats is not None else compute_stats(d.samples, per_channel)
    return replace(d, samples=apply_stats(d.samples, stats), stats=stats)


# -- IDX -----------------------------------------------------------------

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise FormatError(f"{path}: truncated dimension header at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    need = hdr + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at byte {len(raw)} (need {need})")
    return np.frombuffer(raw, dtype=np.uint8, count=need - hdr, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read IDX3 images (optionally gzipped) scaled to [0, 1], shape N x 1 x H x W."""
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES, images_path)
    samples = images.astype(np.float64)[:, None] / 255.0
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS, labels_path).astype(np.int64)
        if len(labels) != len(samples):
            raise FormatError(f"{len(labels)} labels in {labels_path} for {len(samples)} images")
    return Dataset(samples, labels)


def write_idx(array: np.ndarray, path, compress: bool | None = None) -> None:
    """Write a uint8 array as IDX1 (1-D) or IDX3 (3-D)."""
    arr = np.asarray(array, dtype=np.uint8)
    if arr.ndim not in (1, 3):
        raise ContractError("IDX writer supports 1-D labels or 3-D image stacks")
    magic = IDX_LABELS if arr.ndim == 1 else IDX_IMAGES
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    if compress if compress is not None else str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


# -- RCLT container ------------------------------------------------------

RCLT_MAGIC = b"RCLT"
RCLT_VERSION = 1
LABEL_MAGIC = b"LBLS"


def save_raw_tensor(d, path) -> None:
    """Write an RCLT file: magic, u32 version, u32 ndim, u32 dims, float64
    payload (all little-endian), optionally a LBLS block of i32 labels."""
    if isinstance(d, Dataset):
        arr, labels = d.samples, d.labels
    else:
        arr, labels = np.asarray(d, dtype=np.float64), None
    if arr.size == 0:
        raise ContractError("refusing to save an empty tensor")
    with open(path, "wb") as f:
        f.write(RCLT_MAGIC)
        f.write(struct.pack("<II", RCLT_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if labels is not None:
            f.write(LABEL_MAGIC)
            f.write(struct.pack("<I", len(labels)))
            f.write(np.asarray(labels, dtype="<i4").tobytes())


def read_raw_tensor(path) -> tuple[np.ndarray, np.ndarray | None]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != RCLT_MAGIC:
        raise FormatError(f"{path}: bad RCLT magic at byte 0")
    version, ndim = struct.unpack("<II", buf[4:12])
    if version != RCLT_VERSION:
        raise FormatError(f"{path}: unsupported RCLT version {version} at byte 4")
    if ndim == 0 or ndim > 16:
        raise FormatError(f"{path}: implausible ndim {ndim} at byte 8")
    off = 12 + 4 * ndim
    if len(buf) < off:
        raise FormatError(f"{path}: truncated dims at byte {len(buf)}")
    dims = struct.unpack(f"<{ndim}I", buf[12:off])
    count = 1
    for dim in dims:
        count *= dim
    nbytes = 8 * count
    if count == 0 or nbytes > len(buf) - off:
        raise FormatError(f"{path}: header claims {count} values but only {len(buf) - off} payload bytes follow byte {off}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
    pos = off + nbytes
    labels = None
    if pos < len(buf):
        if buf[pos:pos + 4] != LABEL_MAGIC or len(buf) < pos + 8:
            raise FormatError(f"{path}: bad label block at byte {pos}")
        (n,) = struct.unpack("<I", buf[pos + 4:pos + 8])
        if len(buf) != pos + 8 + 4 * n:
            raise FormatError(f"{path}: label block size mismatch at byte {pos + 4}")
        labels = np.frombuffer(buf, dtype="<i4", count=n, offset=pos + 8).astype(np.int64)
    return arr, labels


def load_raw_tensor(path) -> Dataset:
    arr, labels = read_raw_tensor(path)
    return Dataset(arr, labels)


# -- synthetic data ------------------------------------------------------

def blob_centers(K: int, d: int, separation: float) -> np.ndarray:
    """K centers with pairwise distance ``separation`` (simplex) when
    ``K <= d + 1``, otherwise a grid with that spacing."""
    if K == 1:
        return np.zeros((1, d))
    if K <= d + 1:
        V = np.eye(K) * separation / np.sqrt(2.0)
        V -= V.mean(axis=0)
        _, _, vt = np.linalg.svd(V)
        coords = V @ vt[:K - 1].T
        out = np.zeros((K, d))
        out[:, :K - 1] = coords
        return out
    side = int(np.ceil(K ** (1.0 / d)))
    grid = np.stack(np.meshgrid(*[np.arange(side)] * d, indexing="ij"), -1).reshape(-1, d)
    return grid[:K] * float(separation)


def synth_blobs(n_per_cluster: int, K: int, d: int = 2, separation: float = 12.0,
                sigma: float = 1.0, seed: int = 0) -> Dataset:
    """K isotropic Gaussian clusters, labelled by generating cluster."""
    if K < 1 or n_per_cluster < 1:
        raise ConfigError(f"need K >= 1 and n_per_cluster >= 1, got K={K}, n_per_cluster={n_per_cluster}")
    if not separation > 0 or not sigma > 0:
        raise ConfigError("separation and sigma must be > 0")
    rng = np.random.default_rng(seed)
    centers = blob_centers(K, d, separation)
    X = np.concatenate([c + sigma * rng.standard_normal((n_per_cluster, d)) for c in centers])
    y = np.repeat(np.arange(K), n_per_cluster)
    return Dataset(X, y)


def synth_texture_raster(size: int = 128, seed: int = 0, noise: float = 0.15):
    """3-band raster with four textured regions plus its region map.

    The regions are quadrants whose bands differ in mean level and in
    texture (stripes, checks, smooth, speckle).
    """
    rng = np.random.default_rng(seed)
    half = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    region = (yy >= half).astype(int) * 2 + (xx >= half).astype(int)
    textures = [
        0.5 + 0.5 * np.sin(2 * np.pi * xx / 6.0),
        0.5 + 0.5 * np.sign(np.sin(2 * np.pi * xx / 8.0) * np.sin(2 * np.pi * yy / 8.0)),
        np.full((size, size), 0.5),
        rng.random((size, size)),
    ]
    levels = np.array([[0.2, 0.5, 0.8], [0.7, 0.3, 0.4], [0.4, 0.8, 0.3], [0.6, 0.6, 0.6]])
    raster = np.zeros((3, size, size))
    for r in range(4):
        mask = region == r
        for b in range(3):
            raster[b][mask] = (levels[r, b] + 0.3 * (textures[r] - 0.5))[mask]
    raster += noise * rng.standard_normal(raster.shape)
    return raster, region


# -- radiometry ----------------------------------------------------------

def dn_to_radiance(dn, dn_max: float, l_min: float, l_max: float) -> np.ndarray:
    dn = np.asarray(dn, dtype=np.float64)
    if np.any(dn < 0) or np.any(dn > dn_max):
        raise DomainError(f"DN values must lie in [0, {dn_max}]")
    return l_min + dn * (l_max - l_min) / dn_max


def dn_to_toa(dn, meta: dict | None = None, **kw) -> np.ndarray:
    """Digital numbers to top-of-atmosphere reflectance.

    ``L = l_min + dn (l_max - l_min) / dn_max`` and
    ``rho = pi L d^2 / (esun sin(elevation))``, clamped to [0, 1.5].
    ``meta`` keys: dn_max (default 1023), l_min, l_max, esun,
    sun_elevation_deg, earth_sun_dist_au.
    """
    m = {"dn_max": 1023.0, **(meta or {}), **kw}
    if not m["esun"] > 0:
        raise ConfigError(f"esun must be > 0, got {m['esun']}")
    elev = float(m["sun_elevation_deg"])
    if not 0 < elev <= 90:
        raise ConfigError(f"sun elevation must be in (0, 90], got {elev}")
    L = dn_to_radiance(dn, m["dn_max"], m["l_min"], m["l_max"])
    rho = np.pi * L * m["earth_sun_dist_au"] ** 2 / (m["esun"] * np.sin(np.deg2rad(elev)))
    if np.any(rho < 0) or np.any(rho > 1.5):
        warnings.warn("reflectance outside [0, 1.5] was clamped", RuntimeWarning, stacklevel=2)
        rho = np.clip(rho, 0.0, 1.5)
    return rho


# -- patches and segmentation -------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    H: int
    W: int
    P: int
    S: int

    @property
    def n_rows(self) -> int:
        return (self.H - self.P) // self.S + 1

    @property
    def n_cols(self) -> int:
        return (self.W - self.P) // self.S + 1

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r * self.S, c * self.S) for r in range(self.n_rows) for c in range(self.n_cols)]

    def __len__(self):
        return self.n_rows * self.n_cols


def extract_patches(image, P: int, S: int) -> tuple[Dataset, PatchGrid]:
    """Row-major P x P patches of a C x H x W image with stride S."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ContractError(f"expected a C x H x W image, got shape {img.shape}")
    _, H, W = img.shape
    if P < 1 or S < 1:
        raise ContractError("patch size and stride must be >= 1")
    if P > H or P > W:
        raise ContractError(f"patch size {P} exceeds image {H}x{W}")
    grid = PatchGrid(H, W, P, S)
    win = sliding_window_view(img, (P, P), axis=(1, 2))[:, ::S, ::S][:, :grid.n_rows, :grid.n_cols]
    patches = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(len(grid), img.shape[0], P, P)
    return Dataset(patches), grid


@dataclass
class SegmentationMap:
    labels: np.ndarray
    K: int
    votes: np.ndarray = field(repr=False, default=None)

    def gray_levels(self) -> np.ndarray:
        """Label ``l`` maps to ``round(255 (l + 1) / K)``; uncovered pixels to 0."""
        out = np.zeros(self.labels.shape, dtype=np.uint8)
        covered = self.labels >= 0
        out[covered] = np.round(255.0 * (self.labels[covered] + 1) / self.K).astype(np.uint8)
        return out

    def write_pgm(self, path) -> None:
        H, W = self.labels.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{W} {H}\n255\n".encode())
            f.write(self.gray_levels().tobytes())

    def write_csv(self, path) -> None:
        write_label_grid_csv(self.labels, path)


def write_label_grid_csv(grid: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in np.asarray(grid, dtype=np.int64):
            w.writerow(row.tolist())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    return np.frombuffer(parts[4][:W * H], dtype=np.uint8).reshape(H, W)


def assemble_segmentation(grid: PatchGrid, patch_labels, K: int | None = None) -> SegmentationMap:
    """Paint each patch's label over its footprint.

    Overlaps are settled by majority vote; a tie goes to the label painted
    first in grid order. Pixels no patch covers get -1.
    """
    labels = np.asarray(getattr(patch_labels, "labels", patch_labels), dtype=np.int64).reshape(-1)
    if labels.size != len(grid):
        raise ContractError(f"{labels.size} patch labels for a grid of {len(grid)} patches")
    if K is None:
        K = int(getattr(patch_labels, "K", labels.max() + 1 if labels.size else 1))
    votes = np.zeros((grid.H, grid.W, K), dtype=np.int64)
    first = np.full((grid.H, grid.W, K), np.iinfo(np.int64).max, dtype=np.int64)
    P = grid.P
    for i, ((r, c), lab) in enumerate(zip(grid.origins, labels)):
        votes[r:r + P, c:c + P, lab] += 1
        view = first[r:r + P, c:c + P, lab]
        np.minimum(view, i, out=view)
    best = votes.max(axis=2, keepdims=True)
    # among the top-voted labels pick the one painted earliest
    order = np.where(votes == best, first, np.iinfo(np.int64).max)
    seg = np.argmin(order, axis=2)
    seg[best[..., 0] == 0] = -1
    return SegmentationMap(seg, K, votes)


def patch_label_grid(grid: PatchGrid, patch_labels) -> np.ndarray:
    labels = np.asarray(getattr(patch_labels, "labels", patch_labels), dtype=np.int64)
    return labels.reshape(grid.n_rows, grid.n_cols)

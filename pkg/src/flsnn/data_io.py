"""Datasets, IID client shards and spike-train input encoding."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

DATA_ROOT_ENV = "FLSNN_DATA_ROOT"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray  # (n, d), values in [0, 1]
    labels: np.ndarray   # (n,)
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise ValueError("samples must be (n, d) with one label per row")
        if len(self.labels) < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range for num_classes")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{what}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    samples = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(samples, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as uncompressed IDX."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / (name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name}[.gz] not found under {root}")


def load_idx_dir(root, num_classes: int = 10) -> Tuple[Dataset, Dataset]:
    """Load the MNIST file quartet from ``root``."""
    root = Path(root)
    train = load_idx(*(_find(root, n) for n in IDX_FILES["train"]), num_classes=num_classes)
    test = load_idx(*(_find(root, n) for n in IDX_FILES["test"]), num_classes=num_classes)
    return train, test


def data_root(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def prepare_digits_idx(root, test_fraction: float = 0.2, seed: int = 0) -> Path:
    """Write scikit-learn's bundled 8x8 handwritten digits as an MNIST-format quartet.

    Pixel intensities 0..16 are rescaled to 0..255. The split is stratified
    by a seeded shuffle, so the files are reproducible.
    """
    from sklearn.datasets import load_digits

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        test_idx.extend(idx[:int(round(test_fraction * len(idx)))])
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    for split, mask in (("train", ~test_mask), ("test", test_mask)):
        order = np.flatnonzero(mask)
        order = order[rng.permutation(len(order))]
        write_idx(images[order], labels[order], *(root / n for n in IDX_FILES[split]))
    return root


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def synth_blobs(num_classes: int, d: int, n_per_class: int, spread: float,
                seed: int, separation: float = 1.0) -> Dataset:
    """Gaussian blobs around seed-drawn class centres, clipped to [0, 1].

    Centres are drawn uniformly in [0.5 - separation/2, 0.5 + separation/2]^d.
    """
    if min(num_classes, d, n_per_class) <= 0 or spread < 0:
        raise ValueError("num_classes, d and n_per_class must be positive")
    rng = np.random.default_rng(seed)
    centers = 0.5 + separation * (rng.random((num_classes, d)) - 0.5)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    samples = centers[labels] + spread * rng.standard_normal((len(labels), d))
    order = rng.permutation(len(labels))
    return Dataset(np.clip(samples[order], 0.0, 1.0), labels[order], num_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])


# ---------------------------------------------------------------------------
# Partitioning and batching
# ---------------------------------------------------------------------------

@dataclass
class ClientShard:
    """Indices into the train set plus a batch cursor.

    Batches are drawn sequentially from a per-epoch shuffle of the shard;
    a batch that runs past the end of an epoch continues into the next
    epoch's shuffle. The shuffle for epoch ``e`` depends only on
    ``(seed, client_id, e)``.
    """

    indices: np.ndarray
    seed: int = 0
    client_id: int = 0
    cursor: int = 0

    def __len__(self):
        return len(self.indices)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.client_id, epoch, 0xBA7C4])
        return self.indices[rng.permutation(len(self.indices))]

    def next_batch(self, batch_size: int) -> np.ndarray:
        n = len(self.indices)
        if n == 0:
            raise ValueError(f"client {self.client_id} has an empty shard")
        out = np.empty(batch_size, dtype=np.int64)
        filled = 0
        while filled < batch_size:
            epoch, pos = divmod(self.cursor, n)
            take = min(batch_size - filled, n - pos)
            out[filled:filled + take] = self._epoch_order(epoch)[pos:pos + take]
            filled += take
            self.cursor += take
        return out


def partition_iid(n_samples: int, num_clients: int, seed: int) -> List[ClientShard]:
    """Random permutation split into shards whose sizes differ by at most one."""
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    if num_clients > n_samples:
        raise ValueError(f"cannot split {n_samples} samples across {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return [ClientShard(np.sort(part), seed=seed, client_id=c)
            for c, part in enumerate(np.array_split(perm, num_clients))]


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def encode_input(sample: np.ndarray, T: int, mode: str = "direct",
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-timestep input frames of shape (T, *sample.shape).

    ``direct`` repeats the sample as a constant current (a read-only
    broadcast view); ``poisson`` draws independent Bernoulli spikes with
    probability equal to each value.
    """
    sample = np.asarray(sample)
    if mode == "direct":
        return np.broadcast_to(sample, (T,) + sample.shape)
    if mode == "poisson":
        if rng is None:
            raise ValueError("poisson encoding needs an rng")
        return (rng.random((T,) + sample.shape) < sample).astype(sample.dtype if sample.dtype.kind == "f" else np.float32)
    raise ValueError(f"unknown encoding mode {mode!r}")

"""Dataset ingestion, non-i.i.d. partitioning, and synthetic benchmarks.

Images arrive as big-endian IDX files (gzip-compressed or plain), are
normalized to [0, 1], and are partitioned so every client sees only a fixed
subset of the labels. Cluster benchmarks derive a second population by
pixel inversion; regression benchmarks draw each cluster's target function
from a family of random smooth networks.
"""
from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import ConfigurationError, FormatError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049

# (train_per_class, test_per_class) regimes for per-client label subsets.
PRESETS = {
    "small": (50, 950),
    "medium": (200, 800),
    "large": (900, 300),
}

# Input dimension and target-network width for the synthetic regression
# family; part of the benchmark definition, not tunable per run.
SYNTH_INPUT_DIM = 2
SYNTH_TARGET_HIDDEN = 16


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus aligned targets.

    labels holds class indices (1-D integer array) for classification or a
    2-D real target matrix for regression.
    """

    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs contain non-finite entries")
        object.__setattr__(self, "inputs", x)
        y = np.asarray(self.labels)
        if y.ndim == 1:
            y = y.astype(np.int64)
        elif y.ndim == 2:
            y = y.astype(np.float64)
        else:
            raise ValueError(f"labels must be 1-D or 2-D, got shape {y.shape}")
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"labels rows {y.shape[0]} != inputs rows {x.shape[0]}")
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx: np.ndarray, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.inputs[idx], self.labels[idx], self.name if name is None else name
        )


@dataclass(frozen=True)
class PartitionSpec:
    """How to split one pooled dataset across clients.

    Every client receives labels_per_client distinct labels and, per label,
    exactly train_per_class training and test_per_class testing samples.
    """

    num_clients: int
    labels_per_client: int
    train_per_class: int
    test_per_class: int
    seed: int

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigurationError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.labels_per_client < 1:
            raise ConfigurationError(
                f"labels_per_client must be >= 1, got {self.labels_per_client}"
            )
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigurationError(
                f"per-class counts must be positive, got train {self.train_per_class}"
                f" / test {self.test_per_class}"
            )


def _read_binary(path) -> bytes:
    """Read a file, transparently decompressing gzip by magic bytes."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse a big-endian IDX image/label file pair into a dataset.

    Pixels are scaled by 1/255 into [0, 1]; labels stay integer class
    indices. Malformed headers or truncated payloads raise FormatError
    naming the offending field.
    """
    img = _read_binary(images_path)
    lab = _read_binary(labels_path)
    if len(img) < 16:
        raise FormatError(f"images header truncated: {len(img)} bytes in {images_path}")
    magic = int.from_bytes(img[0:4], "big")
    if magic != IMAGES_MAGIC:
        raise FormatError(f"images magic: expected {IMAGES_MAGIC}, got {magic}")
    n, rows, cols = (int.from_bytes(img[o : o + 4], "big") for o in (4, 8, 12))
    if len(img) != 16 + n * rows * cols:
        raise FormatError(
            f"images payload: expected {16 + n * rows * cols} bytes, got {len(img)}"
        )
    if len(lab) < 8:
        raise FormatError(f"labels header truncated: {len(lab)} bytes in {labels_path}")
    magic_l = int.from_bytes(lab[0:4], "big")
    if magic_l != LABELS_MAGIC:
        raise FormatError(f"labels magic: expected {LABELS_MAGIC}, got {magic_l}")
    n_l = int.from_bytes(lab[4:8], "big")
    if len(lab) != 8 + n_l:
        raise FormatError(f"labels payload: expected {8 + n_l} bytes, got {len(lab)}")
    if n != n_l:
        raise FormatError(f"count mismatch: {n} images vs {n_l} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    name = Path(images_path).name
    for suffix in (".gz", ".idx3-ubyte", "-idx3-ubyte"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels, name)


def partition_noniid(
    ds: LabeledDataset, spec: PartitionSpec
) -> list[tuple[LabeledDataset, LabeledDataset]]:
    """Split a pooled dataset into per-client non-i.i.d. (train, test) pairs.

    Labels are assigned round-robin from a seeded shuffle so coverage across
    clients is as even as possible; per (client, label) the train and test
    samples are drawn without replacement from that label's pool, so they
    are disjoint within the client. Different clients may share samples.
    """
    if ds.labels.ndim != 1:
        raise ConfigurationError("partition_noniid needs integer class labels")
    classes = np.unique(ds.labels)
    if spec.labels_per_client > classes.size:
        raise ConfigurationError(
            f"labels_per_client {spec.labels_per_client} exceeds {classes.size} classes"
        )
    need = spec.train_per_class + spec.test_per_class
    pools = {int(c): np.flatnonzero(ds.labels == c) for c in classes}
    for c, pool in pools.items():
        if pool.size < need:
            raise ConfigurationError(
                f"label {c} has {pool.size} samples, need {need} per client"
            )
    gen = rng.stream(spec.seed, rng.PARTITION)
    perm = gen.permutation(classes.size)
    out = []
    lpc = spec.labels_per_client
    for i in range(spec.num_clients):
        assigned = [int(classes[perm[(i * lpc + j) % classes.size]]) for j in range(lpc)]
        train_idx, test_idx = [], []
        for c in assigned:
            pool = pools[c]
            picked = pool[gen.choice(pool.size, size=need, replace=False)]
            train_idx.append(picked[: spec.train_per_class])
            test_idx.append(picked[spec.train_per_class :])
        train = ds.subset(np.concatenate(train_idx), f"{ds.name}/client{i}/train")
        test = ds.subset(np.concatenate(test_idx), f"{ds.name}/client{i}/test")
        out.append((train, test))
    return out


def make_cluster_dataset(base: LabeledDataset, variant: str) -> LabeledDataset:
    """Derive a cluster population from a pixel dataset.

    "identity" returns the dataset unchanged; "inverted" negates every
    pixel. Inversion is computed on the 255-step pixel grid so that
    inverting twice reproduces the original floats bit for bit (plain
    1 - p loses low mantissa bits for small pixel values).
    """
    if variant == "identity":
        return base
    if variant == "inverted":
        inv = (255.0 - base.inputs * 255.0) / 255.0
        return LabeledDataset(inv, base.labels, f"{base.name}~inverted")
    raise ConfigurationError(f"unknown cluster variant: {variant!r}")


def synthetic_regression(
    K: int,
    clients_per_cluster: int,
    n: int,
    noise_sigma: float,
    seed: int,
) -> tuple[list[LabeledDataset], list[int]]:
    """Generate K clusters of regression clients with shared smooth targets.

    Each cluster k draws a random two-layer tanh network f_k with weights
    uniform in [-1, 1]; each of its clients then samples n inputs uniform on
    [-1, 1]^2 and observes y = f_k(x) + N(0, noise_sigma^2). Returns the
    client datasets in cluster-major order together with the ground-truth
    cluster id per client.
    """
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    if clients_per_cluster < 1:
        raise ConfigurationError(
            f"clients_per_cluster must be >= 1, got {clients_per_cluster}"
        )
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    if noise_sigma < 0.0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    gen = rng.stream(seed, rng.DATA)
    d, h = SYNTH_INPUT_DIM, SYNTH_TARGET_HIDDEN
    targets = []
    for _ in range(K):
        w1 = gen.uniform(-1.0, 1.0, (d, h))
        b1 = gen.uniform(-1.0, 1.0, h)
        w2 = gen.uniform(-1.0, 1.0, (h, 1))
        b2 = gen.uniform(-1.0, 1.0, 1)
        targets.append((w1, b1, w2, b2))
    datasets, ids = [], []
    for k in range(K):
        w1, b1, w2, b2 = targets[k]
        for c in range(clients_per_cluster):
            x = gen.uniform(-1.0, 1.0, (n, d))
            y = np.tanh(x @ w1 + b1) @ w2 + b2
            if noise_sigma > 0.0:
                y = y + noise_sigma * gen.standard_normal((n, 1))
            datasets.append(
                LabeledDataset(x, y, f"synth/cluster{k}/client{k * clients_per_cluster + c}")
            )
            ids.append(k)
    return datasets, ids

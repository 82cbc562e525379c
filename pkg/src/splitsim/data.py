"""Datasets, non-iid partitioning, train/test splits, participation sampling.

Everything here is construction-time: products are immutable numpy arrays and
plain dataclasses, deterministic under the named seed substreams.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .seeding import SHUFFLE_CLIENT, STREAM_DATA, STREAM_PARTICIPATION, substream

log = logging.getLogger(__name__)

CLASSIFY = "classify"
REGRESS = "regress"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class PartitionError(ValueError):
    """No usable clients left after exclusions."""


class IdxParseError(ValueError):
    """Malformed IDX file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    x: np.ndarray            # [n, dim] float64
    y: np.ndarray            # [n] int64 labels or [n, k] float64 targets
    task: str                # CLASSIFY or REGRESS
    n_classes: int = 0

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class ClientDataset:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    @property
    def n_test(self) -> int:
        return self.test_x.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str              # "iid" | "dirichlet" | "pathological-shards"
    n_clients: int
    seed: int
    alpha: Optional[float] = None
    shards_per_client: int = 2

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "pathological-shards"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "dirichlet" and (self.alpha is None or self.alpha <= 0):
            raise ValueError("dirichlet partition needs alpha > 0")
        if self.n_clients < 1:
            raise ValueError("need at least one client")


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

def gaussian_mixture(n: int, n_classes: int, dim: int, seed: int,
                     separation: float = 3.0, noise: float = 1.0) -> Dataset:
    """Globally balanced C-class mixture: unit-ball means scaled apart."""
    if n < n_classes * 10:
        raise ValueError(f"need n >= 10*C, got n={n}, C={n_classes}")
    if dim < 1 or n_classes < 2:
        raise ValueError(f"degenerate dims: C={n_classes}, dim={dim}")
    rng = substream(seed, STREAM_DATA, 0)
    means = rng.normal(size=(n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    per_class = np.full(n_classes, n // n_classes)
    per_class[: n % n_classes] += 1
    y = np.repeat(np.arange(n_classes), per_class)
    x = means[y] + noise * rng.normal(size=(n, dim))
    order = rng.permutation(n)
    return Dataset(x[order], y[order].astype(np.int64), CLASSIFY, n_classes)


def linear_regression(n: int, dim: int, seed: int, noise: float = 0.1) -> Dataset:
    if dim < 1 or n < 10:
        raise ValueError(f"degenerate dims: n={n}, dim={dim}")
    rng = substream(seed, STREAM_DATA, 1)
    w = rng.normal(size=(dim, 1))
    b = rng.normal()
    x = rng.normal(size=(n, dim))
    y = x @ w + b + noise * rng.normal(size=(n, 1))
    return Dataset(x, y, REGRESS)


def generate_synthetic(kind: str, n: int, seed: int, **params) -> Dataset:
    if kind == "gaussian-mixture-classify":
        return gaussian_mixture(n, seed=seed, **params)
    if kind == "linear-regression":
        return linear_regression(n, seed=seed, **params)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# IDX container format (big-endian, magic 0x00000803 / 0x00000801)
# ---------------------------------------------------------------------------

def _read_be32(f, path: str) -> int:
    offset = f.tell()
    raw = f.read(4)
    if len(raw) < 4:
        raise IdxParseError(f"{path}: truncated header", offset)
    return struct.unpack(">I", raw)[0]


def load_idx_images(path) -> np.ndarray:
    """Images as [count, rows*cols] float64 rows scaled to [0, 1]."""
    with open(str(path), "rb") as f:
        magic = _read_be32(f, str(path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxParseError(f"{path}: bad image magic 0x{magic:08x}", 0)
        count = _read_be32(f, str(path))
        rows = _read_be32(f, str(path))
        cols = _read_be32(f, str(path))
        offset = f.tell()
        raw = f.read(count * rows * cols)
        if len(raw) < count * rows * cols:
            raise IdxParseError(f"{path}: truncated pixel data", offset + len(raw))
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    return pixels.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with open(str(path), "rb") as f:
        magic = _read_be32(f, str(path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxParseError(f"{path}: bad label magic 0x{magic:08x}", 0)
        count = _read_be32(f, str(path))
        offset = f.tell()
        raw = f.read(count)
        if len(raw) < count:
            raise IdxParseError(f"{path}: truncated label data", offset + len(raw))
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path, labels_path) -> Dataset:
    x = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if x.shape[0] != y.shape[0]:
        raise IdxParseError(
            f"image count {x.shape[0]} != label count {y.shape[0]}", 0)
    return Dataset(x, y, CLASSIFY, int(y.max()) + 1 if y.size else 0)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def _assign_indices(dataset: Dataset, spec: PartitionSpec,
                    rng: np.random.Generator) -> list[np.ndarray]:
    n = dataset.n
    n_clients = spec.n_clients
    if spec.scheme == "iid":
        perm = rng.permutation(n)
        return [np.sort(chunk) for chunk in np.array_split(perm, n_clients)]
    if spec.scheme == "dirichlet":
        buckets: list[list[int]] = [[] for _ in range(n_clients)]
        for c in range(dataset.n_classes):
            idx_c = np.flatnonzero(dataset.y == c)
            shares = rng.dirichlet(np.full(n_clients, spec.alpha))
            owners = rng.choice(n_clients, size=idx_c.size, p=shares)
            for client in range(n_clients):
                buckets[client].extend(idx_c[owners == client])
        return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    # pathological-shards: label-sorted data carved into N*k shards
    order = np.argsort(dataset.y, kind="stable")
    shards = np.array_split(order, n_clients * spec.shards_per_client)
    shard_order = rng.permutation(len(shards))
    out = []
    for client in range(n_clients):
        mine = shard_order[client * spec.shards_per_client:
                           (client + 1) * spec.shards_per_client]
        out.append(np.sort(np.concatenate([shards[s] for s in mine])))
    return out


def partition(dataset: Dataset, spec: PartitionSpec, batch_size: int,
              train_fraction: float = 0.9) -> list[ClientDataset]:
    """Carve the dataset across clients, then split each client 90/10.

    Clients whose train share cannot fill one batch are dropped with a
    warning; partitioning fails only if nobody is left.
    """
    if spec.n_clients > dataset.n // max(batch_size, 1):
        raise PartitionError(
            f"{spec.n_clients} clients cannot each fill a batch of {batch_size} "
            f"from {dataset.n} samples")
    rng = substream(spec.seed, STREAM_DATA, 2)
    clients: list[ClientDataset] = []
    dropped = []
    for client_id, idx in enumerate(_assign_indices(dataset, spec, rng)):
        idx = idx[rng.permutation(idx.size)]
        n_train = int(train_fraction * idx.size)
        train, test = idx[:n_train], idx[n_train:]
        if n_train < batch_size:
            dropped.append(client_id)
            continue
        clients.append(ClientDataset(
            client_id,
            dataset.x[train], dataset.y[train],
            dataset.x[test], dataset.y[test]))
    if dropped:
        log.warning("dropped %d/%d clients with train share under one batch (%s)",
                    len(dropped), spec.n_clients, dropped[:10])
    if not clients:
        raise PartitionError("every client was dropped; partition unusable")
    return clients


def label_histogram(y: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(y, minlength=n_classes)


def write_partition_manifest(path, clients: list[ClientDataset], n_classes: int) -> None:
    """CSV manifest: client_id, class, count (train+test combined)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["client_id", "class", "count"])
        for client in clients:
            counts = (label_histogram(client.train_y, n_classes)
                      + label_histogram(client.test_y, n_classes))
            for c in range(n_classes):
                writer.writerow([client.client_id, c, int(counts[c])])


# ---------------------------------------------------------------------------
# Participation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParticipationPlan:
    rate: float
    rounds: tuple  # per round: sorted tuple of client ids

    def participants(self, round_index: int) -> tuple:
        return self.rounds[round_index]


def attendance_count(n_clients: int, rate: float) -> int:
    # round-half-up with a floor of one participant
    return max(1, int(np.floor(rate * n_clients + 0.5)))


def sample_participants(n_clients: int, rate: float, rounds: int, seed: int) -> ParticipationPlan:
    """Uniform without replacement per round, independent across rounds."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"attendance rate must be in (0, 1], got {rate}")
    rng = substream(seed, STREAM_PARTICIPATION)
    k = attendance_count(n_clients, rate)
    plan = tuple(
        tuple(sorted(rng.choice(n_clients, size=k, replace=False).tolist()))
        for _ in range(rounds))
    return ParticipationPlan(rate, plan)


# ---------------------------------------------------------------------------
# Mini-batch stream
# ---------------------------------------------------------------------------

@dataclass
class BatchStream:
    """Without-replacement epoch iterator over one client's train split.

    Reshuffles at each epoch boundary; a trailing partial batch is folded
    into the next epoch so every drawn batch is full-size.
    """

    x: np.ndarray
    y: np.ndarray
    batch_size: int
    rng: np.random.Generator
    _order: np.ndarray = field(init=False, repr=False)
    _cursor: int = field(init=False, default=0)

    def __post_init__(self):
        if self.x.shape[0] < self.batch_size:
            raise ValueError(
                f"client holds {self.x.shape[0]} samples; cannot fill a batch "
                f"of {self.batch_size}")
        self._order = self.rng.permutation(self.x.shape[0])

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cursor + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.x.shape[0])
            self._cursor = 0
        idx = self._order[self._cursor: self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.x[idx], self.y[idx]


def client_batch_stream(client: ClientDataset, batch_size: int, shuffle_seed: int) -> BatchStream:
    rng = substream(shuffle_seed, SHUFFLE_CLIENT, client.client_id)
    return BatchStream(client.train_x, client.train_y, batch_size, rng)

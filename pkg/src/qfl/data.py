"""Synthetic disc/ring image data, client partitioning, and the QFLD dataset file."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, FormatError, LengthError, VersionError
from .model import Batch

DATASET_MAGIC = b"QFLD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIHHH")  # magic, version, count, C, H, W


@dataclass(frozen=True)
class SyntheticConfig:
    samples_per_class: int = 200
    image_size: tuple[int, int] = (16, 16)
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError(f"image_size must be at least 8x8, got {h}x{w}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class Dataset:
    """Labelled images ``[n, 1, H, W]``.

    ``ids`` tracks each sample's index in the originally generated dataset so
    partitions and splits can be checked as exact set partitions.
    """

    inputs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, index: np.ndarray) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.inputs[index], self.labels[index], self.ids[index])

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)

    def bitwise_equal(self, other: "Dataset") -> bool:
        return (
            self.inputs.shape == other.inputs.shape
            and self.inputs.tobytes() == other.inputs.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True)
class Partition:
    client_shards: list[Dataset]

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.client_shards]


def templates(image_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free class images: a centred disc (class 0) and a ring (class 1)."""
    h, w = image_size
    size = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
    inner, outer = size / 4.0, size / 3.0
    disc = (dist < inner).astype(np.float64)
    ring = ((dist >= inner) & (dist < outer)).astype(np.float64)
    return disc, ring


def generate_dataset(cfg: SyntheticConfig) -> Dataset:
    h, w = cfg.image_size
    n = cfg.samples_per_class
    disc, ring = templates(cfg.image_size)
    images = np.concatenate([np.broadcast_to(disc, (n, h, w)), np.broadcast_to(ring, (n, h, w))])
    images = images.astype(np.float64, copy=True)
    labels = np.repeat(np.array([0, 1], dtype=np.int64), n)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed)))
        images += rng.normal(0.0, cfg.noise_sigma, size=images.shape)
        np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images[:, None, :, :], labels, np.arange(2 * n, dtype=np.int64))


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def _check_clients(dataset: Dataset, num_clients: int) -> None:
    if num_clients < 1:
        raise ConfigError(f"num_clients must be >= 1, got {num_clients}")
    if num_clients > len(dataset):
        raise ConfigError(f"num_clients={num_clients} exceeds dataset size {len(dataset)}")


def _shard_sizes(n: int, num_clients: int) -> list[int]:
    base, extra = divmod(n, num_clients)
    return [base + (1 if i < extra else 0) for i in range(num_clients)]


def partition_iid(dataset: Dataset, num_clients: int, seed: int) -> Partition:
    """Shuffle, then cut into contiguous shards whose sizes differ by at most one."""
    _check_clients(dataset, num_clients)
    order = _rng(seed, 1).permutation(len(dataset))
    shards, pos = [], 0
    for size in _shard_sizes(len(dataset), num_clients):
        shards.append(dataset.take(order[pos:pos + size]))
        pos += size
    return Partition(shards)


def partition_label_skew(dataset: Dataset, num_clients: int, skew: float, seed: int) -> Partition:
    """A fraction ``skew`` of each shard comes from its dominant class, the rest IID.

    Dominant classes are assigned round-robin (client i -> class i mod 2).  When
    the dominant pool runs dry the shortfall is filled from the IID remainder.
    """
    if not 0.0 <= skew <= 1.0:
        raise ConfigError(f"skew must be in [0, 1], got {skew}")
    _check_clients(dataset, num_clients)
    if skew == 0.0:
        return partition_iid(dataset, num_clients, seed)
    rng = _rng(seed, 2)
    classes = np.unique(dataset.labels)
    pools = {int(c): list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in classes}
    sizes = _shard_sizes(len(dataset), num_clients)
    picked: list[list[int]] = []
    for i, size in enumerate(sizes):
        pool = pools[int(classes[i % len(classes)])]
        k = min(int(np.floor(skew * size + 0.5)), len(pool))
        picked.append(pool[:k])
        del pool[:k]
    rest = np.array(sorted(ix for pool in pools.values() for ix in pool), dtype=np.int64)
    rest = rng.permutation(rest)
    shards, pos = [], 0
    for i, size in enumerate(sizes):
        need = size - len(picked[i])
        index = np.array(picked[i] + list(rest[pos:pos + need]), dtype=np.int64)
        pos += need
        shards.append(dataset.take(index))
    return Partition(shards)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; both halves keep the original sample order."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = _rng(seed, 3)
    test_idx = []
    for c in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == c)
        k = int(np.floor(test_fraction * len(members) + 0.5))
        test_idx.append(rng.permutation(members)[:k])
    test = np.sort(np.concatenate(test_idx))
    train = np.setdiff1d(np.arange(len(dataset)), test)
    if len(test) == 0 or len(train) == 0:
        raise ConfigError(
            f"test_fraction={test_fraction} on {len(dataset)} samples leaves an empty split"
        )
    return dataset.take(train), dataset.take(test)


# --------------------------------------------------------------------------- QFLD files

def dumps_dataset(dataset: Dataset) -> bytes:
    """Header, then all images as little-endian float64, then one label byte per sample."""
    n, c, h, w = dataset.inputs.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w)
    pixels = np.ascontiguousarray(dataset.inputs, dtype="<f8").tobytes()
    labels = np.asarray(dataset.labels, dtype=np.uint8).tobytes()
    return header + pixels + labels


def loads_dataset(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise LengthError(f"dataset file too short for header ({len(data)} bytes)")
    magic, version, n, c, h, w = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    npix = n * c * h * w
    expected = _HEADER.size + 8 * npix + n
    if len(data) != expected:
        raise LengthError(f"dataset declares {expected} bytes, got {len(data)}")
    pixels = np.frombuffer(data, dtype="<f8", count=npix, offset=_HEADER.size)
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size + 8 * npix)
    return Dataset(
        pixels.astype(np.float64).reshape(n, c, h, w),
        labels.astype(np.int64),
        np.arange(n, dtype=np.int64),
    )


def save_dataset(dataset: Dataset, path: str | Path | BinaryIO) -> None:
    payload = dumps_dataset(dataset)
    if hasattr(path, "write"):
        path.write(payload)  # type: ignore[union-attr]
    else:
        Path(path).write_bytes(payload)


def load_dataset(path: str | Path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())

"""Bags of tile features: data model, synthetic generator, pre-filter, file I/O."""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"FOCB"
FORMAT_VERSION = 1


class BagFormatError(ValueError):
    """Base class for feature-file errors."""


class BadMagicError(BagFormatError):
    pass


class VersionMismatchError(BagFormatError):
    pass


class TruncatedFileError(BagFormatError):
    pass


class DimensionMismatchError(BagFormatError):
    pass


@dataclass(eq=False)
class Bag:
    """One slide: ``n_real`` tiles with features, pixel coordinates and a label.

    ``source_index`` records which rows of the original (unfiltered) bag each
    row came from; it is the identity for freshly generated or loaded bags.
    """

    id: str
    features: np.ndarray
    coords: np.ndarray
    label: int
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.id!r}: features must be a non-empty N x d matrix")
        if self.coords.shape != (self.features.shape[0], 2):
            raise ValueError(
                f"bag {self.id!r}: coords shape {self.coords.shape} does not match {self.features.shape[0]} tiles"
            )
        self.label = int(self.label)
        if self.label < 0:
            raise ValueError(f"bag {self.id!r}: negative label")
        if self.source_index is None:
            self.source_index = np.arange(self.features.shape[0])

    @property
    def n_real(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def equals(self, other: "Bag") -> bool:
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.coords, other.coords)
        )


@dataclass(eq=False)
class Dataset:
    bags: list[Bag]
    num_classes: int = 2
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.bags:
            raise ValueError("dataset has no bags")
        dims = {b.dim for b in self.bags}
        if len(dims) != 1:
            raise DimensionMismatchError(f"bags disagree on feature dimension: {sorted(dims)}")
        ids = [b.id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bag ids")
        for b in self.bags:
            if b.label >= self.num_classes:
                raise ValueError(f"bag {b.id!r}: label {b.label} >= num_classes {self.num_classes}")
        known = set(ids)
        seen: set[str] = set()
        for name, members in self.splits.items():
            missing = set(members) - known
            if missing:
                raise ValueError(f"split {name!r} references unknown ids, e.g. {sorted(missing)[0]!r}")
            if seen & set(members):
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= set(members)
        self._by_id = {b.id: b for b in self.bags}

    @property
    def feature_dim(self) -> int:
        return self.bags[0].dim

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self) -> Iterator[Bag]:
        return iter(self.bags)

    def __getitem__(self, bag_id: str) -> Bag:
        return self._by_id[bag_id]

    def split(self, name: str) -> list[Bag]:
        return [self._by_id[i] for i in self.splits.get(name, [])]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.splits == other.splits
            and len(self.bags) == len(other.bags)
            and all(a.equals(b) for a, b in zip(self.bags, other.bags))
        )


# per-bag planted evidence indices, keyed by bag id
EvidenceTruth = dict[str, np.ndarray]


@dataclass
class SynthConfig:
    n_slides: int = 200
    tiles_min: int = 64
    tiles_max: int = 128
    d: int = 32
    num_classes: int = 2
    evidence_min: int = 4
    evidence_max: int = 8
    evidence_separation: float = 8.0
    noise_sigma: float = 1.0
    spatial_cluster_radius: float = 512.0
    tile_size: float = 256.0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes != 2:
            raise ValueError("only two classes are supported")
        if self.n_slides < 2:
            raise ValueError("n_slides must be at least 2")
        if not 1 <= self.tiles_min <= self.tiles_max:
            raise ValueError(f"bad tile range [{self.tiles_min}, {self.tiles_max}]")
        if not 1 <= self.evidence_min <= self.evidence_max:
            raise ValueError(f"bad evidence range [{self.evidence_min}, {self.evidence_max}]")
        if self.evidence_max > self.tiles_min:
            raise ValueError("evidence_max must not exceed tiles_min")
        if self.evidence_separation < 0 or self.noise_sigma <= 0 or self.spatial_cluster_radius <= 0:
            raise ValueError("separation must be >= 0; sigma and cluster radius must be > 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or not math.isclose(sum(fr), 1.0):
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fr}")


def _f32(x: np.ndarray) -> np.ndarray:
    # keep in-memory values on the f32 grid so the file round trip is exact
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def generate_synthetic(config: SynthConfig) -> tuple[Dataset, EvidenceTruth]:
    """Planted-evidence bags: a few class-specific tiles hidden among background.

    Background tiles are N(0, sigma^2 I). A class-``y`` bag plants its evidence
    tiles at ``(2y - 1) * separation / 2`` along feature axis 0, plus the same
    noise, spatially clustered around a random bag-specific centre.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_slides
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    sigma = config.noise_sigma
    bags: list[Bag] = []
    truth: EvidenceTruth = {}
    width = len(str(n - 1))
    for s in range(n):
        bag_id = f"slide{s:0{width}d}"
        y = int(labels[s])
        n_tiles = int(rng.integers(config.tiles_min, config.tiles_max + 1))
        n_ev = int(rng.integers(config.evidence_min, config.evidence_max + 1))
        feats = rng.normal(0.0, sigma, size=(n_tiles, config.d))
        ev = np.sort(rng.choice(n_tiles, size=n_ev, replace=False))
        feats[ev, 0] += (2 * y - 1) * config.evidence_separation / 2.0

        extent = config.tile_size * math.sqrt(4.0 * n_tiles)
        coords = rng.uniform(0.0, extent, size=(n_tiles, 2))
        r = config.spatial_cluster_radius
        centre = rng.uniform(min(r, extent / 2), max(extent - r, extent / 2), size=2)
        radius = r * np.sqrt(rng.uniform(0.0, 1.0, size=n_ev))
        theta = rng.uniform(0.0, 2 * math.pi, size=n_ev)
        coords[ev] = centre + np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)

        bags.append(Bag(bag_id, _f32(feats), _f32(coords), y))
        truth[bag_id] = ev

    splits = _stratified_splits([b.id for b in bags], labels, config.split_fractions, rng)
    return Dataset(bags, num_classes=2, splits=splits), truth


def _stratified_splits(ids, labels, fractions, rng) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        members = [i for i, lab in zip(ids, labels) if lab == c]
        order = rng.permutation(len(members))
        n_train = int(round(fractions[0] * len(members)))
        n_val = int(round(fractions[1] * len(members)))
        for rank, j in enumerate(order):
            key = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            out[key].append(members[j])
    return {k: sorted(v) for k, v in out.items()}


def prefilter_topnorm(bag: Bag, n_cap: int) -> Bag:
    """Keep the ``n_cap`` tiles with the largest feature L2 norm.

    Kept rows are ordered by descending norm, ties by original index.
    Bags with at most ``n_cap`` tiles are returned unchanged.
    """
    if n_cap < 1:
        raise ValueError("n_cap must be >= 1")
    if bag.n_real <= n_cap:
        return bag
    norms = np.linalg.norm(bag.features, axis=1)
    order = np.lexsort((np.arange(bag.n_real), -norms))[:n_cap]
    return replace(
        bag,
        features=bag.features[order],
        coords=bag.coords[order],
        source_index=bag.source_index[order],
    )


def remap_evidence(bag: Bag, original_indices: np.ndarray) -> np.ndarray:
    """Positions in a (possibly filtered) bag of the given original tile indices.

    Indices that were filtered out are dropped.
    """
    pos = {int(src): i for i, src in enumerate(bag.source_index)}
    return np.array(sorted(pos[int(i)] for i in original_indices if int(i) in pos), dtype=np.int64)


def prefilter_dataset(
    dataset: Dataset, n_cap: int, truth: EvidenceTruth | None = None
) -> tuple[Dataset, EvidenceTruth | None]:
    bags = [prefilter_topnorm(b, n_cap) for b in dataset.bags]
    out = Dataset(bags, dataset.num_classes, dict(dataset.splits))
    if truth is None:
        return out, None
    return out, {b.id: remap_evidence(b, truth[b.id]) for b in bags if b.id in truth}


def adaptive_k(n_real: int, alpha: float, k_min: int) -> int:
    """Per-slide budget ``max(k_min, floor(alpha * n_real))``."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if k_min < 1:
        raise ValueError("k_min must be >= 1")
    # the small epsilon keeps e.g. 0.03 * 1000 from flooring to 29
    return max(int(k_min), int(math.floor(alpha * n_real + 1e-9)))


# ---------------------------------------------------------------- file format

_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")


def save_bags(path, dataset: Dataset) -> None:
    """Write the binary feature file. Values are stored as float32."""
    d = dataset.feature_dim
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, dataset.num_classes, d)]
    for bag in dataset.bags:
        if bag.dim != d:
            raise DimensionMismatchError(f"bag {bag.id!r} has d={bag.dim}, expected {d}")
        raw_id = bag.id.encode("utf-8")
        chunks.append(_U32.pack(len(raw_id)))
        chunks.append(raw_id)
        chunks.append(struct.pack("<II", bag.n_real, bag.label))
        chunks.append(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(bag.coords, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _take(buf: memoryview, pos: int, n: int, what: str) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise TruncatedFileError(f"file truncated while reading {what} at byte {pos}")
    return buf[pos : pos + n], pos + n


def load_bags(path, expect_dim: int | None = None) -> Dataset:
    """Read a feature file written by :func:`save_bags` (splits left empty)."""
    buf = memoryview(Path(path).read_bytes())
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a bag feature file")
    head, pos = _take(buf, 0, _HEADER.size, "header")
    _, version, n_classes, d = _HEADER.unpack(head)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if expect_dim is not None and d != expect_dim:
        raise DimensionMismatchError(f"{path}: feature dimension {d}, expected {expect_dim}")
    bags = []
    while pos < len(buf):
        raw, pos = _take(buf, pos, 4, "id length")
        (id_len,) = _U32.unpack(raw)
        raw, pos = _take(buf, pos, id_len, "bag id")
        bag_id = bytes(raw).decode("utf-8")
        raw, pos = _take(buf, pos, 8, "bag header")
        n_real, label = struct.unpack("<II", raw)
        raw, pos = _take(buf, pos, 4 * n_real * d, f"features of {bag_id!r}")
        feats = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n_real, d)
        raw, pos = _take(buf, pos, 8 * n_real, f"coords of {bag_id!r}")
        coords = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n_real, 2)
        bags.append(Bag(bag_id, feats, coords, label))
    return Dataset(bags, num_classes=n_classes)


def save_manifest(path, splits: dict[str, list[str]]) -> None:
    data = {k: list(splits.get(k, [])) for k in ("train", "val", "test")}
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_manifest(path) -> dict[str, list[str]]:
    data = json.loads(Path(path).read_text())
    return {k: list(data.get(k, [])) for k in ("train", "val", "test")}


def save_evidence(path, truth: EvidenceTruth) -> None:
    Path(path).write_text(json.dumps({k: [int(i) for i in v] for k, v in sorted(truth.items())}) + "\n")


def load_evidence(path) -> EvidenceTruth:
    return {k: np.asarray(v, dtype=np.int64) for k, v in json.loads(Path(path).read_text()).items()}


BAGS_FILE = "bags.focb"
MANIFEST_FILE = "splits.json"
EVIDENCE_FILE = "evidence.json"


def save_dataset(directory, dataset: Dataset, truth: EvidenceTruth | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_bags(directory / BAGS_FILE, dataset)
    save_manifest(directory / MANIFEST_FILE, dataset.splits)
    if truth is not None:
        save_evidence(directory / EVIDENCE_FILE, truth)


def load_dataset(directory) -> tuple[Dataset, EvidenceTruth | None]:
    directory = Path(directory)
    ds = load_bags(directory / BAGS_FILE)
    ds = Dataset(ds.bags, ds.num_classes, load_manifest(directory / MANIFEST_FILE))
    ev = directory / EVIDENCE_FILE
    return ds, (load_evidence(ev) if ev.exists() else None)


def bag_hash(bag_id: str) -> int:
    return zlib.crc32(bag_id.encode("utf-8"))

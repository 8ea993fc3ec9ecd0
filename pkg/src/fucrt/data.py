"""Synthetic blob datasets, IDX loading, and client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, FormatError, ProtocolError
from .rng import derive_seed


@dataclass
class LabeledDataset:
    """Feature matrix with integer class labels.

    ``original_labels`` is set once labels have been rewritten for
    unlearning, so evaluation can still see the pre-transformation truth.
    """

    features: np.ndarray  # N x input_dim, float64
    labels: np.ndarray  # N, int64
    class_count: int
    original_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels) or len(self.labels) < 1:
            raise ConfigurationError("features and labels must be non-empty and aligned")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigurationError("labels out of range for class count")
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError("non-finite feature values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            original_labels=None if self.original_labels is None else self.original_labels[indices],
        )


@dataclass
class Partition:
    """Disjoint per-client index lists covering a parent dataset."""

    client_indices: list[np.ndarray]

    def __post_init__(self):
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)


@dataclass(frozen=True)
class BlobSpec:
    class_count: int
    samples_per_class: int
    input_dim: int
    centers: np.ndarray  # C x input_dim
    spread: float
    seed: int

    def __post_init__(self):
        if self.spread <= 0.0:
            raise ConfigurationError("blob spread must be positive")
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.shape != (self.class_count, self.input_dim):
            raise ConfigurationError("centers shape must be class_count x input_dim")
        dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() <= 0.0:
            raise ConfigurationError("class centers must be pairwise distinct")


def neighbor_structured_centers(
    class_count: int, input_dim: int, near: float = 1.0, far: float = 10.0
) -> tuple[np.ndarray, dict[int, int]]:
    """Class centers where every class has a unique geometric nearest neighbor.

    Classes are laid out in pairs: pair p sits at ``far * e_p`` with the two
    members offset by +-near/2 along the same axis. An odd class count puts
    the leftover class 1.25*near past the last complete pair (its unique
    nearest neighbor is that pair's outer member). Returns (centers,
    neighbor map).
    """
    if class_count < 2:
        raise ConfigurationError("need at least two classes for a neighbor layout")
    n_pairs = class_count // 2
    if input_dim < n_pairs:
        raise ConfigurationError(
            f"input_dim {input_dim} too small for {n_pairs} pair axes"
        )
    centers = np.zeros((class_count, input_dim))
    for c in range(class_count):
        if class_count % 2 == 1 and c == class_count - 1:
            centers[c, n_pairs - 1] = far + 1.25 * near
        else:
            pair, side = divmod(c, 2)
            centers[c, pair] = far + (0.5 if side else -0.5) * near

    dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    neighbor = {}
    for c in range(class_count):
        order = np.argsort(dists[c], kind="stable")
        if dists[c, order[0]] == dists[c, order[1]]:
            raise ConfigurationError(f"ambiguous nearest neighbor for class {c}")
        neighbor[c] = int(order[0])
    return centers, neighbor


def generate_blobs(spec: BlobSpec) -> LabeledDataset:
    """Isotropic Gaussian cluster per class, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    centers = np.asarray(spec.centers, dtype=np.float64)
    feats = []
    labels = []
    for c in range(spec.class_count):
        pts = centers[c] + spec.spread * rng.standard_normal((spec.samples_per_class, spec.input_dim))
        feats.append(pts)
        labels.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    return LabeledDataset(
        features=np.vstack(feats), labels=np.concatenate(labels), class_count=spec.class_count
    )


def held_out_blob_spec(spec: BlobSpec, samples_per_class: int) -> BlobSpec:
    """Same geometry, held-out seed: an independent test set for the spec."""
    return replace(spec, samples_per_class=samples_per_class, seed=derive_seed(spec.seed, "test"))


def partition_iid(dataset: LabeledDataset, n_clients: int, seed: int) -> Partition:
    """Random shuffle, near-equal split (sizes differ by at most one)."""
    if n_clients > len(dataset):
        raise ConfigurationError("more clients than samples")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    return Partition(client_indices=list(np.array_split(perm, n_clients)))


def partition_dirichlet(
    dataset: LabeledDataset, n_clients: int, delta: float, seed: int
) -> Partition:
    """Per-class Dirichlet(delta) proportion draws across clients.

    Clients that end up empty are topped up with one sample taken from the
    currently largest client, so every client participates in aggregation.
    """
    if delta <= 0.0:
        raise ConfigurationError("dirichlet concentration must be positive")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        proportions = rng.dirichlet(np.full(n_clients, delta))
        cuts = (np.cumsum(proportions)[:-1] * len(idx)).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())

    for k in range(n_clients):
        if not buckets[k]:
            donor = int(np.argmax([len(b) for b in buckets]))
            take = int(rng.integers(len(buckets[donor])))
            buckets[k].append(buckets[donor].pop(take))
    return Partition(client_indices=[np.array(sorted(b), dtype=np.int64) for b in buckets])


def relabel_for_unlearning(
    dataset: LabeledDataset,
    assignments: dict[int, int],
    forget_classes: set[int] | None = None,
) -> LabeledDataset:
    """Replace unlearning-sample labels with their transformation classes.

    ``assignments`` maps sample index -> transformation class and must cover
    exactly the samples whose label is in the forget set; the originals are
    retained on the result for evaluation.
    """
    originals = dataset.labels if dataset.original_labels is None else dataset.original_labels
    if forget_classes is None:
        forget_classes = {int(originals[i]) for i in assignments}
    forget = np.isin(originals, sorted(forget_classes))
    covered = np.zeros(len(dataset), dtype=bool)
    for i in assignments:
        covered[i] = True
    if not np.array_equal(forget, covered):
        raise ProtocolError("assignments must cover exactly the unlearning samples")
    for i, target in assignments.items():
        if target in forget_classes:
            raise ProtocolError(
                f"sample {i} assigned to class {target}, which is itself being unlearned"
            )

    labels = originals.copy()
    for i, target in assignments.items():
        labels[i] = target
    return LabeledDataset(
        features=dataset.features,
        labels=labels,
        class_count=dataset.class_count,
        original_labels=originals.copy(),
    )


_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated image header at offset {len(head)}")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != _IDX_IMAGE_MAGIC:
            raise FormatError(f"{path}: bad image magic {magic:#010x} at offset 0")
        body = fh.read()
    expected = count * rows * cols
    if len(body) != expected:
        raise FormatError(
            f"{path}: expected {expected} pixel bytes, found {len(body)} at offset 16"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)


def _read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FormatError(f"{path}: truncated label header at offset {len(head)}")
        magic, count = struct.unpack(">II", head)
        if magic != _IDX_LABEL_MAGIC:
            raise FormatError(f"{path}: bad label magic {magic:#010x} at offset 0")
        body = fh.read()
    if len(body) != count:
        raise FormatError(f"{path}: expected {count} label bytes, found {len(body)} at offset 8")
    return np.frombuffer(body, dtype=np.uint8)


def load_idx(images_path, labels_path, limit: int | None = None) -> LabeledDataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1], rows flattened."""
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"{images_path}: {len(images)} images vs {len(labels)} labels at offset 4"
        )
    class_count = int(labels.max()) + 1 if len(labels) else 1
    if limit:
        images = images[:limit]
        labels = labels[:limit]
    return LabeledDataset(
        features=images.astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        class_count=class_count,
    )

"""Synthetic 2-D datasets, CSV ingestion, stratified SSL splits, batching.

Labels use -1 for "unlabeled"; the split hands the trainer an unlabeled pool
that carries no labels at all (ground truth is kept aside for metrics only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_blobs, make_circles, make_moons

from .errors import ParameterError, StateError, ValidationError


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int, -1 = unlabeled
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"dataset shapes do not pair: {self.features.shape} vs {self.labels.shape}"
            )
        if self.labels.max(initial=-1) >= self.class_count or self.labels.min(initial=0) < -1:
            raise ValidationError("labels must be -1 or in [0, class_count)")
        present = set(self.labels[self.labels >= 0].tolist())
        missing = [c for c in range(self.class_count) if c not in present]
        if missing:
            raise ValidationError(f"no labeled sample for class(es) {missing}")


@dataclass
class SplitSpec:
    labeled_per_class: int = 2
    seed: int = 0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.labeled_per_class < 1:
            raise ParameterError("labeled_per_class must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ParameterError(f"test_fraction must be in [0, 1), got {self.test_fraction}")


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray


@dataclass
class FeatureSet:
    """Unlabeled pool: features only, by construction label-free."""

    features: np.ndarray


@dataclass
class SplitResult:
    labeled: LabeledSet
    unlabeled: FeatureSet
    test: LabeledSet
    unlabeled_truth: np.ndarray  # metrics only; never reaches a loss
    class_count: int


def _standardize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return (x - mean) / std


def gen_two_moons(n: int, noise: float, seed: int) -> Dataset:
    if n < 4:
        raise ParameterError(f"two_moons needs n >= 4, got {n}")
    x, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    return Dataset(_standardize(x), y, 2)


def gen_circles(n: int, noise: float, seed: int) -> Dataset:
    if n < 4:
        raise ParameterError(f"circles needs n >= 4, got {n}")
    x, y = make_circles(n_samples=n, noise=noise, factor=0.5, random_state=seed)
    return Dataset(_standardize(x), y, 2)


def gen_blobs(n: int, class_count: int, spread: float, seed: int) -> Dataset:
    if class_count < 2:
        raise ParameterError("blobs needs at least 2 classes")
    if n < 2 * class_count:
        raise ParameterError(f"blobs needs n >= 2C = {2 * class_count}, got {n}")
    x, y = make_blobs(
        n_samples=n, centers=class_count, n_features=2, cluster_std=spread, random_state=seed
    )
    return Dataset(_standardize(x), y, class_count)


GENERATORS = ("two_moons", "circles", "blobs")


def save_csv(dataset: Dataset, path) -> None:
    d = dataset.features.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join([f"x{i}" for i in range(d)] + ["label"]) + "\n")
        for row, label in zip(dataset.features, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_csv(path) -> Dataset:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise ValidationError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[-1] != "label" or header[:-1] != [f"x{i}" for i in range(len(header) - 1)]:
        raise ValidationError(f"{path}: header must be x0,...,x{{d-1}},label, got {lines[0]!r}")
    d = len(header) - 1
    features, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != d + 1:
            raise ValidationError(f"{path}:{lineno}: expected {d + 1} fields, got {len(parts)}")
        try:
            features.append([float(v) for v in parts[:-1]])
            labels.append(int(parts[-1]))
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: malformed value ({exc})") from exc
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or not np.any(labels >= 0):
        raise ValidationError(f"{path}: no labeled data")
    if labels.min() < -1:
        raise ValidationError(f"{path}: labels must be -1 or non-negative")
    return Dataset(np.asarray(features, dtype=np.float64), labels, int(labels.max()) + 1)


def make_ssl_split(dataset: Dataset, spec: SplitSpec) -> SplitResult:
    """Stratified labeled / unlabeled / test split, deterministic per seed.

    Per class: test_fraction of its points go to the test set, then exactly
    labeled_per_class become labeled; everything else joins the unlabeled
    pool with its ground truth kept aside for metrics.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    lab_idx, unl_idx, test_idx = [], [], []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        members = members[rng.permutation(members.size)]
        n_test = int(round(members.size * spec.test_fraction))
        n_train = members.size - n_test
        if n_train < spec.labeled_per_class:
            raise ParameterError(
                f"class {c}: {n_train} train points cannot supply {spec.labeled_per_class} labeled"
            )
        test_idx.append(members[:n_test])
        lab_idx.append(members[n_test : n_test + spec.labeled_per_class])
        unl_idx.append(members[n_test + spec.labeled_per_class :])
    lab = np.sort(np.concatenate(lab_idx))
    unl = np.sort(np.concatenate(unl_idx))
    test = np.sort(np.concatenate(test_idx))
    return SplitResult(
        labeled=LabeledSet(dataset.features[lab], dataset.labels[lab]),
        unlabeled=FeatureSet(dataset.features[unl]),
        test=LabeledSet(dataset.features[test], dataset.labels[test]),
        unlabeled_truth=dataset.labels[unl],
        class_count=dataset.class_count,
    )


class BatchSampler:
    """Deterministic per-step index sampler.

    Labeled indices are drawn with replacement (the pool is tiny); unlabeled
    indices come from per-epoch permutations consumed without replacement, so
    every window of n_unlabeled consecutive draws covers each index exactly
    once. Depends only on (seed, step): resumable from a step counter.
    """

    def __init__(self, n_labeled: int, n_unlabeled: int, batch_size: int, mu: int, seed: int):
        if batch_size < 1 or mu < 1:
            raise ParameterError(f"batch_size and mu must be >= 1, got {batch_size}, {mu}")
        if n_labeled < 1 or n_unlabeled < 1:
            raise StateError("batch sampler needs non-empty labeled and unlabeled pools")
        self.n_labeled = n_labeled
        self.n_unlabeled = n_unlabeled
        self.batch_size = batch_size
        self.mu = mu
        self.seed = seed
        self._perm_cache: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._perm_cache.get(epoch)
        if perm is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xEB0C, epoch]))
            perm = rng.permutation(self.n_unlabeled)
            self._perm_cache = {epoch: perm}  # keep only the most recent epoch
        return perm

    def indices(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x1AB, step]))
        lab = rng.integers(0, self.n_labeled, size=self.batch_size)
        need = self.batch_size * self.mu
        pos = step * need
        chunks = []
        while need > 0:
            epoch, offset = divmod(pos, self.n_unlabeled)
            take = min(need, self.n_unlabeled - offset)
            chunks.append(self._perm(epoch)[offset : offset + take])
            pos += take
            need -= take
        return lab, np.concatenate(chunks)


def batch_iterator(labeled: LabeledSet, unlabeled: FeatureSet, batch_size: int, mu: int, seed: int):
    """Endless stream of (labeled X, labeled y, unlabeled U) batches."""
    sampler = BatchSampler(
        labeled.features.shape[0], unlabeled.features.shape[0], batch_size, mu, seed
    )
    step = 0
    while True:
        lab, unl = sampler.indices(step)
        yield labeled.features[lab], labeled.labels[lab], unlabeled.features[unl]
        step += 1

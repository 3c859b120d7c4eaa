"""Synthetic fine-grained datasets, fixed splits, batching and file ingestion."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import Field

from app.config import StrictModel
from app.errors import ConfigError, DataError
from app.tools import dataset_io
from app.tools.dataset_io import SPLIT_NAMES, RawDataset

logger = logging.getLogger(__name__)

DatasetFormat = Literal["packed-binary", "tabular-csv"]


class GenSpec(StrictModel):
    """
    Parameters of the synthetic generator.

    Classes are grouped into genera of ``genus_size`` siblings that share a
    coarse center; each class is a mixture of ``modes_per_class`` sub-clusters.

    Attributes:
        num_classes: Number of fine classes.
        samples_per_class: Size of the largest (rank 1) class.
        long_tail_exponent: Class c has round(samples_per_class * (c + 1) ** -exponent) samples.
        kind: ``vector`` samples of feature_dim values or ``image`` (1, side, side) blob renderings.
        class_separation: Scale of a class's offset from its genus center.
        subclass_spread: Scale of a mode's offset from its class center.
        noise: Per-sample isotropic Gaussian noise.
        label_noise: Fraction of train labels resampled uniformly.
        with_val: Whether a validation split is carved out (80/10/10, else 80/20).
        sample_seed: When set, class geometry comes from ``seed`` alone and the samples from
            (seed, sample_seed), so two specs differing only here are disjoint draws of one task.
    """

    num_classes: int = Field(gt=0)
    samples_per_class: int = Field(gt=0)
    long_tail_exponent: float = Field(0.0, ge=0)
    kind: Literal["vector", "image"] = "vector"
    feature_dim: int = Field(32, gt=0)
    image_side: int = Field(12, ge=4)
    modes_per_class: int = Field(3, gt=0)
    genus_size: int = Field(4, gt=0)
    class_separation: float = Field(0.35, ge=0)
    subclass_spread: float = Field(0.6, ge=0)
    noise: float = Field(1.0, ge=0)
    label_noise: float = Field(0.0, ge=0, lt=1)
    with_val: bool = True
    seed: int = 0
    sample_seed: Optional[int] = None


BENCHMARKS: Dict[str, GenSpec] = {
    # long-tailed species-style task, about 4k train samples of eight-mode classes
    "species": GenSpec(
        num_classes=20, samples_per_class=680, long_tail_exponent=0.5, modes_per_class=8, subclass_spread=1.0, sample_seed=0
    ),
    # larger balanced draw of the same classes, disjoint from "species", for encoder pretraining
    "species-upstream": GenSpec(num_classes=20, samples_per_class=1000, modes_per_class=8, subclass_spread=1.0, sample_seed=1),
    # balanced disease-style task without a validation split, rendered images
    "disease": GenSpec(num_classes=16, samples_per_class=160, kind="image", with_val=False, noise=0.6),
}


def benchmark_spec(name: str, seed: Optional[int] = None) -> GenSpec:
    if name not in BENCHMARKS:
        raise ConfigError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    spec = BENCHMARKS[name]
    return spec if seed is None else spec.model_copy(update={"seed": seed})


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable features/labels with contiguous train, val and test index ranges.

    Attributes:
        features: Array of shape (N, *input_shape), float64.
        labels: Integer labels of shape (N,).
        splits: Half-open (start, end) range per split name; val may be empty.
        num_classes: Number of classes; every label is below it.
    """

    features: np.ndarray
    labels: np.ndarray
    splits: Dict[str, Tuple[int, int]]
    num_classes: int

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} does not match {n} samples")
        covered = 0
        for name in SPLIT_NAMES:
            start, end = self.splits[name]
            if start != covered or end < start:
                raise DataError(f"split {name} range {self.splits[name]} is not contiguous after {covered}")
            covered = end
        if covered != n:
            raise DataError(f"splits cover {covered} of {n} samples")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        missing = np.flatnonzero(np.bincount(self.split_labels("train"), minlength=self.num_classes) == 0)
        if missing.size:
            raise DataError(f"classes {missing.tolist()} have no train samples")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def has_val(self) -> bool:
        start, end = self.splits["val"]
        return end > start

    def __len__(self) -> int:
        return self.features.shape[0]

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        return np.arange(*self.splits[split])

    def split_labels(self, split: str) -> np.ndarray:
        start, end = self.splits[split]
        return self.labels[start:end]

    def split(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        start, end = self.splits[split]
        return self.features[start:end], self.labels[start:end]

    def to_raw(self) -> RawDataset:
        return RawDataset(self.features, self.labels, dict(self.splits), self.num_classes)


def class_sizes(spec: GenSpec) -> List[int]:
    sizes = [int(round(spec.samples_per_class * (rank + 1) ** -spec.long_tail_exponent)) for rank in range(spec.num_classes)]
    if min(sizes) < 1:
        first = sizes.index(min(sizes))
        raise DataError(
            f"{spec.num_classes} classes with exponent {spec.long_tail_exponent} leave class {first} without a train sample"
        )
    return sizes


def _split_counts(n: int, with_val: bool) -> Tuple[int, int, int]:
    if with_val:
        held = n // 10
        return n - 2 * held, held, held
    held = n // 5
    return n - held, 0, held


def _vector_samples(spec: GenSpec, rng: np.random.Generator, sample_rng: np.random.Generator, sizes: List[int]) -> List[np.ndarray]:
    d = spec.feature_dim
    genera = math.ceil(spec.num_classes / spec.genus_size)
    genus_centers = rng.normal(0.0, 1.0, size=(genera, d))
    out = []
    for c, size in enumerate(sizes):
        center = genus_centers[c // spec.genus_size] + spec.class_separation * rng.normal(size=d)
        modes = center + spec.subclass_spread * rng.normal(size=(spec.modes_per_class, d))
        picks = sample_rng.integers(0, spec.modes_per_class, size=size)
        out.append(modes[picks] + spec.noise * sample_rng.normal(size=(size, d)))
    return out


def _image_samples(spec: GenSpec, rng: np.random.Generator, sample_rng: np.random.Generator, sizes: List[int]) -> List[np.ndarray]:
    side = spec.image_side
    blobs = 3
    width = side / 8.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    genera = math.ceil(spec.num_classes / spec.genus_size)
    genus_pos = rng.uniform(1.0, side - 1.0, size=(genera, blobs, 2))
    out = []
    for c, size in enumerate(sizes):
        pos = genus_pos[c // spec.genus_size] + spec.class_separation * (side / 4.0) * rng.normal(size=(blobs, 2))
        amp = rng.choice([-1.0, 1.0], size=blobs)
        mode_pos = pos + spec.subclass_spread * (side / 8.0) * rng.normal(size=(spec.modes_per_class, blobs, 2))
        images = np.zeros((spec.modes_per_class, side, side))
        for m in range(spec.modes_per_class):
            for b in range(blobs):
                cy, cx = mode_pos[m, b]
                images[m] += amp[b] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        picks = sample_rng.integers(0, spec.modes_per_class, size=size)
        samples = images[picks] + spec.noise * sample_rng.normal(size=(size, side, side))
        out.append(samples[:, None, :, :])
    return out


def generate(spec: GenSpec) -> Dataset:
    """
    Draw a dataset from the generator, deterministic in ``spec.seed``.

    Splits are stratified per class (80/10/10, or 80/20 without val) and the
    samples are laid out train block, val block, test block, each in class order.
    """
    sizes = class_sizes(spec)
    rng = np.random.default_rng(spec.seed)
    sample_rng = rng if spec.sample_seed is None else np.random.default_rng([spec.seed, spec.sample_seed])
    sampler = _vector_samples if spec.kind == "vector" else _image_samples
    per_class = sampler(spec, rng, sample_rng, sizes)

    blocks: Dict[str, List[np.ndarray]] = {name: [] for name in SPLIT_NAMES}
    label_blocks: Dict[str, List[np.ndarray]] = {name: [] for name in SPLIT_NAMES}
    for c, samples in enumerate(per_class):
        n_train, n_val, n_test = _split_counts(len(samples), spec.with_val)
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_train + n_val + n_test)}
        for name, (lo, hi) in bounds.items():
            blocks[name].append(samples[lo:hi])
            label_blocks[name].append(np.full(hi - lo, c, dtype=np.int64))

    features = np.concatenate([x for name in SPLIT_NAMES for x in blocks[name]])
    labels = np.concatenate([y for name in SPLIT_NAMES for y in label_blocks[name]])
    splits, start = {}, 0
    for name in SPLIT_NAMES:
        count = sum(len(y) for y in label_blocks[name])
        splits[name] = (start, start + count)
        start += count

    if spec.label_noise > 0:
        labels = _apply_label_noise(labels, splits["train"], spec, sample_rng)

    # keep values on the float32 grid so packed files round-trip exactly
    features = features.astype(np.float32).astype(np.float64)
    dataset = Dataset(features=features, labels=labels, splits=splits, num_classes=spec.num_classes)
    logger.info(f"Generated {spec.kind} dataset: {len(dataset)} samples, {spec.num_classes} classes, splits {splits}")
    return dataset


def _apply_label_noise(labels: np.ndarray, train: Tuple[int, int], spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    noisy = labels.copy()
    start, end = train
    count = int(round(spec.label_noise * (end - start)))
    chosen = start + rng.choice(end - start, size=count, replace=False)
    noisy[chosen] = rng.integers(0, spec.num_classes, size=count)
    # a class must never lose its last train sample
    present = np.bincount(noisy[start:end], minlength=spec.num_classes) > 0
    for c in np.flatnonzero(~present):
        restore = chosen[labels[chosen] == c]
        noisy[restore] = c
    return noisy


def coarsen(dataset: Dataset, merge_factor: int) -> Dataset:
    """Merge labels ``merge_factor``-to-1 (label // merge_factor)."""
    if merge_factor < 1:
        raise ConfigError(f"merge_factor must be >= 1, got {merge_factor}")
    if merge_factor == 1:
        return dataset
    return Dataset(
        features=dataset.features,
        labels=dataset.labels // merge_factor,
        splits=dict(dataset.splits),
        num_classes=math.ceil(dataset.num_classes / merge_factor),
    )


def class_histogram(dataset: Dataset, split: Optional[str] = None) -> List[int]:
    labels = dataset.labels if split is None else dataset.split_labels(split)
    return np.bincount(labels, minlength=dataset.num_classes).tolist()


def batch_indices(dataset: Dataset, split: str, batch_size: int, shuffle_seed: Optional[int], epoch: int = 0) -> List[np.ndarray]:
    """
    Partition a split into batches of global sample indices.

    The order is a permutation drawn from (shuffle_seed, epoch), or the natural
    order when shuffle_seed is None. The last batch may be short.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    indices = dataset.split_indices(split)
    if indices.size == 0:
        raise DataError(f"split {split!r} is empty")
    if shuffle_seed is not None:
        rng = np.random.default_rng([shuffle_seed, epoch])
        indices = indices[rng.permutation(indices.size)]
    return [indices[i:i + batch_size] for i in range(0, indices.size, batch_size)]


def batches(
    dataset: Dataset, split: str, batch_size: int, shuffle_seed: Optional[int], epoch: int = 0
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    for idx in batch_indices(dataset, split, batch_size, shuffle_seed, epoch):
        yield dataset.features[idx], dataset.labels[idx]


def save(dataset: Dataset, path: Union[str, Path], format: DatasetFormat = "packed-binary") -> Path:
    raw = dataset.to_raw()
    if format == "packed-binary":
        return dataset_io.write_packed(raw, path)
    if format == "tabular-csv":
        return dataset_io.write_csv(raw, path)
    raise ConfigError(f"unknown dataset format {format!r}")


def load(path: Union[str, Path], format: DatasetFormat = "packed-binary") -> Dataset:
    if format == "packed-binary":
        raw = dataset_io.read_packed(path)
    elif format == "tabular-csv":
        raw = dataset_io.read_csv(path)
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    return Dataset(features=raw.features, labels=raw.labels, splits=raw.splits, num_classes=raw.num_classes)

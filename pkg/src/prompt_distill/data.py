"""Synthetic class-conditional images, protocol samplers, augmentation and tokenization.

Each class owns a smooth random prototype image; samples are the prototype
plus i.i.d. Gaussian pixel noise, so nearest-prototype classification is a
closed-form reference for how separable a configuration is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, TokenizationError

DEFAULT_TEMPLATE = "a photo of a {classname}"
PAD, EOS = "<pad>", "<eos>"

# purpose-split RNG stream ids, combined with the user seed
STREAM_PROTOTYPES = 11
STREAM_TRAIN = 12
STREAM_TEST = 13
STREAM_PRETRAIN = 14


def rng_stream(seed: int, *purpose: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose...)``."""
    return np.random.default_rng([int(seed), *map(int, purpose)])


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    images_per_class: int = 200
    test_per_class: int = 50
    image_side: int = 16
    noise_std: float = 0.5
    smoothing: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 4:
            raise ConfigError(f"num_classes must be >= 4, got {self.num_classes}")
        if self.images_per_class < 1:
            raise ConfigError(f"images_per_class must be >= 1, got {self.images_per_class}")
        if self.test_per_class < 1:
            raise ConfigError(f"test_per_class must be >= 1, got {self.test_per_class}")
        if self.image_side < 2:
            raise ConfigError(f"image_side must be >= 2, got {self.image_side}")
        if self.noise_std < 0 or self.smoothing < 0:
            raise ConfigError("noise_std and smoothing must be non-negative")


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    label: int


@dataclass(frozen=True)
class LabeledSet:
    """Images ``(n, side, side)`` with integer labels; immutable by convention."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.labels[i]))

    def subset(self, indices) -> "LabeledSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.images[indices], self.labels[indices], self.num_classes)

    def of_classes(self, classes: Sequence[int]) -> "LabeledSet":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))


@dataclass(frozen=True)
class UnlabeledPool:
    """Images only. ``source_indices`` point back into the originating set."""

    images: np.ndarray
    source_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class ClassSplit:
    base: tuple[int, ...]
    novel: tuple[int, ...]

    def __post_init__(self):
        if not self.base or not self.novel:
            raise ConfigError("base and novel splits must both be nonempty")
        if set(self.base) & set(self.novel):
            raise ConfigError("base and novel splits overlap")


@dataclass(frozen=True)
class SyntheticDataset:
    train: LabeledSet
    test: LabeledSet
    class_names: list[str]
    prototypes: np.ndarray
    spec: DatasetSpec = field(default_factory=DatasetSpec)


def class_names_for(n: int) -> list[str]:
    return [f"class_{k}" for k in range(n)]


def make_prototypes(spec: DatasetSpec) -> np.ndarray:
    rng = rng_stream(spec.seed, STREAM_PROTOTYPES)
    raw = rng.standard_normal((spec.num_classes, spec.image_side, spec.image_side))
    protos = np.stack([gaussian_filter(p, spec.smoothing, mode="wrap") for p in raw])
    protos -= protos.mean(axis=(1, 2), keepdims=True)
    protos /= protos.std(axis=(1, 2), keepdims=True)
    return protos.astype(np.float32)


def sample_images(prototypes: np.ndarray, per_class: int, noise_std: float,
                  rng: np.random.Generator) -> LabeledSet:
    n, side, _ = prototypes.shape
    labels = np.repeat(np.arange(n), per_class)
    noise = rng.standard_normal((len(labels), side, side)).astype(np.float32)
    images = prototypes[labels] + np.float32(noise_std) * noise
    return LabeledSet(images.astype(np.float32), labels.astype(np.int64), n)


def generate_synthetic_dataset(spec: DatasetSpec) -> SyntheticDataset:
    spec.validate()
    protos = make_prototypes(spec)
    train = sample_images(protos, spec.images_per_class, spec.noise_std,
                          rng_stream(spec.seed, STREAM_TRAIN))
    test = sample_images(protos, spec.test_per_class, spec.noise_std,
                         rng_stream(spec.seed, STREAM_TEST))
    return SyntheticDataset(train, test, class_names_for(spec.num_classes), protos, spec)


def nearest_prototype_accuracy(data: LabeledSet, prototypes: np.ndarray) -> float:
    """Accuracy of the Bayes-optimal classifier for isotropic noise."""
    flat = data.images.reshape(len(data), -1).astype(np.float64)
    protos = prototypes.reshape(len(prototypes), -1).astype(np.float64)
    d2 = (flat**2).sum(1)[:, None] - 2 * flat @ protos.T + (protos**2).sum(1)[None]
    return float((d2.argmin(1) == data.labels).mean())


def base_novel_split(class_names: Sequence[str]) -> ClassSplit:
    """First ceil(N/2) classes by index are base, the rest novel."""
    n = len(class_names)
    if n < 4:
        raise ConfigError(f"base/novel split needs at least 4 classes, got {n}")
    cut = math.ceil(n / 2)
    return ClassSplit(tuple(range(cut)), tuple(range(cut, n)))


def few_shot_sample(train: LabeledSet, shots: int, base: Sequence[int], seed: int) -> LabeledSet:
    """Exactly ``shots`` samples from every base class, chosen without replacement."""
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    picked = []
    for c in base:
        idx = np.flatnonzero(train.labels == c)
        if len(idx) < shots:
            raise DataError(f"class {c} has {len(idx)} train samples, {shots}-shot needs more")
        picked.append(np.sort(rng.choice(idx, size=shots, replace=False)))
    return train.subset(np.concatenate(picked))


def unlabeled_pool(train: LabeledSet, scope: Literal["full", "base_only"] = "full",
                   per_class_cap: int | None = None,
                   split: ClassSplit | None = None) -> UnlabeledPool:
    """Strip labels; optionally restrict to base classes and cap images per class.

    The cap keeps the first ``per_class_cap`` images of each class in index order.
    """
    if scope not in ("full", "base_only"):
        raise ConfigError(f"unknown pool scope {scope!r}")
    if scope == "base_only":
        if split is None:
            raise ConfigError("scope=base_only needs the class split")
        keep = np.isin(train.labels, split.base)
    else:
        keep = np.ones(len(train), dtype=bool)
    if per_class_cap is not None:
        if per_class_cap < 1:
            raise ConfigError(f"per_class_cap must be >= 1, got {per_class_cap}")
        rank = np.zeros(len(train), dtype=np.int64)
        for c in np.unique(train.labels):
            idx = np.flatnonzero(train.labels == c)
            rank[idx] = np.arange(len(idx))
        keep &= rank < per_class_cap
    idx = np.flatnonzero(keep)
    return UnlabeledPool(train.images[idx], idx)


def _bilinear_crop(image: np.ndarray, top: float, left: float, size: float) -> np.ndarray:
    side = image.shape[0]
    centers = (np.arange(side) + 0.5) * (size / side) - 0.5
    ys = np.clip(top + centers, 0, side - 1)
    xs = np.clip(left + centers, 0, side - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, side - 1)
    x1 = np.minimum(x0 + 1, side - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    out = (image[np.ix_(y0, x0)] * (1 - wy) * (1 - wx) + image[np.ix_(y0, x1)] * (1 - wy) * wx
           + image[np.ix_(y1, x0)] * wy * (1 - wx) + image[np.ix_(y1, x1)] * wy * wx)
    return out.astype(image.dtype)


def augment(image: np.ndarray, rng: np.random.Generator, *, scale: float | None = None,
            flip: bool | None = None, scale_range: tuple[float, float] = (0.6, 1.0)) -> np.ndarray:
    """Random resized crop followed by a horizontal flip with probability 0.5.

    ``scale`` (area fraction) and ``flip`` override the random draws.
    """
    side = image.shape[0]
    if image.shape != (side, side):
        raise DataError(f"augment expects a square image, got {image.shape}")
    if scale is None:
        scale = rng.uniform(*scale_range)
    size = side * math.sqrt(scale)
    top = rng.uniform(0, side - size) if side > size else 0.0
    left = rng.uniform(0, side - size) if side > size else 0.0
    out = _bilinear_crop(image, top, left, size)
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(im, rng) for im in images])


class Vocabulary:
    """Closed whitespace vocabulary: specials, template words, then class names."""

    def __init__(self, class_names: Sequence[str], template: str = DEFAULT_TEMPLATE):
        words = [PAD, EOS]
        for w in template.replace("{classname}", " ").split() + list(class_names):
            if w not in words:
                words.append(w)
        self.template = template
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def ids(self, words: Sequence[str]) -> list[int]:
        out = []
        for w in words:
            if w not in self.index:
                raise TokenizationError(f"word {w!r} is not in the vocabulary")
            out.append(self.index[w])
        return out

    def tokenize(self, classname: str, template: str | None = None) -> list[int]:
        return tokenize(template or self.template, classname, self)

    def template_ids(self) -> list[int]:
        return self.ids(self.template.replace("{classname}", " ").split())


def tokenize(template: str, classname: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenization of ``template`` with ``{classname}`` filled in."""
    return vocab.ids(template.format(classname=classname).split())


def write_manifest(path: str | Path, dataset: SyntheticDataset) -> None:
    """Plain-text dump: header, then ``split class v0 v1 ...`` per sample."""
    spec = dataset.spec
    with open(path, "w") as f:
        f.write(f"N={spec.num_classes} images_per_class={spec.images_per_class} seed={spec.seed}\n")
        for tag, part in (("train", dataset.train), ("test", dataset.test)):
            for img, lab in zip(part.images, part.labels):
                vals = " ".join(repr(float(v)) for v in img.ravel())
                f.write(f"{tag} {int(lab)} {vals}\n")


def read_manifest(path: str | Path) -> tuple[dict, LabeledSet, LabeledSet]:
    with open(path) as f:
        header = dict(kv.split("=") for kv in f.readline().split())
        n = int(header["N"])
        rows = {"train": ([], []), "test": ([], [])}
        for line in f:
            tag, lab, *vals = line.split()
            rows[tag][0].append(np.array(vals, dtype=np.float32))
            rows[tag][1].append(int(lab))

    def build(imgs, labs):
        side = int(round(math.sqrt(len(imgs[0])))) if imgs else 0
        arr = np.stack(imgs).reshape(-1, side, side) if imgs else np.zeros((0, 0, 0), np.float32)
        return LabeledSet(arr, np.array(labs, dtype=np.int64), n)

    return header, build(*rows["train"]), build(*rows["test"])

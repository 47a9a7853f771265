"""Episodic sampling of C-way K-shot tasks and training-time augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSplit, ImageDataset, LabeledImage


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int
    shots: int
    queries_per_class: int

    def __post_init__(self):
        if self.ways < 1 or self.shots < 1 or self.queries_per_class < 1:
            raise ValueError(f"ways, shots and queries must be >= 1: {self}")

    @property
    def images_per_class(self) -> int:
        return self.shots + self.queries_per_class

    @property
    def total_images(self) -> int:
        return self.ways * self.images_per_class


@dataclass(frozen=True)
class Episode:
    """One task. Labels are episode-local: ``classes[k]`` is the dataset
    label of local class ``k``. Support and query are grouped by class.
    """

    classes: tuple[int, ...]
    support_images: np.ndarray
    support_labels: np.ndarray
    support_ids: tuple[str, ...]
    query_images: np.ndarray
    query_labels: np.ndarray
    query_ids: tuple[str, ...]

    @property
    def ways(self) -> int:
        return len(self.classes)

    @property
    def class_map(self) -> dict[int, int]:
        return {c: k for k, c in enumerate(self.classes)}

    @property
    def support(self) -> list[LabeledImage]:
        return [
            LabeledImage(x, self.classes[y], s)
            for x, y, s in zip(self.support_images, self.support_labels, self.support_ids)
        ]

    @property
    def query(self) -> list[LabeledImage]:
        return [
            LabeledImage(x, self.classes[y], s)
            for x, y, s in zip(self.query_images, self.query_labels, self.query_ids)
        ]


def check_capacity(dataset: ImageDataset, classes, spec: EpisodeSpec) -> None:
    if len(classes) < spec.ways:
        raise ValueError(f"{spec.ways}-way episodes need {spec.ways} classes, only {len(classes)} available")
    short = [c for c in classes if len(dataset.indices_by_class[c]) < spec.images_per_class]
    if short:
        raise ValueError(
            f"classes {short} have fewer than {spec.images_per_class} images (shots + queries)"
        )


def sample_episode(
    dataset: ImageDataset,
    split: DatasetSplit | tuple[int, ...],
    part: str | None,
    spec: EpisodeSpec,
    rng: np.random.Generator,
) -> Episode:
    """Draw classes, then shots + queries images per class, without replacement.

    ``split`` may be a DatasetSplit together with a ``part`` name, or a
    plain tuple of class labels with ``part=None``.
    """
    classes = split.part(part) if isinstance(split, DatasetSplit) else tuple(split)
    check_capacity(dataset, classes, spec)
    chosen = rng.choice(np.asarray(classes), size=spec.ways, replace=False)
    s_idx, q_idx = [], []
    for c in chosen:
        picks = rng.choice(dataset.indices_by_class[int(c)], size=spec.images_per_class, replace=False)
        s_idx.append(picks[: spec.shots])
        q_idx.append(picks[spec.shots :])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    return Episode(
        classes=tuple(int(c) for c in chosen),
        support_images=dataset.images[s_idx],
        support_labels=np.repeat(np.arange(spec.ways), spec.shots),
        support_ids=tuple(dataset.source_ids[i] for i in s_idx),
        query_images=dataset.images[q_idx],
        query_labels=np.repeat(np.arange(spec.ways), spec.queries_per_class),
        query_ids=tuple(dataset.source_ids[i] for i in q_idx),
    )


@dataclass(frozen=True)
class CropParams:
    top: int
    left: int
    height: int
    width: int
    flip: bool


def draw_crop(
    rng,
    height: int,
    width: int,
    scale: tuple[float, float] = (0.08, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> CropParams:
    """Random-size crop box (area fraction in ``scale``, aspect in ``ratio``)
    plus a fair coin for horizontal flipping."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    box = None
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            box = (int(rng.integers(0, height - h + 1)), int(rng.integers(0, width - w + 1)), h, w)
            break
    if box is None:
        # central crop clamped to the allowed aspect range
        aspect = width / height
        if aspect < ratio[0]:
            w, h = width, int(round(width / ratio[0]))
        elif aspect > ratio[1]:
            h, w = height, int(round(height * ratio[1]))
        else:
            h, w = height, width
        box = ((height - h) // 2, (width - w) // 2, h, w)
    return CropParams(*box, flip=bool(rng.random() < 0.5))


def resize(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[-2:] == (size, size):
        return pixels.copy()
    t = torch.from_numpy(np.ascontiguousarray(pixels))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].numpy()


def apply_crop(pixels: np.ndarray, crop: CropParams, size: int) -> np.ndarray:
    patch = pixels[:, crop.top : crop.top + crop.height, crop.left : crop.left + crop.width]
    out = resize(patch, size)
    if crop.flip:
        out = out[:, :, ::-1].copy()
    return out


def augment(
    image: LabeledImage,
    rng,
    enabled: bool,
    size: int | None = None,
    scale: tuple[float, float] = (0.08, 1.0),
) -> LabeledImage:
    """Random-resized crop to ``size`` (default: input size) and a random
    horizontal flip; identity when disabled."""
    if not enabled:
        return image
    _, h, w = image.pixels.shape
    crop = draw_crop(rng, h, w, scale=scale)
    return LabeledImage(apply_crop(image.pixels, crop, size or w), image.label, image.source_id)


def augment_batch(images: np.ndarray, rng, enabled: bool, scale=(0.08, 1.0)) -> np.ndarray:
    if not enabled:
        return images
    _, _, h, w = images.shape
    return np.stack([apply_crop(x, draw_crop(rng, h, w, scale=scale), w) for x in images])

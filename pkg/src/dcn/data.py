"""Image datasets, disjoint class splits and split manifests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
PARTS = ("meta_train", "meta_val", "meta_test")


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (channels, height, width)
    label: int
    source_id: str


@dataclass
class ImageDataset:
    """All images of a dataset held as one contiguous array.

    ``images`` is (N, 3, H, W) float32 and already mean-centred with
    ``channel_mean``; ``labels`` index into ``class_names``.
    """

    images: np.ndarray
    labels: np.ndarray
    source_ids: list[str]
    class_names: list[str]
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise ValueError(f"images must be (N, C, S, S), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.source_ids) != len(self.images):
            raise ValueError("images, labels and source_ids must have equal length")
        by_class: dict[int, np.ndarray] = {}
        for c in range(len(self.class_names)):
            by_class[c] = np.flatnonzero(self.labels == c)
        self.indices_by_class = by_class

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), self.source_ids[i])

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def recentered(self, classes: Iterable[int] | None = None, mean=None) -> "ImageDataset":
        """Copy with the per-channel mean taken over ``classes`` only.

        Used to centre every split with statistics from the training
        classes, so nothing leaks from val/test images. An explicit
        ``mean`` (e.g. the one stored with a model) overrides ``classes``.
        """
        raw = self.images.astype(np.float64) + self.channel_mean[None, :, None, None]
        if mean is not None:
            mean = np.asarray(mean, dtype=np.float64)
        elif classes is None:
            mean = raw.mean(axis=(0, 2, 3))
        else:
            mask = np.isin(self.labels, np.asarray(sorted(classes), dtype=np.int64))
            mean = raw[mask].mean(axis=(0, 2, 3))
        return ImageDataset(
            images=(raw - mean[None, :, None, None]).astype(np.float32),
            labels=self.labels.copy(),
            source_ids=list(self.source_ids),
            class_names=list(self.class_names),
            channel_mean=mean,
        )


def _center(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = raw.astype(np.float64)
    mean = raw.mean(axis=(0, 2, 3))
    return (raw - mean[None, :, None, None]).astype(np.float32), mean


def load_directory_dataset(path, image_size: int) -> ImageDataset:
    """Load ``root/<class_name>/<image>`` into a mean-centred dataset.

    Class names are sorted so the same directory always yields the same
    integer labels.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class folders in {root}")

    arrays, labels, ids = [], [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise ValueError(f"class folder {class_dir.name!r} contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise ValueError(f"cannot decode image {f}: {exc}") from exc
            arrays.append(arr.transpose(2, 0, 1))
            labels.append(label)
            ids.append(f"{class_dir.name}/{f.name}")

    images, mean = _center(np.stack(arrays))
    return ImageDataset(images, np.array(labels), ids, [d.name for d in class_dirs], mean)


def render_synthetic(
    num_classes: int, per_class: int, image_size: int, difficulty: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Raw synthetic pixels in [0, 1], shape (N, 3, S, S), plus labels.

    Every class is a coloured stripe field with a coloured disc on top;
    class parameters come from ``seed``. Per-image jitter is drawn
    unconditionally and multiplied by ``difficulty`` so the random stream
    does not depend on it, and difficulty 0 gives identical images.
    """
    if num_classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes and 2 images per class")
    if image_size < 1:
        raise ValueError("image_size must be positive")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    base = rng.uniform(0.1, 0.9, size=(num_classes, 3))
    disc_color = rng.uniform(0.0, 1.0, size=(num_classes, 3))
    angle = rng.permutation(num_classes) * (np.pi / num_classes) + rng.uniform(0, 0.2, num_classes)
    freq = rng.uniform(1.5, 4.0, size=num_classes)
    centre = rng.uniform(0.3, 0.7, size=(num_classes, 2))
    radius = rng.uniform(0.15, 0.3, size=num_classes)

    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((num_classes * per_class, 3, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), per_class)
    d = float(difficulty)
    for c in range(num_classes):
        for k in range(per_class):
            j_phase = rng.uniform(-np.pi, np.pi)
            j_angle = rng.normal(0.0, 0.15)
            j_centre = rng.uniform(-0.15, 0.15, size=2)
            j_color = rng.normal(0.0, 0.08, size=3)
            j_pixel = rng.normal(0.0, 0.1, size=(3, image_size, image_size))

            a = angle[c] + d * j_angle
            proj = xx * np.cos(a) + yy * np.sin(a)
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq[c] * proj + d * j_phase)
            img = (base[c] + d * j_color)[:, None, None] * (0.55 + 0.45 * stripes)[None]
            cy, cx = centre[c] + d * j_centre
            disc = ((yy - cy) ** 2 + (xx - cx) ** 2) < radius[c] ** 2
            img = np.where(disc[None], disc_color[c][:, None, None], img)
            out[c * per_class + k] = np.clip(img + d * j_pixel, 0.0, 1.0)
    return out, labels


def make_synthetic_dataset(
    num_classes: int, per_class: int, image_size: int, difficulty: float, seed: int
) -> ImageDataset:
    raw, labels = render_synthetic(num_classes, per_class, image_size, difficulty, seed)
    images, mean = _center(raw)
    ids = [f"synthetic/class_{c:03d}/{k:04d}" for c in range(num_classes) for k in range(per_class)]
    names = [f"class_{c:03d}" for c in range(num_classes)]
    return ImageDataset(images, labels, ids, names, mean)


@dataclass(frozen=True)
class DatasetSplit:
    """Pairwise-disjoint class sets, as tuples of dataset labels."""

    meta_train: tuple[int, ...]
    meta_val: tuple[int, ...]
    meta_test: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.meta_train), set(self.meta_val), set(self.meta_test)
        if a & b or b & c or a & c:
            raise ValueError("split class sets must be pairwise disjoint")

    def part(self, name: str) -> tuple[int, ...]:
        if name not in PARTS:
            raise ValueError(f"unknown split part {name!r}; expected one of {PARTS}")
        return getattr(self, name)

    def union(self, *names: str) -> tuple[int, ...]:
        return tuple(sorted(c for n in names for c in self.part(n)))


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Floor each share, then hand leftovers to the largest remainders.

    Remainder ties go to the earlier part.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    exact = [n * f for f in fractions]
    sizes = [math.floor(x + 1e-9) for x in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_classes(dataset: ImageDataset | int, fractions: Sequence[float], seed: int) -> DatasetSplit:
    """Shuffle class labels under ``seed`` and cut them into three parts."""
    n = dataset if isinstance(dataset, int) else dataset.num_classes
    sizes = split_sizes(n, fractions)
    if min(sizes) == 0:
        raise ValueError(f"fractions {tuple(fractions)} leave an empty split for {n} classes: {sizes}")
    order = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(
        tuple(sorted(int(c) for c in order[:a])),
        tuple(sorted(int(c) for c in order[a:b])),
        tuple(sorted(int(c) for c in order[b:])),
    )


def format_split_manifest(split: DatasetSplit, class_names: Sequence[str]) -> str:
    chunks = []
    for part in PARTS:
        names = [class_names[c] for c in split.part(part)]
        chunks.append("\n".join([f"[{part}]", *names]) + "\n")
    return "\n".join(chunks)


def write_split_manifest(split: DatasetSplit, class_names: Sequence[str], path) -> None:
    Path(path).write_text(format_split_manifest(split, class_names), encoding="utf-8")


def read_split_manifest(path, class_names: Sequence[str]) -> DatasetSplit:
    return parse_split_manifest(Path(path).read_text(encoding="utf-8"), class_names)


def parse_split_manifest(text: str, class_names: Sequence[str]) -> DatasetSplit:
    index = {name: i for i, name in enumerate(class_names)}
    parts: dict[str, list[int]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in PARTS or current in parts:
                raise ValueError(f"bad or repeated manifest section [{current}]")
            parts[current] = []
        elif current is None:
            raise ValueError("manifest entry before any section header")
        elif line not in index:
            raise ValueError(f"manifest names unknown class {line!r}")
        else:
            parts[current].append(index[line])
    missing = [p for p in PARTS if p not in parts]
    if missing:
        raise ValueError(f"manifest lacks sections {missing}")
    return DatasetSplit(*(tuple(sorted(parts[p])) for p in PARTS))

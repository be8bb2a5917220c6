"""Datasets and N-way K-shot episode sampling.

Images are held per class as ``[n, H, W, 3]`` arrays (uint8 for decoded
image files, float32 in [0, 1] for synthetic data) and converted to floats
when an episode is drawn.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
MINIIMAGENET_CLASS_COUNTS = {"train": 64, "val": 16, "test": 20}
MINIIMAGENET_RESOLUTION = 84
MINIIMAGENET_IMAGES_PER_CLASS = 600
SYNTHETIC_NOISE_STD = 0.1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    class_id: int
    index: int  # position inside its class, identifies the instance


@dataclass
class DatasetSplit:
    name: str
    examples: dict[int, np.ndarray]
    class_names: dict[int, str] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.examples)

    @property
    def resolution(self) -> int:
        first = next(iter(self.examples.values()))
        return first.shape[1]

    def __len__(self) -> int:
        return sum(len(v) for v in self.examples.values())

    def image(self, class_id: int, index: int, dtype=np.float32) -> np.ndarray:
        img = self.examples[class_id][index]
        if img.dtype == np.uint8:
            return img.astype(dtype) / 255.0
        return img.astype(dtype, copy=False)


@dataclass
class Episode:
    support: list[LabeledExample]
    query: list[LabeledExample]
    way: int
    shot: int
    episode_labels: dict[int, int]

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([self.episode_labels[ex.class_id] for ex in self.support], dtype=np.intp)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([self.episode_labels[ex.class_id] for ex in self.query], dtype=np.intp)

    def support_images(self, dtype=np.float32) -> np.ndarray:
        return np.stack([ex.image for ex in self.support]).astype(dtype, copy=False)

    def query_images(self, dtype=np.float32) -> np.ndarray:
        return np.stack([ex.image for ex in self.query]).astype(dtype, copy=False)


def sample_episode(
    split: DatasetSplit,
    way: int,
    shot: int,
    queries_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an episode: ``way`` classes, ``shot`` support and ``queries_per_class`` query images each.

    Classes are drawn without replacement, then per class ``shot + queries``
    examples without replacement; the first ``shot`` go to the support set.
    Episode labels follow the order in which classes were drawn.
    """
    if way < 1 or shot < 1 or queries_per_class < 0:
        raise DatasetError("way and shot must be positive, queries_per_class non-negative")
    classes = split.classes
    if len(classes) < way:
        raise DatasetError(f"split {split.name!r} has {len(classes)} classes, need {way}")
    need = shot + queries_per_class
    chosen = rng.choice(len(classes), size=way, replace=False)
    support: list[LabeledExample] = []
    query: list[LabeledExample] = []
    labels: dict[int, int] = {}
    for local, pos in enumerate(chosen):
        cid = classes[int(pos)]
        available = len(split.examples[cid])
        if available < need:
            raise DatasetError(
                f"class {split.class_names.get(cid, cid)} in split {split.name!r} has "
                f"{available} examples, need {need}"
            )
        labels[cid] = local
        picks = rng.choice(available, size=need, replace=False)
        for k, idx in enumerate(picks):
            ex = LabeledExample(split.image(cid, int(idx)), cid, int(idx))
            (support if k < shot else query).append(ex)
    return Episode(support, query, way, shot, labels)


# ---------------------------------------------------------------------------
# image folders


def load_split(
    root,
    split_name: str,
    resolution: int = MINIIMAGENET_RESOLUTION,
    expected_classes: Optional[int] = None,
    class_offset: Optional[int] = None,
) -> DatasetSplit:
    """Load ``<root>/splits/<split>.csv`` (``filename,label``) with images from ``<root>/images``.

    Images are resized bilinearly to ``resolution`` squared and kept as uint8.
    Class ids are assigned in sorted label order, offset so the standard
    train/val/test splits get disjoint ids.
    """
    root = Path(root)
    if split_name not in SPLIT_NAMES:
        raise DatasetError(f"unknown split {split_name!r}")
    manifest = root / "splits" / f"{split_name}.csv"
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")

    rows: list[tuple[str, str]] = []
    with manifest.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["filename", "label"]:
            raise DatasetError(f"{manifest}: expected header 'filename,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise DatasetError(f"{manifest}:{lineno}: malformed row {row!r}")
            rows.append((row[0].strip(), row[1].strip()))

    labels = sorted({label for _, label in rows})
    if expected_classes is not None and len(labels) != expected_classes:
        raise DatasetError(
            f"{manifest}: split {split_name!r} has {len(labels)} classes, expected {expected_classes}"
        )
    if class_offset is None:
        class_offset = {"train": 0, "val": 1_000_000, "test": 2_000_000}[split_name]
    ids = {label: class_offset + i for i, label in enumerate(labels)}

    for filename, _ in rows:
        if not (root / "images" / filename).is_file():
            raise DatasetError(f"image file not found: {root / 'images' / filename}")

    per_class: dict[int, list[np.ndarray]] = {ids[label]: [] for label in labels}
    for filename, label in rows:
        path = root / "images" / filename
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                if im.size != (resolution, resolution):
                    im = im.resize((resolution, resolution), Image.BILINEAR)
                per_class[ids[label]].append(np.asarray(im, dtype=np.uint8))
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read image {path}: {exc}") from exc

    logger.info("loaded %s: %d classes, %d images", split_name, len(labels), len(rows))
    return DatasetSplit(
        name=split_name,
        examples={cid: np.stack(imgs) for cid, imgs in per_class.items()},
        class_names={cid: label for label, cid in ids.items()},
    )


def load_miniimagenet(root, split_name: str) -> DatasetSplit:
    """miniImageNet with the standard 64/16/20 class split, 84x84.

    Class counts are enforced; classes without the usual 600 images are
    loaded but reported with a warning.
    """
    split = load_split(
        root,
        split_name,
        resolution=MINIIMAGENET_RESOLUTION,
        expected_classes=MINIIMAGENET_CLASS_COUNTS.get(split_name),
    )
    for cid, imgs in split.examples.items():
        if len(imgs) != MINIIMAGENET_IMAGES_PER_CLASS:
            logger.warning(
                "class %s in %s has %d images, expected %d",
                split.class_names.get(cid, cid),
                split_name,
                len(imgs),
                MINIIMAGENET_IMAGES_PER_CLASS,
            )
    return split


def save_split(split: DatasetSplit, root) -> Path:
    """Write a split in the image-folder layout (PNG images + CSV manifest)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(parents=True, exist_ok=True)
    manifest = root / "splits" / f"{split.name}.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for cid in split.classes:
            label = split.class_names.get(cid, f"class{cid}")
            for i in range(len(split.examples[cid])):
                img = split.examples[cid][i]
                if img.dtype != np.uint8:
                    img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                filename = f"{split.name}_{label}_{i:04d}.png"
                Image.fromarray(img).save(root / "images" / filename)
                writer.writerow([filename, label])
    return manifest


# ---------------------------------------------------------------------------
# synthetic data


def _distant_templates(rng, count, resolution, channels=3, min_dist=None):
    """Random [0,1] templates, resampled until pairwise RMS distance is large."""
    if min_dist is None:
        min_dist = 0.25
    templates = []
    attempts = 0
    while len(templates) < count:
        cand = rng.random((resolution, resolution, channels))
        attempts += 1
        if all(np.sqrt(np.mean((cand - t) ** 2)) >= min_dist for t in templates) or attempts > 100 * count:
            templates.append(cand)
    return np.stack(templates)


def synthetic_dataset(
    num_classes: int,
    per_class: int,
    resolution: int = 32,
    mode: str = "separable",
    seed: int = 0,
    name: str = "train",
    class_offset: int = 0,
    distractor_seed: Optional[int] = None,
) -> DatasetSplit:
    """Generate a small labelled image set for desk-scale runs.

    ``separable``: each class is a random template image; every example adds
    Gaussian pixel noise (sigma 0.1).

    ``pairwise``: each class owns a single-channel spatial pattern that is
    painted into one colour channel picked at random per example; the other
    two channels carry a pattern drawn from a class-independent distractor
    pool (seeded by ``distractor_seed``, so splits can share it). Which
    channel is informative therefore changes from image to image, and
    comparing a support/query pair tells you where to look.
    """
    if resolution % 16:
        raise DatasetError(f"resolution must be divisible by 16, got {resolution}")
    if num_classes < 1 or per_class < 1:
        raise DatasetError("num_classes and per_class must be positive")
    if mode not in ("separable", "pairwise"):
        raise DatasetError(f"unknown synthetic mode {mode!r}")
    rng = np.random.default_rng(seed)
    examples: dict[int, np.ndarray] = {}

    if mode == "separable":
        templates = _distant_templates(rng, num_classes, resolution)
        for k in range(num_classes):
            noise = rng.normal(0.0, SYNTHETIC_NOISE_STD, size=(per_class, resolution, resolution, 3))
            examples[class_offset + k] = np.clip(templates[k] + noise, 0.0, 1.0).astype(np.float32)
    else:
        patterns = _distant_templates(rng, num_classes, resolution, channels=1)[..., 0]
        pool_rng = np.random.default_rng(seed if distractor_seed is None else distractor_seed)
        distractors = pool_rng.random((8, resolution, resolution))
        for k in range(num_classes):
            imgs = np.empty((per_class, resolution, resolution, 3))
            for i in range(per_class):
                channel = rng.integers(3)
                for ch in range(3):
                    if ch == channel:
                        imgs[i, :, :, ch] = patterns[k]
                    else:
                        imgs[i, :, :, ch] = distractors[rng.integers(len(distractors))]
            imgs += rng.normal(0.0, SYNTHETIC_NOISE_STD, size=imgs.shape)
            examples[class_offset + k] = np.clip(imgs, 0.0, 1.0).astype(np.float32)

    return DatasetSplit(
        name=name,
        examples=examples,
        class_names={class_offset + k: f"{mode}{class_offset + k:03d}" for k in range(num_classes)},
    )


def synthetic_splits(
    num_classes: int,
    per_class: int,
    resolution: int = 32,
    mode: str = "separable",
    seed: int = 0,
) -> dict[str, DatasetSplit]:
    """Train/val/test synthetic splits with disjoint classes and independent seeds."""
    return {
        name: synthetic_dataset(
            num_classes,
            per_class,
            resolution,
            mode,
            seed=seed * 3 + i + 1,
            name=name,
            class_offset=i * 1000,
            distractor_seed=seed * 3,
        )
        for i, name in enumerate(SPLIT_NAMES)
    }

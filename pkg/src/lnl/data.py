"""Dataset ingestion and batching.

Three sources: the CIFAR-10 binary batch format, the GTSRB folder-plus-CSV
layout, and a seeded synthetic glyph generator for desk-scale experiments.
Images are held as uint8 and expanded to float64 in [0, 1] at batch time.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor

__all__ = [
    "BatchPair",
    "DatasetSplit",
    "load_cifar10",
    "load_gtsrb",
    "synth_shapes",
    "resize_bilinear",
    "batches",
]

GTSRB_CLASSES = 43
_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


@dataclass
class BatchPair:
    """One mini-batch: images (B, 3, H, W) in [0, 1] and integer labels."""

    images: Tensor
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"bad batch image shape {self.images.shape}")
        if self.images.shape[0] != len(self.labels):
            raise ValueError("image/label count mismatch")
        lo, hi = self.images.data.min(), self.images.data.max()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel range [{lo}, {hi}] outside [0, 1]")


@dataclass
class DatasetSplit:
    """A named split with uint8 images (N, 3, H, W) and labels in
    [0, num_classes). ``order_key`` documents the deterministic ordering."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    order_key: str = "record-order"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise ValueError("split images must be uint8")
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def images_float(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def subset(self, indices) -> "DatasetSplit":
        return DatasetSplit(
            self.name, self.images[indices], self.labels[indices],
            self.num_classes, order_key=f"{self.order_key};subset",
        )


# -- CIFAR-10 binary batches --------------------------------------------------


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise ValueError(
            f"{path}: length {raw.size} is not a multiple of {_CIFAR_RECORD}"
        )
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise ValueError(f"{path}: label byte {labels.max()} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(root: str) -> dict[str, DatasetSplit]:
    """Parse the 3073-byte-record binary batches into train/test splits."""
    base = root
    nested = os.path.join(root, "cifar-10-batches-bin")
    if os.path.isdir(nested):
        base = nested
    train_imgs, train_labels = [], []
    for i in range(1, 6):
        imgs, labels = _read_cifar_file(os.path.join(base, f"data_batch_{i}.bin"))
        train_imgs.append(imgs)
        train_labels.append(labels)
    test_imgs, test_labels = _read_cifar_file(os.path.join(base, "test_batch.bin"))
    return {
        "train": DatasetSplit("train", np.concatenate(train_imgs),
                              np.concatenate(train_labels), 10),
        "test": DatasetSplit("test", test_imgs, test_labels, 10),
    }


# -- GTSRB folder + annotation CSVs -------------------------------------------


def _read_annotation_csv(path: str) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=";")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append({
                    "file": row["Filename"],
                    "x1": int(row["Roi.X1"]), "y1": int(row["Roi.Y1"]),
                    "x2": int(row["Roi.X2"]), "y2": int(row["Roi.Y2"]),
                    "class_id": int(row["ClassId"]),
                })
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed annotation row ({e})") from None
    return rows


def _load_annotated_images(
    image_dir: str, csv_path: str, image_size: int
) -> tuple[list[np.ndarray], list[int]]:
    from PIL import Image

    images, labels = [], []
    for row in _read_annotation_csv(csv_path):
        if not 0 <= row["class_id"] < GTSRB_CLASSES:
            raise ValueError(
                f"{csv_path}: class id {row['class_id']} outside 0..{GTSRB_CLASSES - 1}"
            )
        with Image.open(os.path.join(image_dir, row["file"])) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        crop = arr[row["y1"]:row["y2"], row["x1"]:row["x2"]]
        if crop.size == 0:
            crop = arr
        chw = crop.transpose(2, 0, 1)
        resized = resize_bilinear(chw, image_size)
        images.append(np.clip(np.round(resized), 0, 255).astype(np.uint8))
        labels.append(row["class_id"])
    return images, labels


def load_gtsrb(
    root: str, image_size: int = 32, val_count: int = 4000, seed: int = 0
) -> dict[str, DatasetSplit]:
    """Load the traffic-sign archive: per-class folders with semicolon CSVs.

    Training images are ROI-cropped, resized, and split train/val by a
    seeded shuffle (the last ``val_count`` of the permutation become the
    validation set). A test split is included when the test annotation
    file is present.
    """
    candidates = [
        os.path.join(root, "Final_Training", "Images"),
        os.path.join(root, "Training"),
        root,
    ]
    train_dir = next((d for d in candidates if _has_class_folders(d)), None)
    if train_dir is None:
        raise FileNotFoundError(f"no class folders under {root}")

    images, labels = [], []
    for entry in sorted(os.listdir(train_dir)):
        class_dir = os.path.join(train_dir, entry)
        if not (os.path.isdir(class_dir) and entry.isdigit()):
            continue
        csvs = [f for f in os.listdir(class_dir) if f.lower().endswith(".csv")]
        if not csvs:
            continue
        imgs, labs = _load_annotated_images(
            class_dir, os.path.join(class_dir, sorted(csvs)[0]), image_size
        )
        images.extend(imgs)
        labels.extend(labs)
    if not images:
        raise FileNotFoundError(f"no annotated images under {train_dir}")

    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(labels))
    if not 0 < val_count < len(labels):
        raise ValueError(f"val_count {val_count} unusable for {len(labels)} images")
    train_idx, val_idx = order[:-val_count], order[-val_count:]
    key = f"class-folder-sorted;shuffle(seed={seed})"
    splits = {
        "train": DatasetSplit("train", images[train_idx], labels[train_idx],
                              GTSRB_CLASSES, order_key=key),
        "val": DatasetSplit("val", images[val_idx], labels[val_idx],
                            GTSRB_CLASSES, order_key=key),
    }

    test = _load_gtsrb_test(root, image_size)
    if test is not None:
        splits["test"] = test
    return splits


def _has_class_folders(d: str) -> bool:
    if not os.path.isdir(d):
        return False
    return any(e.isdigit() and os.path.isdir(os.path.join(d, e))
               for e in os.listdir(d))


def _load_gtsrb_test(root: str, image_size: int) -> Optional[DatasetSplit]:
    for images_dir, csv_path in [
        (os.path.join(root, "Final_Test", "Images"),
         os.path.join(root, "Final_Test", "Images", "GT-final_test.csv")),
        (os.path.join(root, "Test"), os.path.join(root, "Test", "GT-final_test.csv")),
    ]:
        if os.path.exists(csv_path):
            imgs, labs = _load_annotated_images(images_dir, csv_path, image_size)
            return DatasetSplit("test", np.stack(imgs), np.asarray(labs),
                                GTSRB_CLASSES, order_key="annotation-order")
    return None


# -- bilinear resize ----------------------------------------------------------


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    """Resize (C, H, W) to (C, target, target), align-corners=false."""
    if target <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {img.shape}")
    _, h, w = img.shape

    def axis_coords(t, s):
        c = np.clip((np.arange(t) + 0.5) * (s / t) - 0.5, 0, s - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, s - 1)
        return lo, hi, c - lo

    ylo, yhi, fy = axis_coords(target, h)
    xlo, xhi, fx = axis_coords(target, w)
    top = img[:, ylo][:, :, xlo] * (1.0 - fx) + img[:, ylo][:, :, xhi] * fx
    bottom = img[:, yhi][:, :, xlo] * (1.0 - fx) + img[:, yhi][:, :, xhi] * fx
    return top * (1.0 - fy)[None, :, None] + bottom * fy[None, :, None]


# -- synthetic glyph dataset --------------------------------------------------

GLYPHS = ("disc", "triangle", "bar", "ring", "cross", "box")


def _glyph_mask(name: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    dist2 = dx * dx + dy * dy
    if name == "disc":
        return dist2 <= r * r
    if name == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.55 * (dy + r))
    if name == "bar":
        return (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)
    if name == "ring":
        return (dist2 <= r * r) & (dist2 >= (0.55 * r) ** 2)
    if name == "cross":
        return ((np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)
        )
    if name == "box":
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        return (cheb <= r) & (cheb >= 0.55 * r)
    raise ValueError(f"unknown glyph {name!r}")


def synth_shapes(n: int, classes: int, size: int, seed: int) -> DatasetSplit:
    """Colored geometric glyphs on noisy backgrounds, labels round-robin.

    Classes differ only in glyph shape; color, position, size, brightness,
    and background noise all vary per image, so shape (local edge structure)
    is the discriminative signal. Bit-reproducible from the seed.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if not 2 <= classes <= len(GLYPHS):
        raise ValueError(f"classes must be in 2..{len(GLYPHS)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A9E]))
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % classes
        base = rng.uniform(0.15, 0.45, size=3)
        noise = rng.normal(0.0, 0.06, size=(3, size, size))
        img = base[:, None, None] + noise
        color = rng.uniform(0.6, 1.0, size=3)
        cx = size / 2 + rng.uniform(-size / 6, size / 6)
        cy = size / 2 + rng.uniform(-size / 6, size / 6)
        r = size * rng.uniform(0.18, 0.28)
        mask = _glyph_mask(GLYPHS[label], size, cx, cy, r)
        img = np.where(mask, color[:, None, None], img)
        img = np.clip(img * rng.uniform(0.8, 1.1), 0.0, 1.0)
        images[i] = np.round(img * 255.0).astype(np.uint8)
        labels[i] = label
    return DatasetSplit("synth", images, labels, classes,
                        order_key=f"round-robin(seed={seed})")


# -- batching -----------------------------------------------------------------


def batches(
    split: DatasetSplit,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[BatchPair]:
    """Yield BatchPairs; shuffled order is derived from (seed, epoch) so an
    epoch's order is reproducible without any carried RNG state."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    n = len(split)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = split.images[idx].astype(np.float64) / 255.0
        yield BatchPair(Tensor(images), split.labels[idx])

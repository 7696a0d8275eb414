"""Synthetic pixel-labelling data: rectangles and discs on a noisy background."""

import os
from dataclasses import dataclass

import numpy as np

from .errors import RangeError, ShapeError
from .network import IGNORE
from .tensor import Rng, load_tensor, save_tensor

BAND_HALF_WIDTH = 0.05


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 48
    num_classes: int = 3
    shapes_per_image: tuple = (1, 3)
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise RangeError("need at least 2 classes (background + one shape class)")
        if self.image_size < 16:
            raise RangeError("image_size must be >= 16")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise RangeError(f"bad shapes_per_image range {self.shapes_per_image}")


@dataclass
class Sample:
    image: np.ndarray   # (H, W, 1)
    labels: np.ndarray  # (H, W) int64


def _draw_shape_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = max(3, size // 8), max(4, size // 3)
    if rng.random() < 0.5:
        h = rng.randint(lo, hi)
        w = rng.randint(lo, hi)
        top = rng.randint(0, size - h)
        left = rng.randint(0, size - w)
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    r = rng.randint(max(2, lo // 2), max(3, hi // 2))
    cy = rng.randint(r, size - 1 - r)
    cx = rng.randint(r, size - 1 - r)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _draw_sample(rng, cfg):
    k_shapes = cfg.num_classes - 1
    size = cfg.image_size
    while True:
        labels = np.zeros((size, size), dtype=np.int64)
        owner = np.full((size, size), -1)
        n = rng.randint(*cfg.shapes_per_image)
        for s in range(n):
            cls = rng.randint(1, k_shapes)
            mask = _draw_shape_mask(rng, size)
            labels[mask] = cls
            owner[mask] = s
        # later shapes occlude earlier ones; redraw if one vanished entirely
        if len(np.unique(owner[owner >= 0])) == n:
            break
    centre = labels / k_shapes
    band = rng.fill(size * size, -BAND_HALF_WIDTH, BAND_HALF_WIDTH).reshape(size, size)
    noise = np.array([rng.normal() for _ in range(size * size)]).reshape(size, size)
    image = centre + band + cfg.noise_sigma * noise
    return Sample(image[:, :, None], labels)


def gen_dataset(cfg, n):
    rng = Rng(cfg.seed)
    return [_draw_sample(rng, cfg) for _ in range(n)]


def threshold_classifier(image, num_classes):
    """Nearest intensity band; the obvious baseline on this data."""
    k = num_classes - 1
    return np.clip(np.rint(image[:, :, 0] * k), 0, k).astype(np.int64)


def _check_pair(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {labels.shape}")
    return pred, labels


def pixel_accuracy(pred, labels):
    pred, labels = _check_pair(pred, labels)
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        return 0.0
    return float((pred[valid] == labels[valid]).sum()) / n


def mean_iou(pred, labels, num_classes):
    """Mean over classes of |pred ∩ label| / |pred ∪ label|, background included.

    Ignored positions (label -1) are dropped first; classes absent from both
    maps are left out of the mean.  Stack or concatenate maps to score a
    whole dataset at once.
    """
    pred, labels = _check_pair(pred, labels)
    valid = labels != IGNORE
    p = pred[valid]
    t = labels[valid]
    ious = []
    for k in range(num_classes):
        union = int(((p == k) | (t == k)).sum())
        if union:
            ious.append(int(((p == k) & (t == k)).sum()) / union)
    return float(np.mean(ious)) if ious else 0.0


def image_label(labels):
    """Most frequent shape class in a label map (smallest id on ties), else 0."""
    counts = np.bincount(labels[labels > 0].ravel())
    return int(counts.argmax()) if counts.size and counts.max() > 0 else 0


def save_dataset(samples, directory):
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        stem = os.path.join(directory, f"sample_{i:05d}")
        save_tensor(stem + ".img.eten", s.image)
        save_tensor(stem + ".lbl.eten", s.labels[:, :, None].astype(np.float64))


def load_dataset(directory):
    stems = sorted(f[: -len(".img.eten")] for f in os.listdir(directory) if f.endswith(".img.eten"))
    samples = []
    for stem in stems:
        base = os.path.join(directory, stem)
        image = load_tensor(base + ".img.eten")
        labels = load_tensor(base + ".lbl.eten")[:, :, 0]
        samples.append(Sample(image, labels.astype(np.int64)))
    return samples

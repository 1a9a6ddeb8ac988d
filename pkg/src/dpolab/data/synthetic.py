"""Procedurally rendered shape images, so nothing needs downloading."""

import numpy as np

from dpolab.data.dataset import Dataset
from dpolab.rng import stream

SHAPES = ("bar", "disk", "cross")


def _render(kind, cy, cx, radius, size):
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if kind == "bar":
        return (np.abs(dy) <= 0.75) & (np.abs(dx) <= radius)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= radius ** 2
    return ((np.abs(dy) <= 0.5) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= 0.5) & (np.abs(dy) <= radius))


def class_anchor(label, classes, size):
    """Class-dependent shape centre on a ring around the image centre."""
    angle = 2 * np.pi * label / classes
    ring = size / 4
    return (size - 1) / 2 + ring * np.sin(angle), (size - 1) / 2 + ring * np.cos(angle)


def synth_dataset(classes=4, per_class=100, size=16, seed=0, noise=0.1, split="train",
                  contrast=(0.6, 1.0), background=0.0):
    """Balanced dataset of bars, disks and crosses at class-dependent positions.

    Class ``k`` draws shape ``SHAPES[k % 3]`` near ``class_anchor(k)`` with
    +-1 px jitter and an intensity drawn from ``contrast`` above a flat
    ``background``, plus clipped Gaussian pixel noise.  Deterministic per
    ``seed``.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if size < 8:
        raise ValueError("size must be >= 8")
    rng = stream(seed, "synth:" + split, classes, per_class, size)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    radius = max(1.5, size / 8)
    images = np.empty((n, 1, size, size))
    for i, label in enumerate(labels):
        cy, cx = class_anchor(label, classes, size)
        cy += rng.integers(-1, 2)
        cx += rng.integers(-1, 2)
        mask = _render(SHAPES[label % 3], cy, cx, radius, size)
        img = background + mask * rng.uniform(*contrast) + rng.normal(0.0, noise, (size, size))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, split)


def separable_dataset(per_class=100, size=8, seed=0):
    """Two classes split by mean brightness of the left versus right half."""
    rng = stream(seed, "separable", per_class, size)
    n = 2 * per_class
    labels = np.repeat([0, 1], per_class)[rng.permutation(n)]
    images = rng.uniform(0.0, 0.4, (n, 1, size, size))
    half = size // 2
    for i, label in enumerate(labels):
        if label == 0:
            images[i, 0, :, :half] += 0.5
        else:
            images[i, 0, :, half:] += 0.5
    return Dataset(np.clip(images, 0, 1), labels, 2)

from dataclasses import dataclass
import hashlib

import numpy as np

from dpolab.errors import ConsistencyError


@dataclass
class Dataset:
    """Images in [0, 1] as an (N, C, H, W) float64 array with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConsistencyError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConsistencyError(f"labels must lie in [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConsistencyError("pixels must lie in [0, 1]")
        if self.split not in ("train", "eval"):
            raise ConsistencyError(f"split must be 'train' or 'eval', got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(str(self.class_count).encode())
        return h.hexdigest()[:16]

    def subset(self, start, stop):
        return Dataset(self.images[start:stop], self.labels[start:stop], self.class_count, self.split)

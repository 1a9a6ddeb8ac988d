"""Reader and writer for the IDX format used by MNIST-style files.

Layout (big-endian)::

    [0:2]  zero bytes
    [2]    element type, 0x08 = unsigned byte
    [3]    number of dimensions
    [4:]   one uint32 per dimension, then the raw elements

Files ending in ``.gz`` are transparently (de)compressed.
"""

import gzip
import struct

import numpy as np

from dpolab.data.dataset import Dataset
from dpolab.errors import ConsistencyError, FormatError

UBYTE = 0x08


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path):
    """Return ``(dims, payload_bytes)`` without checking the payload length."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != UBYTE or raw[3] == 0:
        raise FormatError(f"{path}: bad IDX magic number {raw[:4].hex() or '<empty>'}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    return dims, raw[header:]


def write_idx(path, array):
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    with _open(path, "wb") as f:
        f.write(bytes([0, 0, UBYTE, arr.ndim]))
        f.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_idx(image_path, label_path, class_count=None, split="train"):
    """Load an image/label IDX pair; pixels are raw bytes divided by 255."""
    img_dims, img_raw = read_idx(image_path)
    lab_dims, lab_raw = read_idx(label_path)
    if len(img_dims) != 3:
        raise FormatError(f"{image_path}: expected 3 image dimensions (N, H, W), got {len(img_dims)}")
    if len(lab_dims) != 1:
        raise FormatError(f"{label_path}: expected 1 label dimension, got {len(lab_dims)}")
    n, h, w = img_dims
    if lab_dims[0] != n:
        raise ConsistencyError(f"{image_path} holds {n} images but {label_path} declares {lab_dims[0]} labels")
    if len(img_raw) != n * h * w:
        raise ConsistencyError(f"{image_path}: expected {n * h * w} pixel bytes, found {len(img_raw)}")
    if len(lab_raw) != n:
        raise ConsistencyError(f"{label_path}: expected {n} label bytes, found {len(lab_raw)}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8).reshape(n, 1, h, w)
    labels = np.frombuffer(lab_raw, dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = max(2, int(labels.max()) + 1) if n else 2
    return Dataset(pixels / 255.0, labels, class_count, split)


def save_idx(dataset, image_path, label_path):
    """Write a single-channel dataset back to IDX (pixels rounded to bytes)."""
    if dataset.images.shape[1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    write_idx(image_path, np.round(dataset.images[:, 0] * 255).astype(np.uint8))
    write_idx(label_path, dataset.labels.astype(np.uint8))

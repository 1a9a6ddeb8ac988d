"""Orthonormal 2-D DCT-II and its inverse over the last two axes."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def dct_matrix(n):
    """Orthonormal DCT-II basis, rows indexed by frequency."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    mat.setflags(write=False)
    return mat


def _check(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ValueError(f"dct2 needs at least a 1x1 trailing image, got shape {x.shape}")
    return x


def dct2(x):
    x = _check(x)
    ch, cw = dct_matrix(x.shape[-2]), dct_matrix(x.shape[-1])
    return ch @ x @ cw.T


def idct2(c):
    c = _check(c)
    ch, cw = dct_matrix(c.shape[-2]), dct_matrix(c.shape[-1])
    return ch.T @ c @ cw

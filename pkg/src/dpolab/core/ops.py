"""Reverse-mode differentiation over a recorded chain of array operations.

Every op takes float64 arrays, returns its output, and pushes a backward
closure onto a :class:`Tape`.  ``Tape.backward`` replays the closures in
reverse order and returns the gradient with respect to the tape input plus a
dictionary of parameter gradients keyed by parameter name.

Spatial ops work on channel-major ``(C, N, H, W)`` activations so that the
patch unfolding in :func:`conv2d` copies contiguous rows; :func:`to_cnhw`
and :func:`flatten` convert at the network boundaries.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class Node:
    op: str
    backward: Callable
    params: tuple = ()


@dataclass
class Tape:
    """Topologically ordered operation records of one forward pass."""

    nodes: list = field(default_factory=list)
    want_params: bool = True

    def push(self, op, backward, params=()):
        self.nodes.append(Node(op, backward, tuple(params)))

    def backward(self, grad):
        """Propagate ``grad`` from the last node back to the tape input.

        Each node is visited exactly once.
        """
        param_grads = {}
        for node in reversed(self.nodes):
            grad, pg = node.backward(grad, self.want_params)
            for name, g in pg.items():
                if name in param_grads:
                    param_grads[name] = param_grads[name] + g
                else:
                    param_grads[name] = g
        return grad, param_grads


def _record(tape, op, backward, params=()):
    if tape is not None:
        tape.push(op, backward, params)


def to_cnhw(x, tape=None):
    out = np.ascontiguousarray(x.transpose(1, 0, 2, 3))

    def backward(g, want_params=True):
        return np.ascontiguousarray(g.transpose(1, 0, 2, 3)), {}

    _record(tape, "to_cnhw", backward)
    return out


def conv2d(x, weight, bias, pad=0, tape=None, names=("w", "b")):
    """Stride-1 cross-correlation of a (C, N, H, W) batch with OIhw kernels.

    Lowered to one matrix product over unfolded patches.
    """
    c, n, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + ho, j:j + wo]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.reshape(o, -1)
    out = (wmat @ cols + bias[:, None]).reshape(o, n, ho, wo)

    def backward(g, want_params=True):
        gmat = g.reshape(o, n * ho * wo)
        pg = {}
        if want_params:
            pg[names[0]] = (gmat @ cols.T).reshape(weight.shape)
            pg[names[1]] = gmat.sum(axis=1)
        gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, pg

    _record(tape, "conv2d", backward, names)
    return out


def dense(x, weight, bias, tape=None, names=("w", "b")):
    """Affine map ``x @ weight.T + bias`` for a 2-D batch."""
    out = x @ weight.T + bias

    def backward(g, want_params=True):
        pg = {names[0]: g.T @ x, names[1]: g.sum(axis=0)} if want_params else {}
        return g @ weight, pg

    _record(tape, "dense", backward, names)
    return out


def relu(x, tape=None):
    mask = x > 0
    out = np.maximum(x, 0.0)

    def backward(g, want_params=True):
        return np.where(mask, g, 0.0), {}

    _record(tape, "relu", backward)
    return out


def max_pool(x, k=2, tape=None):
    """Non-overlapping k x k max pooling over the last two axes.

    Ties go to the first offset in row-major window order.
    """
    ho, wo = x.shape[-2] // k, x.shape[-1] // k
    offsets = [(i, j) for i in range(k) for j in range(k)]
    out = x[..., 0:ho * k:k, 0:wo * k:k].copy()
    idx = np.zeros(out.shape, dtype=np.intp)
    for t, (i, j) in enumerate(offsets[1:], start=1):
        cand = x[..., i:ho * k:k, j:wo * k:k]
        better = cand > out
        np.maximum(out, cand, out=out)
        np.copyto(idx, t, where=better)

    def backward(g, want_params=True):
        gx = np.zeros(x.shape)
        for t, (i, j) in enumerate(offsets):
            gx[..., i:ho * k:k, j:wo * k:k] = np.where(idx == t, g, 0.0)
        return gx, {}

    _record(tape, "max_pool", backward)
    return out


def mean_pool(x, k=2, tape=None):
    """Non-overlapping k x k average pooling over the last two axes."""
    ho, wo = x.shape[-2] // k, x.shape[-1] // k
    out = np.zeros(x.shape[:-2] + (ho, wo))
    for i in range(k):
        for j in range(k):
            out += x[..., i:ho * k:k, j:wo * k:k]
    out /= k * k

    def backward(g, want_params=True):
        gx = np.zeros(x.shape)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[..., i:ho * k:k, j:wo * k:k] = share
        return gx, {}

    _record(tape, "mean_pool", backward)
    return out


def flatten(x, tape=None):
    """(C, N, H, W) activations to (N, C*H*W) rows in per-image C, H, W order."""
    shape = x.shape
    out = x.transpose(1, 0, 2, 3).reshape(shape[1], -1)

    def backward(g, want_params=True):
        return np.ascontiguousarray(
            g.reshape(shape[1], shape[0], shape[2], shape[3]).transpose(1, 0, 2, 3)
        ), {}

    _record(tape, "flatten", backward)
    return out


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Per-row cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(logits.shape[0])
    logp = log_softmax(logits)
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return losses, grad

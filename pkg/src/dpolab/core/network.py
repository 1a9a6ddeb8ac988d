"""Small classifier architectures, forward evaluation and input gradients."""

from dataclasses import dataclass, field

import numpy as np

from dpolab.core import ops
from dpolab.errors import ConfigError, InputError
from dpolab.rng import stream

# Layer specs: ("conv", name, out_channels, kernel, pad), ("dense", name, out),
# ("relu",), ("maxpool", k), ("meanpool", k), ("flatten",).  A dense layer
# with out=None is the classifier head.
ARCHITECTURES = {
    "mlp2": [
        ("flatten",),
        ("dense", "fc1", 64),
        ("relu",),
        ("dense", "fc2", None),
    ],
    "cnn-a": [
        ("conv", "conv1", 8, 3, 1),
        ("relu",),
        ("maxpool", 2),
        ("conv", "conv2", 16, 3, 1),
        ("relu",),
        ("maxpool", 2),
        ("flatten",),
        ("dense", "fc", None),
    ],
    "cnn-b": [
        ("conv", "conv1", 6, 5, 2),
        ("relu",),
        ("maxpool", 2),
        ("flatten",),
        ("dense", "fc1", 32),
        ("relu",),
        ("dense", "fc2", None),
    ],
    "cnn-c": [
        ("conv", "conv1", 8, 3, 1),
        ("relu",),
        ("meanpool", 2),
        ("conv", "conv2", 12, 3, 0),
        ("relu",),
        ("flatten",),
        ("dense", "fc", None),
    ],
}


@dataclass
class TrainedModel:
    """Architecture id, named float64 weights and training metadata.

    ``metadata`` always carries ``input_shape`` (C, H, W) and ``classes``;
    trained models also record seed, epochs, train accuracy and the dataset
    fingerprint.
    """

    arch_id: str
    weights: dict
    metadata: dict = field(default_factory=dict)

    @property
    def input_shape(self):
        return tuple(self.metadata["input_shape"])

    @property
    def classes(self):
        return int(self.metadata["classes"])

    @property
    def name(self):
        return self.metadata.get("name") or f"{self.arch_id}-s{self.metadata.get('seed', 0)}"


def layer_shapes(arch_id, input_shape, classes):
    """Expected weight shapes for ``arch_id`` on inputs of ``input_shape``."""
    if arch_id not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}")
    c, h, w = input_shape
    flat = None
    shapes = {}
    for layer in ARCHITECTURES[arch_id]:
        kind = layer[0]
        if kind == "conv":
            _, name, out, k, pad = layer
            shapes[name + ".w"] = (out, c, k, k)
            shapes[name + ".b"] = (out,)
            c, h, w = out, h + 2 * pad - k + 1, w + 2 * pad - k + 1
        elif kind in ("maxpool", "meanpool"):
            h, w = h // layer[1], w // layer[1]
        elif kind == "flatten":
            flat = c * h * w
        elif kind == "dense":
            _, name, out = layer
            out = classes if out is None else out
            shapes[name + ".w"] = (out, flat)
            shapes[name + ".b"] = (out,)
            flat = out
        if h < 1 or w < 1:
            raise ConfigError(f"input {input_shape} too small for {arch_id}")
    return shapes


def init_model(arch_id, input_shape, classes, seed):
    """Seeded He-normal initialisation with zero biases."""
    shapes = layer_shapes(arch_id, tuple(input_shape), classes)
    rng = stream(seed, "init:" + arch_id)
    weights = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    meta = {"input_shape": list(input_shape), "classes": int(classes), "seed": int(seed), "epochs": 0}
    return TrainedModel(arch_id, weights, meta)


def check_weights(model):
    expected = layer_shapes(model.arch_id, model.input_shape, model.classes)
    if set(expected) != set(model.weights):
        raise ConfigError(f"{model.arch_id}: weight names {sorted(model.weights)} != {sorted(expected)}")
    for name, shape in expected.items():
        if tuple(model.weights[name].shape) != shape:
            raise ConfigError(f"{model.arch_id}.{name}: expected shape {shape}, got {model.weights[name].shape}")


def _as_batch(model, images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ConfigError(
            f"{model.arch_id} expects images of shape (N, {', '.join(map(str, model.input_shape))}), "
            f"got {x.shape}"
        )
    return x


def forward(model, images, tape=None):
    """Logits of ``model`` on an NCHW batch."""
    x = ops.to_cnhw(_as_batch(model, images), tape)
    w = model.weights
    for layer in ARCHITECTURES[model.arch_id]:
        kind = layer[0]
        if kind == "conv":
            name, pad = layer[1], layer[4]
            x = ops.conv2d(x, w[name + ".w"], w[name + ".b"], pad, tape, (name + ".w", name + ".b"))
        elif kind == "dense":
            name = layer[1]
            x = ops.dense(x, w[name + ".w"], w[name + ".b"], tape, (name + ".w", name + ".b"))
        elif kind == "relu":
            x = ops.relu(x, tape)
        elif kind == "maxpool":
            x = ops.max_pool(x, layer[1], tape)
        elif kind == "meanpool":
            x = ops.mean_pool(x, layer[1], tape)
        elif kind == "flatten":
            x = ops.flatten(x, tape)
    return x


def predict(model, images):
    return forward(model, images).argmax(axis=1)


def _check_labels(labels, classes, n):
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = np.full(n, int(labels))
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"label outside [0, {classes}): {labels.min()}..{labels.max()}")
    return labels.astype(np.int64)


def loss_and_input_grad(model, images, labels, target=None):
    """Summed cross-entropy over the batch and its gradient w.r.t. the images.

    With ``target=None`` the loss is taken toward the true ``labels``;
    otherwise toward class ``target`` for every image (the targeted attack
    then descends this loss).
    """
    x = _as_batch(model, images)
    goal = _check_labels(labels if target is None else target, model.classes, len(x))
    tape = ops.Tape(want_params=False)
    logits = forward(model, x, tape)
    losses, glogits = ops.cross_entropy(logits, goal)
    gx, _ = tape.backward(glogits)
    return float(losses.sum()), gx


def loss_and_param_grads(model, images, labels):
    """Mean cross-entropy, its parameter gradients and the logits."""
    x = _as_batch(model, images)
    labels = _check_labels(labels, model.classes, len(x))
    tape = ops.Tape()
    logits = forward(model, x, tape)
    losses, glogits = ops.cross_entropy(logits, labels)
    _, pg = tape.backward(glogits / len(x))
    return float(losses.mean()), pg, logits

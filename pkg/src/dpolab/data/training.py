import numpy as np

from dpolab.core.network import forward, init_model, loss_and_param_grads
from dpolab.core.ops import cross_entropy
from dpolab.errors import ConfigError
from dpolab.rng import stream


def train_model(arch_id, dataset, epochs=5, learning_rate=0.05, momentum=0.9, seed=0, batch_size=32, name=None):
    """Minibatch SGD with momentum on mean cross-entropy.

    ``epochs=0`` returns the seeded initial weights untouched.  The result is
    a pure function of the arguments.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    model = init_model(arch_id, dataset.input_shape, dataset.class_count, seed)
    velocity = {k: np.zeros_like(v) for k, v in model.weights.items()}
    n = len(dataset)
    for epoch in range(epochs):
        order = stream(seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grads, _ = loss_and_param_grads(model, dataset.images[idx], dataset.labels[idx])
            for k, g in grads.items():
                velocity[k] = momentum * velocity[k] + g
                model.weights[k] = model.weights[k] - learning_rate * velocity[k]
    loss, acc = evaluate(model, dataset)
    model.metadata.update(
        name=name or f"{arch_id}-s{seed}",
        epochs=int(epochs),
        learning_rate=float(learning_rate),
        momentum=float(momentum),
        batch_size=int(batch_size),
        train_accuracy=acc,
        train_loss=loss,
        dataset=dataset.fingerprint(),
    )
    return model


def evaluate(model, dataset, batch_size=512):
    """Mean cross-entropy and accuracy of ``model`` on ``dataset``."""
    losses, hits = [], 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = forward(model, x)
        losses.append(cross_entropy(logits, y)[0])
        hits += int((logits.argmax(axis=1) == y).sum())
    return float(np.concatenate(losses).mean()), hits / len(dataset)

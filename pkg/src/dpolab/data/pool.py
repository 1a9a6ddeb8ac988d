"""Surrogate / validation / test model pools."""

from dataclasses import dataclass, field
import logging
import os

from dpolab.data.persistence import load_model, save_model
from dpolab.data.synthetic import synth_dataset
from dpolab.data.training import train_model
from dpolab.errors import ConfigError, FormatError
from dpolab.parallel import pmap

log = logging.getLogger(__name__)

ROLES = ("surrogates", "validation", "test")

# (arch_id, seed) entries; four architectures, distinct seeds per role.
DESK_POOL = {
    "surrogates": [("cnn-a", 0)],
    "validation": [("mlp2", 1), ("cnn-b", 1), ("cnn-c", 1), ("cnn-a", 1)],
    "test": [("mlp2", 2), ("cnn-b", 2), ("cnn-c", 2), ("cnn-a", 2)],
}
DESK_DATA = {"classes": 8, "per_class": 200, "size": 16, "seed": 0,
             "noise": 0.05, "contrast": [0.2, 0.4], "background": 0.4}
DESK_TRAINING = {"epochs": 5, "learning_rate": 0.05, "momentum": 0.9}


@dataclass
class ModelPool:
    surrogates: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        for role in ROLES:
            for model in getattr(self, role):
                other = seen.get(model.name)
                if other is not None:
                    raise ConfigError(f"model {model.name} appears in both {other} and {role}")
                seen[model.name] = role

    def names(self, role):
        return [m.name for m in getattr(self, role)]


def desk_datasets(classes=8, per_class=200, size=16, seed=0, noise=0.05, contrast=(0.2, 0.4), background=0.4):
    """Default synthetic train split and a disjointly seeded eval split."""
    look = {"noise": noise, "contrast": tuple(contrast), "background": background}
    train = synth_dataset(classes, per_class, size, seed, split="train", **look)
    evaluation = synth_dataset(classes, per_class // 2, size, seed, split="eval", **look)
    return train, evaluation


def _obtain(entry, dataset, training, cache_dir):
    arch_id, seed = entry
    name = f"{arch_id}-s{seed}"
    path = os.path.join(cache_dir, name + ".dpow") if cache_dir else None
    if path and os.path.exists(path):
        try:
            model = load_model(path)
        except FormatError as exc:
            log.warning("ignoring unreadable cached model %s: %s", path, exc)
        else:
            meta = model.metadata
            if meta.get("dataset") == dataset.fingerprint() and all(meta.get(k) == v for k, v in training.items()):
                return model
    model = train_model(arch_id, dataset, seed=seed, name=name, **training)
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        save_model(model, path)
    return model


def build_pool(dataset, spec=None, training=None, cache_dir=None, workers=1):
    """Train (or load cached) models for every role of ``spec``."""
    spec = spec or DESK_POOL
    training = dict(DESK_TRAINING, **(training or {}))
    unknown = set(spec) - set(ROLES)
    if unknown:
        raise ConfigError(f"unknown pool roles {sorted(unknown)}")
    entries = [(role, tuple(e)) for role in ROLES for e in spec.get(role, [])]
    models = pmap(lambda item: _obtain(item[1], dataset, training, cache_dir), entries, workers)
    grouped = {role: [] for role in ROLES}
    for (role, _), model in zip(entries, models):
        grouped[role].append(model)
    return ModelPool(**grouped)

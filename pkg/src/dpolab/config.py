"""Run configuration: one JSON document, parsed strictly into typed pieces."""

from dataclasses import dataclass, field
import copy
import json

import numpy as np

from dpolab.attack import AttackConfig
from dpolab.data.idx import load_idx
from dpolab.data.pool import DESK_DATA, DESK_POOL, DESK_TRAINING, desk_datasets
from dpolab.dpo import DEFAULT_REFINE_WIDTH, Slot, default_anchors, transform_slots
from dpolab.errors import ConfigError
from dpolab.rng import stream
from dpolab.transforms import PARAMETERS, TransformSpec, grid

SECTIONS = {
    "run_id": "desk",
    "seed": 0,
    "output": "out",
    "dataset": {"synthetic": dict(DESK_DATA)},
    "pool": {"spec": {role: [list(e) for e in entries] for role, entries in DESK_POOL.items()},
             "training": dict(DESK_TRAINING), "cache_dir": None},
    "transform": {"kind": "noise", "z": [0.14]},
    "attack": {"epsilon": 16 / 255, "iterations": 10, "momentum": 1.0, "copies": 1, "target": None,
               "checkpoint_epochs": []},
    "batch": {"size": None},
    "sweep": {"z_values": None, "iterations": [5, 50], "seeds": None, "exclude_benign_errors": False},
    "dpo": {"slots": None, "refine_width": DEFAULT_REFINE_WIDTH, "mode": "bisect", "noise_floor": None,
            "anchors": None, "cache": False, "grid_search": False},
    "kl": {"sample_count": 50, "draws_per_sample": 1, "z_values": None},
    "report": {"format": "json"},
}
DATASET_KEYS = {"synthetic": set(DESK_DATA) | {"noise", "contrast", "background"},
                "idx": {"train_images", "train_labels", "eval_images", "eval_labels", "class_count"}}


def _merge(defaults, given, where):
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        nested = not where and isinstance(defaults[key], dict)
        out[key] = _merge(defaults[key], value, key) if nested else value
    return out


@dataclass
class RunConfig:
    raw: dict
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, given, overrides=None):
        given = copy.deepcopy(given)
        dataset = given.pop("dataset", None)
        raw = _merge(SECTIONS, given, "")
        if dataset is not None:
            if not isinstance(dataset, dict) or len(dataset) != 1 or next(iter(dataset)) not in DATASET_KEYS:
                raise ConfigError("dataset must be {\"synthetic\": {...}} or {\"idx\": {...}}")
            source, params = next(iter(dataset.items()))
            unknown = set(params) - DATASET_KEYS[source]
            if unknown:
                raise ConfigError(f"unknown key(s) in dataset.{source}: {', '.join(sorted(unknown))}")
            raw["dataset"] = {source: dict(DESK_DATA, **params) if source == "synthetic" else dict(params)}
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        raw.update(overrides)
        cfg = cls(raw, overrides)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=None):
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_dict(data, overrides)

    def validate(self):
        """Build every typed piece once so errors surface before any work."""
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.raw["run_id"], str) or not self.raw["run_id"] or "/" in self.raw["run_id"]:
            raise ConfigError("run_id must be a non-empty name without '/'")
        self.attack()
        self.transform()
        self.slots()
        size = self.raw["batch"]["size"]
        if size is not None and (not isinstance(size, int) or size < 1):
            raise ConfigError("batch.size must be a positive integer or null (whole eval split)")
        if self.raw["report"]["format"] not in ("json", "csv"):
            raise ConfigError("report.format must be 'json' or 'csv'")
        if self.raw["dpo"]["mode"] not in ("bisect", "ternary"):
            raise ConfigError("dpo.mode must be 'bisect' or 'ternary'")
        for t in self.raw["sweep"]["iterations"]:
            if not isinstance(t, int) or t < 1:
                raise ConfigError("sweep.iterations must be positive integers")
        if self.raw["kl"]["sample_count"] < 1 or self.raw["kl"]["draws_per_sample"] < 1:
            raise ConfigError("kl.sample_count and kl.draws_per_sample must be >= 1")

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def run_id(self):
        return self.raw["run_id"]

    @property
    def output(self):
        return self.raw["output"]

    def attack(self, **changes):
        params = dict(self.raw["attack"], seed=self.seed, **changes)
        params["checkpoint_epochs"] = tuple(params.get("checkpoint_epochs") or ())
        return AttackConfig.from_dict(params)

    def transform(self, reference=None):
        t = self.raw["transform"]
        unknown = set(t) - {"kind", "z"}
        if unknown:
            raise ConfigError(f"unknown key(s) in transform: {', '.join(sorted(unknown))}")
        kind = t.get("kind")
        z = t.get("z")
        if kind not in PARAMETERS:
            raise ConfigError(f"unknown transform kind {kind!r}")
        if kind == "admix":
            pool, labels = reference if reference is not None else (np.full((1, 1, 2, 2), 0.5), None)
            return TransformSpec(kind, z, pool, labels)
        return TransformSpec(kind, z)

    def slots(self):
        kind = self.raw["transform"]["kind"]
        given = self.raw["dpo"]["slots"]
        if given is None:
            return transform_slots(kind) if PARAMETERS.get(kind) else []
        return [Slot.from_dict(s) for s in given]

    def anchors(self):
        given = self.raw["dpo"]["anchors"]
        return default_anchors(self.raw["transform"]["kind"]) if given is None else dict(given)

    def sweep_z_values(self):
        given = self.raw["sweep"]["z_values"]
        kind = self.raw["transform"]["kind"]
        if given is None:
            if len(PARAMETERS[kind]) != 1:
                raise ConfigError(f"sweep.z_values is required for {kind}")
            return [[z] for z in grid(kind)]
        return [list(np.atleast_1d(z)) for z in given]

    def datasets(self):
        source, params = next(iter(self.raw["dataset"].items()))
        if source == "synthetic":
            return desk_datasets(**params)
        try:
            train = load_idx(params["train_images"], params["train_labels"], params.get("class_count"))
            evaluation = load_idx(params["eval_images"], params["eval_labels"], train.class_count, split="eval")
        except KeyError as exc:
            raise ConfigError(f"dataset.idx is missing {exc.args[0]}") from exc
        return train, evaluation

    def batch(self, evaluation, seed=None):
        """Seeded, order-stable draw of ``batch.size`` eval images (all of them when null)."""
        size = self.raw["batch"]["size"]
        if size is None:
            return evaluation.images, evaluation.labels
        if size > len(evaluation):
            raise ConfigError(f"batch.size {size} exceeds the {len(evaluation)} evaluation images")
        idx = np.sort(stream(self.seed if seed is None else seed, "batch").choice(len(evaluation), size, replace=False))
        return evaluation.images[idx], evaluation.labels[idx]

    def resolved(self):
        return copy.deepcopy(self.raw)

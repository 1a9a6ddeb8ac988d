"""Transformation-averaged momentum iterative FGSM.

Per iteration ``t`` the engine draws ``copies`` transforms, averages the
input gradients of the (ensemble) loss through them, L1-normalises the
average per image, folds it into a momentum buffer and takes a signed step of
``epsilon / iterations``, then projects back onto the L-inf ball and [0, 1].
"""

from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
import os

import numpy as np

from dpolab.core.network import loss_and_input_grad
from dpolab.errors import ConfigError
from dpolab.parallel import pmap
from dpolab.transforms import sample_params, transform_vjp

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 16 / 255
BUDGET_SLACK = 1e-12
ENSEMBLE_FUSION = "mean-of-losses"


@dataclass
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 10
    momentum: float = 1.0
    copies: int = 1
    target: int = None
    seed: int = 0
    checkpoint_epochs: tuple = ()

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be a positive integer")
        if self.copies < 1:
            raise ConfigError("copies must be a positive integer")
        if self.epsilon < 0 or self.momentum < 0:
            raise ConfigError("epsilon and momentum must be non-negative")
        epochs = tuple(int(e) for e in self.checkpoint_epochs) or (self.iterations,)
        if list(epochs) != sorted(set(epochs)) or epochs[0] < 1 or epochs[-1] > self.iterations:
            raise ConfigError(f"checkpoint_epochs must be a sorted subset of 1..{self.iterations}, got {epochs}")
        self.checkpoint_epochs = epochs

    @property
    def step_size(self):
        return self.epsilon / self.iterations

    @property
    def targeted(self):
        return self.target is not None

    def to_dict(self):
        d = asdict(self)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackResult:
    checkpoints: dict
    momentum_fingerprint: str
    config: dict
    diagnostics: dict = field(default_factory=dict)
    budget_violations: int = 0

    @property
    def final(self):
        return self.checkpoints[max(self.checkpoints)]

    def manifest(self):
        return {
            "config": self.config,
            "checkpoints": sorted(self.checkpoints),
            "budget_violations": self.budget_violations,
            "momentum_fingerprint": self.momentum_fingerprint,
            "diagnostics": self.diagnostics,
        }

    def export(self, directory, stem):
        """Write one ``.npy`` per checkpoint plus a JSON manifest."""
        os.makedirs(directory, exist_ok=True)
        files = {}
        for epoch, batch in sorted(self.checkpoints.items()):
            name = f"{stem}.t{epoch}.npy"
            np.save(os.path.join(directory, name), batch)
            files[str(epoch)] = name
        manifest = dict(self.manifest(), files=files)
        with open(os.path.join(directory, stem + ".json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return manifest


def ensemble_loss(models, images, labels, target=None):
    """Mean cross-entropy over ``models`` and the mean input gradient."""
    if not models:
        raise ConfigError("ensemble needs at least one model")
    shapes = {m.input_shape for m in models}
    if len(shapes) > 1:
        raise ConfigError(f"ensemble members disagree on input shape: {sorted(shapes)}")
    loss, grad = loss_and_input_grad(models[0], images, labels, target)
    for m in models[1:]:
        l2, g2 = loss_and_input_grad(m, images, labels, target)
        loss, grad = loss + l2, grad + g2
    k = len(models)
    return loss / k, grad / k


def averaged_gradient(x, labels, surrogates, tspec, cfg, iteration, workers=1):
    """Mean over ``cfg.copies`` transform draws of the input gradient at ``x``.

    Copy ``n`` of iteration ``t`` uses draw index ``(t - 1) * copies + n``;
    copies are summed in index order.
    """
    labels = np.asarray(labels)

    def one(n):
        draw = sample_params(tspec, cfg.seed, (iteration - 1) * cfg.copies + n, x.shape, labels)
        out, vjp = transform_vjp(x, draw)
        _, g = ensemble_loss(surrogates, out, labels, cfg.target)
        return vjp(g)

    grads = pmap(one, range(cfg.copies), workers)
    total = grads[0]
    for g in grads[1:]:
        total = total + g
    return total / cfg.copies


def budget_violations(original, adversarial, epsilon):
    over = np.abs(adversarial - original) > epsilon + BUDGET_SLACK
    out_of_range = (adversarial < 0.0) | (adversarial > 1.0)
    return int((over | out_of_range).sum())


def run_attack(images, labels, surrogates, tspec, cfg, workers=1):
    """Craft adversarial examples; returns snapshots at ``cfg.checkpoint_epochs``."""
    x0 = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x0.size and (x0.min() < 0 or x0.max() > 1):
        raise ConfigError("images must lie in [0, 1]")
    if not surrogates:
        raise ConfigError("at least one surrogate model is required")
    lo, hi = np.maximum(x0 - cfg.epsilon, 0.0), np.minimum(x0 + cfg.epsilon, 1.0)
    direction = -1.0 if cfg.targeted else 1.0
    alpha = cfg.step_size
    x = x0.copy()
    g = np.zeros_like(x0)
    zero_norm, zero_sign = 0, 0
    snaps = {}
    wanted = set(cfg.checkpoint_epochs)
    for t in range(1, cfg.iterations + 1):
        mu = averaged_gradient(x, labels, surrogates, tspec, cfg, t, workers)
        norms = np.abs(mu).reshape(len(mu), -1).sum(axis=1)
        live = norms > 0
        if not live.all():
            zero_norm += int((~live).sum())
            log.debug("iteration %d: %d image(s) with zero gradient, momentum kept", t, int((~live).sum()))
        scale = np.where(live, 1.0 / np.where(live, norms, 1.0), 0.0)[:, None, None, None]
        g = np.where(live[:, None, None, None], cfg.momentum * g + mu * scale, g)
        step = np.sign(g)
        zero_sign += int((step == 0).sum())
        x = np.clip(x + direction * alpha * step, lo, hi)
        if t in wanted:
            snaps[t] = x.copy()
    violations = sum(budget_violations(x0, snap, cfg.epsilon) for snap in snaps.values())
    config = dict(cfg.to_dict(), step_size=alpha, transform=tspec.to_dict(),
                  surrogates=[m.name for m in surrogates], ensemble_fusion=ENSEMBLE_FUSION)
    return AttackResult(
        checkpoints=snaps,
        momentum_fingerprint=hashlib.sha256(np.ascontiguousarray(g).tobytes()).hexdigest()[:16],
        config=config,
        diagnostics={"zero_norm_skips": zero_norm, "zero_sign_coordinates": zero_sign},
        budget_violations=violations,
    )

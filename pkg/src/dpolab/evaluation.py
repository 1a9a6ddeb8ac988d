"""Attack success rates, the KL model-augmentation probe and sweep analytics."""

from dataclasses import dataclass, field
import csv
import hashlib
import io
import json
import os

import numpy as np

from dpolab.attack import AttackConfig, run_attack
from dpolab.core.network import forward
from dpolab.core.ops import softmax
from dpolab.parallel import pmap
from dpolab.transforms import apply_transform, sample_params

KL_FLOOR = 1e-12


def attack_success_rate(models, adv_batch, labels, target=None, clean_batch=None):
    """Per-model success rate on ``adv_batch``.

    Untargeted: fraction whose prediction differs from ``labels``.
    Targeted: fraction predicted as ``target``.  ``argmax`` ties resolve to
    the smallest class index.  With ``clean_batch`` given, images the model
    already misclassifies before the attack are left out (``nan`` if none
    remain).
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    rates = []
    for m in models:
        pred = forward(m, adv_batch).argmax(axis=1)
        hit = pred == target if target is not None else pred != labels
        if clean_batch is not None:
            keep = forward(m, clean_batch).argmax(axis=1) == labels
            hit = hit[keep]
        rates.append(float(hit.mean()) if hit.size else float("nan"))
    return rates


def success_from_logits(logits, labels, target=None):
    pred = np.asarray(logits).argmax(axis=1)
    return float((pred == target).mean() if target is not None else (pred != np.asarray(labels)).mean())


# -- KL probe ----------------------------------------------------------------


def kl_divergence(p, q, floor=KL_FLOOR):
    """Row-wise sum_c p_c ln(p_c / q_c) in nats, and the number of floored q entries."""
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    floored = q < floor
    q = np.where(floored, floor, q)
    terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return terms.sum(axis=1), int(floored.sum())


@dataclass
class KLProbeResult:
    transform: dict
    sample_count: int
    draws_per_sample: int
    z_values: list
    mean: list
    stderr: list
    floored: int = 0

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def kl_probe(surrogate, images, tspec, z_values=None, sample_count=50, draws_per_sample=1, seed=0, workers=1):
    """Mean KL(f(x) || f(T(x; theta))) over samples and transform draws, per z."""
    if sample_count < 1 or draws_per_sample < 1:
        raise ValueError("sample_count and draws_per_sample must be >= 1")
    x = np.asarray(images, dtype=np.float64)[:sample_count]
    if len(x) < sample_count:
        raise ValueError(f"need {sample_count} samples, got {len(x)}")
    p = softmax(forward(surrogate, x))
    zs = [tspec.z] if z_values is None else [tuple(np.atleast_1d(z)) for z in z_values]

    def one(z):
        spec = tspec.with_z(z)
        values, floored = [], 0
        for d in range(draws_per_sample):
            out = apply_transform(x, sample_params(spec, seed, d, x.shape))
            kl, nf = kl_divergence(p, softmax(forward(surrogate, out)))
            values.append(kl)
            floored += nf
        values = np.concatenate(values)
        se = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
        return float(values.mean()), se, floored

    rows = pmap(one, zs, workers)
    return KLProbeResult(
        transform={"kind": tspec.kind},
        sample_count=sample_count,
        draws_per_sample=draws_per_sample,
        z_values=[list(z) for z in zs],
        mean=[r[0] for r in rows],
        stderr=[r[1] for r in rows],
        floored=sum(r[2] for r in rows),
    )


# -- curve analytics ----------------------------------------------------------


def moving_average(values, window=3):
    """Centred moving average; the window is truncated at the edges."""
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    return np.array([v[max(0, i - half):i + half + 1].mean() for i in range(len(v))])


def unimodality_check(values, smoothing_window=3):
    """``(is_unimodal, peak_index)`` after smoothing.

    Runs of equal values count as one plateau; a plateau is a local maximum
    when every existing neighbour is strictly lower (edge plateaus count).
    ``peak_index`` is the first index of the highest such plateau, or ``None``
    when the curve is not unimodal.  A constant curve has no peak.
    """
    if len(values) < 3:
        raise ValueError("need at least 3 values")
    s = moving_average(values, smoothing_window)
    starts = [0] + [i for i in range(1, len(s)) if s[i] != s[i - 1]]
    levels = [s[i] for i in starts]
    if len(levels) == 1:
        return False, None
    peaks = []
    for k, level in enumerate(levels):
        left = levels[k - 1] if k > 0 else -np.inf
        right = levels[k + 1] if k + 1 < len(levels) else -np.inf
        if level > left and level > right:
            peaks.append(starts[k])
    if len(peaks) != 1:
        return False, None
    return True, peaks[0]


@dataclass
class SweepResult:
    """ASR cells keyed by (z index, iterations, model name, seed).

    A missing cell is stored as ``None``.
    """

    kind: str
    z_values: list
    iterations: list
    models: list
    seeds: list
    cells: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def asr(self, zi, t, model, seed):
        return self.cells.get((zi, t, model, seed))

    def mean_asr(self, zi, t, models=None, seeds=None):
        vals = [self.cells.get((zi, t, m, s)) for m in (models or self.models) for s in (seeds or self.seeds)]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def curve(self, t, models=None, seeds=None):
        return [self.mean_asr(zi, t, models, seeds) for zi in range(len(self.z_values))]

    def fingerprint(self):
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self):
        return {
            "kind": self.kind,
            "z_values": [list(z) for z in self.z_values],
            "iterations": list(self.iterations),
            "models": list(self.models),
            "seeds": list(self.seeds),
            "config": self.config,
            "config_fingerprint": self.fingerprint(),
            "cells": [
                {"z_index": zi, "iterations": t, "model": m, "seed": s, "asr": self.cells.get((zi, t, m, s))}
                for zi in range(len(self.z_values))
                for t in self.iterations
                for m in self.models
                for s in self.seeds
            ],
        }

    @classmethod
    def from_dict(cls, d):
        cells = {(c["z_index"], c["iterations"], c["model"], c["seed"]): c["asr"] for c in d["cells"]}
        cells = {k: v for k, v in cells.items() if v is not None}
        return cls(d["kind"], [list(z) for z in d["z_values"]], list(d["iterations"]), list(d["models"]),
                   list(d["seeds"]), cells, d.get("config", {}))

    def __eq__(self, other):
        return isinstance(other, SweepResult) and self.to_dict() == other.to_dict()


def optimal_z_trajectory(sweep, models=None, seeds=None):
    """Per checkpoint, the z with the highest mean ASR (ties -> smaller z).

    Returns ``(trajectory, non_decreasing)``; trajectory entries are z vectors.
    """
    if len(sweep.iterations) < 2:
        raise ValueError("need at least two iteration counts")
    traj = []
    for t in sweep.iterations:
        curve = sweep.curve(t, models, seeds)
        scores = np.array([-np.inf if v is None else v for v in curve])
        traj.append(list(sweep.z_values[int(np.argmax(scores))]))
    keys = [tuple(z) for z in traj]
    return traj, all(a <= b for a, b in zip(keys, keys[1:]))


def rank_stability(sweeps, early, late, models=None):
    """Rank transform kinds by their best ASR at two iteration counts.

    ``sweeps`` maps a label (usually the kind) to a SweepResult holding both
    ``early`` and ``late``.  Reports the two rankings and whether they agree;
    a changed ranking is an observation, not a failure.
    """
    best = {}
    for label, sweep in sweeps.items():
        best[label] = {t: max(v for v in sweep.curve(t, models) if v is not None) for t in (early, late)}
    order = lambda t: sorted(best, key=lambda k: (-best[k][t], k))
    ranks = {str(early): order(early), str(late): order(late)}
    return {"best_asr": {k: {str(t): v for t, v in d.items()} for k, d in best.items()},
            "ranking": ranks, "stable": ranks[str(early)] == ranks[str(late)]}


def run_sweep(images, labels, surrogates, eval_models, tspec, z_values, iterations, cfg, seeds=None, workers=1,
              exclude_benign_errors=False):
    """Attack once per (z, T, seed) with step size eps/T and score every model.

    Each T is a separate run; nothing is snapshotted from a longer run.
    """
    clean = images if exclude_benign_errors else None
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    z_values = [list(np.atleast_1d(z).astype(float)) for z in z_values]
    jobs = [(zi, t, s) for zi in range(len(z_values)) for t in iterations for s in seeds]

    def one(job):
        zi, t, s = job
        run_cfg = AttackConfig(cfg.epsilon, t, cfg.momentum, cfg.copies, cfg.target, s)
        adv = run_attack(images, labels, surrogates, tspec.with_z(z_values[zi]), run_cfg).final
        return attack_success_rate(eval_models, adv, labels, cfg.target, clean)

    rates = pmap(one, jobs, workers)
    names = [m.name for m in eval_models]
    cells = {}
    for (zi, t, s), row in zip(jobs, rates):
        for name, r in zip(names, row):
            cells[(zi, t, name, s)] = r
    config = {
        "attack": {k: v for k, v in cfg.to_dict().items() if k not in ("iterations", "seed", "checkpoint_epochs")},
        "transform": tspec.kind,
        "surrogates": [m.name for m in surrogates],
        "batch": int(len(labels)),
        "exclude_benign_errors": bool(exclude_benign_errors),
    }
    return SweepResult(tspec.kind, z_values, list(iterations), names, seeds, cells, config)


# -- reports ------------------------------------------------------------------


def _z_columns(width):
    return ["z"] if width == 1 else [f"z{k + 1}" for k in range(width)]


def sweep_rows(sweep):
    width = len(sweep.z_values[0]) if sweep.z_values else 1
    header = ["kind"] + _z_columns(width) + ["T", "model", "seed", "asr"]
    rows = []
    for zi, z in enumerate(sweep.z_values):
        for t in sweep.iterations:
            for m in sweep.models:
                for s in sweep.seeds:
                    v = sweep.cells.get((zi, t, m, s))
                    rows.append([sweep.kind] + [repr(float(c)) for c in z] + [t, m, s, "" if v is None else repr(v)])
    return header, rows


def kl_rows(kl):
    width = len(kl.z_values[0]) if kl.z_values else 1
    header = ["kind"] + _z_columns(width) + ["samples", "draws", "kl_mean", "kl_stderr"]
    rows = [[kl.transform["kind"]] + [repr(float(c)) for c in z] + [kl.sample_count, kl.draws_per_sample, repr(m), repr(e)]
            for z, m, e in zip(kl.z_values, kl.mean, kl.stderr)]
    return header, rows


def to_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def emit_report(results, fmt, path):
    """Write a sweep / KL / DPO result as JSON or long-format CSV."""
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    if fmt == "json":
        payload = results if isinstance(results, dict) else results.to_dict()
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    elif isinstance(results, SweepResult):
        text = to_csv(*sweep_rows(results))
    elif isinstance(results, KLProbeResult):
        text = to_csv(*kl_rows(results))
    elif hasattr(results, "csv_rows"):
        text = to_csv(*results.csv_rows())
    else:
        raise ValueError(f"no CSV layout for {type(results).__name__}")
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise OSError(f"cannot write report: directory {directory} does not exist")
    with open(path, "w", newline="") as f:
        f.write(text)
    return path

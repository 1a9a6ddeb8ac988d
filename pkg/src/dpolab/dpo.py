"""Dynamic parameter optimization: endpoint bisection over transform magnitudes.

A slot spans ``[a, b]`` with resolution ``m``; its search grid is
``a + k (b - a) / m`` for ``k = 1..m``.  Bisection keeps two endpoints,
scores both each step, moves the losing one to the midpoint and returns
``z_low``; a local grid scan of +-w steps then polishes the answer.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from dpolab.attack import run_attack
from dpolab.errors import ConfigError
from dpolab.evaluation import attack_success_rate
from dpolab.transforms import PARAMETERS

DEFAULT_REFINE_WIDTH = 2
BSR_ROTATION_ANCHOR = 24.0


@dataclass(frozen=True)
class Slot:
    """One optimized parameter: interval ``[low, high]``, ``m`` grid points.

    ``legal`` is the range the objective accepts; endpoints outside it are
    clamped before evaluation, and integral slots are snapped to the grid.
    """

    name: str
    low: float
    high: float
    m: int
    integral: bool = False
    legal: tuple = None

    def __post_init__(self):
        if not self.low < self.high:
            raise ConfigError(f"slot {self.name}: need low < high, got [{self.low}, {self.high}]")
        if self.m < 2:
            raise ConfigError(f"slot {self.name}: grid resolution m must be >= 2")

    @property
    def step(self):
        return (self.high - self.low) / self.m

    @property
    def bisection_steps(self):
        return math.ceil(math.log2(self.m))

    def grid(self):
        return [self.point(k) for k in range(1, self.m + 1)]

    def point(self, k):
        return round(self.low + k * self.step, 12)

    def nearest_index(self, z):
        """Grid index in 1..m closest to ``z`` (halves round up)."""
        return int(min(max(math.floor((z - self.low) / self.step + 0.5), 1), self.m))

    def prepare(self, z):
        """Value actually handed to the objective."""
        if self.integral:
            z = self.point(self.nearest_index(z))
        if self.legal is not None:
            z = min(max(z, self.legal[0]), self.legal[1])
        return float(z)

    def to_dict(self):
        return {"name": self.name, "low": self.low, "high": self.high, "m": self.m,
                "integral": self.integral, "legal": list(self.legal) if self.legal else None}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"name", "low", "high", "m", "integral", "legal"}
        if unknown:
            raise ConfigError(f"unknown slot keys: {sorted(unknown)}")
        legal = d.get("legal")
        return cls(d["name"], float(d["low"]), float(d["high"]), int(d["m"]), bool(d.get("integral", False)),
                   tuple(legal) if legal else None)


def transform_slots(kind):
    """Slots matching the search grid of every parameter of ``kind``."""
    slots = []
    for name, start, stop, step, lo, hi, integral in PARAMETERS[kind]:
        m = int(round((stop - start) / step)) + 1
        slots.append(Slot(name, round(start - step, 12), float(stop), m, integral, (lo, hi)))
    if not slots:
        raise ConfigError(f"transform {kind!r} has no tunable parameters")
    return slots


def default_anchors(kind):
    """Values held by not-yet-optimized slots; ``None`` means the slot's lower bound."""
    return {"r": BSR_ROTATION_ANCHOR} if kind == "bsr" else {}


class ObjectiveSpec:
    """Score function over full parameter vectors, higher is better.

    With ``cache=True`` repeated vectors are looked up instead of re-scored;
    ``calls`` always counts requests, ``computed`` counts real evaluations.
    """

    def __init__(self, fn, cache=False, description=None):
        self.fn = fn
        self.cache = cache
        self.description = description or {}
        self._memo = {}
        self.calls = 0
        self.computed = 0

    def __call__(self, z):
        key = tuple(float(v) for v in z)
        self.calls += 1
        if self.cache and key in self._memo:
            return self._memo[key]
        score = float(self.fn(key))
        self.computed += 1
        if self.cache:
            self._memo[key] = score
        return score


def _vector(slots, chosen, k, value, anchors):
    out = []
    for i, slot in enumerate(slots):
        if i < k:
            out.append(chosen[i])
        elif i == k:
            out.append(slot.prepare(value))
        else:
            anchor = anchors.get(slot.name)
            out.append(slot.prepare(slot.low if anchor is None else anchor))
    return out


@dataclass
class GridResult:
    best: float
    table: list
    evaluations: int

    def to_dict(self):
        return {"best": self.best, "table": [list(r) for r in self.table], "evaluations": self.evaluations}


def grid_search(obj, slot, fixed=None, position=0, slots=None, anchors=None):
    """Score every grid point of ``slot``; argmax with ties toward smaller z.

    ``slots``/``fixed``/``position`` embed the slot in a longer vector; by
    default the slot is the whole vector.
    """
    slots = slots or [slot]
    fixed = list(fixed or [])
    anchors = anchors or {}
    table = []
    for z in slot.grid():
        table.append((z, obj(_vector(slots, fixed, position, z, anchors))))
    scores = np.array([s for _, s in table])
    return GridResult(table[int(np.argmax(scores))][0], table, len(table))


@dataclass
class DPOResult:
    z: list
    slots: list
    mode: str
    refine_width: int
    trajectory: list = field(default_factory=list)
    refinement: list = field(default_factory=list)
    evaluations: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    anchors: dict = field(default_factory=dict)

    @property
    def total_evaluations(self):
        return sum(v["bisection"] + v["refinement"] for v in self.evaluations.values())

    def to_dict(self):
        return {
            "z": list(self.z),
            "slots": [s.to_dict() for s in self.slots],
            "mode": self.mode,
            "refine_width": self.refine_width,
            "anchors": dict(self.anchors),
            "trajectory": self.trajectory,
            "refinement": self.refinement,
            "evaluations": self.evaluations,
            "total_evaluations": self.total_evaluations,
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["z"]), [Slot.from_dict(s) for s in d["slots"]], d["mode"], d["refine_width"],
                   d["trajectory"], d["refinement"], d["evaluations"], d["flags"], d.get("anchors", {}))

    def csv_rows(self):
        header = ["slot", "step", "phase", "z_low", "z_high", "score_low", "score_high", "flag"]
        rows = [[t["slot"], t["step"], "bisect", repr(t["z_low"]), repr(t["z_high"]),
                 repr(t["score_low"]), repr(t["score_high"]), t["flag"] or ""] for t in self.trajectory]
        rows += [[r["slot"], i, "refine", repr(r["z"]), "", repr(r["score"]), "", ""]
                 for i, r in enumerate(self.refinement)]
        return header, rows


def _bisect_slot(obj, slots, k, chosen, anchors, noise_floor, log, flags):
    slot = slots[k]
    low, high = slot.low, slot.high
    near_ties = 0
    for step in range(1, slot.bisection_steps + 1):
        s_low = obj(_vector(slots, chosen, k, low, anchors))
        s_high = obj(_vector(slots, chosen, k, high, anchors))
        near_ties = near_ties + 1 if noise_floor is not None and abs(s_low - s_high) < noise_floor else 0
        flag = "below-noise-floor" if near_ties >= 2 else None
        if flag:
            flags.append(f"{slot.name}: step {step} endpoint gap below noise floor {noise_floor}")
        log.append({"slot": slot.name, "step": step, "z_low": low, "z_high": high,
                    "score_low": s_low, "score_high": s_high, "flag": flag})
        mid = (low + high) / 2
        if s_low >= s_high:
            high = mid
        else:
            low = mid
    return low, 2 * slot.bisection_steps


def _ternary_slot(obj, slots, k, chosen, anchors, noise_floor, log, flags):
    """Ternary search over grid indices 1..m; not the default."""
    slot = slots[k]
    lo, hi = 1, slot.m
    step, evals = 0, 0
    while hi - lo > 2:
        step += 1
        i1, i2 = lo + (hi - lo) // 3, hi - (hi - lo) // 3
        s1 = obj(_vector(slots, chosen, k, slot.point(i1), anchors))
        s2 = obj(_vector(slots, chosen, k, slot.point(i2), anchors))
        evals += 2
        flag = None
        if noise_floor is not None and abs(s1 - s2) < noise_floor:
            flag = "below-noise-floor"
            flags.append(f"{slot.name}: ternary step {step} gap below noise floor {noise_floor}")
        log.append({"slot": slot.name, "step": step, "z_low": slot.point(i1), "z_high": slot.point(i2),
                    "score_low": s1, "score_high": s2, "flag": flag})
        if s1 >= s2:
            hi = i2 - 1 if s1 > s2 else i2
        else:
            lo = i1 + 1
    return slot.point((lo + hi) // 2), evals


def bisect_optimize(obj, slots, refine_width=DEFAULT_REFINE_WIDTH, mode="bisect", noise_floor=None, anchors=None):
    """Coordinate-wise bisection over ``slots`` in order.

    While slot ``k`` is searched, earlier slots sit at their optimized values
    and later ones at ``anchors[name]`` (default: their lower bound).
    ``refine_width=0`` disables the local grid scan.
    """
    if mode not in ("bisect", "ternary"):
        raise ConfigError(f"unknown DPO mode {mode!r}; use 'bisect' or 'ternary'")
    if refine_width < 0:
        raise ConfigError("refine_width must be >= 0")
    if not slots:
        raise ConfigError("no slots to optimize")
    names = [s.name for s in slots]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate slot names {names}")
    anchors = dict(anchors or {})
    search = _bisect_slot if mode == "bisect" else _ternary_slot
    result = DPOResult([], list(slots), mode, refine_width, anchors=anchors)
    chosen = []
    for k, slot in enumerate(slots):
        z_low, used = search(obj, slots, k, chosen, anchors, noise_floor, result.trajectory, result.flags)
        z_best, refine_evals = slot.prepare(z_low), 0
        if refine_width:
            centre = slot.nearest_index(z_low)
            best_score = -np.inf
            for i in range(max(1, centre - refine_width), min(slot.m, centre + refine_width) + 1):
                z = slot.point(i)
                score = obj(_vector(slots, chosen, k, z, anchors))
                refine_evals += 1
                result.refinement.append({"slot": slot.name, "z": z, "score": score})
                if score > best_score:
                    z_best, best_score = z, score
            z_best = slot.prepare(z_best)
        chosen.append(z_best)
        result.evaluations[slot.name] = {"bisection": used, "refinement": refine_evals, "provisional": z_low}
    result.z = chosen
    return result


def make_asr_objective(tspec, cfg, validation, surrogates, images, labels, cache=False, workers=1):
    """Objective z -> mean ASR over ``validation`` of ``run_attack`` at z.

    The attack seed is ``cfg.seed`` for every z, so repeated calls agree and
    different z share transform draws.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ConfigError("objective batch is empty")
    if not validation:
        raise ConfigError("objective needs at least one validation model")

    def score(z):
        adv = run_attack(images, labels, surrogates, tspec.with_z(z), cfg, workers).final
        return float(np.mean(attack_success_rate(validation, adv, labels, cfg.target)))

    description = {"transform": tspec.kind, "attack": cfg.to_dict(), "batch": int(len(images)),
                   "validation": [m.name for m in validation], "surrogates": [m.name for m in surrogates]}
    return ObjectiveSpec(score, cache=cache, description=description)


__all__ = ["Slot", "ObjectiveSpec", "DPOResult", "GridResult", "grid_search", "bisect_optimize",
           "make_asr_objective", "transform_slots", "default_anchors"]

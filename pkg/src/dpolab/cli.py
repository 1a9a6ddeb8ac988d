"""Command-line entry point: ``dpolab <subcommand> --config run.json``.

Every subcommand writes ``{run_id}.{subcommand}.manifest.json`` next to its
reports.  Manifests echo the resolved configuration and seeds but no
timestamps or worker counts, so reruns produce byte-identical files.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from dpolab.attack import run_attack
from dpolab.config import RunConfig
from dpolab.data.pool import build_pool
from dpolab.data.training import evaluate
from dpolab.dpo import bisect_optimize, grid_search, make_asr_objective
from dpolab.errors import ConfigError, ConsistencyError, DPOLabError, InputError
from dpolab.evaluation import (KLProbeResult, SweepResult, attack_success_rate, emit_report, kl_probe,
                               optimal_z_trajectory, run_sweep, unimodality_check)

log = logging.getLogger("dpolab")

COMMANDS = ("train", "attack", "sweep", "dpo", "kl-probe", "report")
USAGE_ERRORS = (ConfigError, InputError, ConsistencyError)


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


class Run:
    """Shared state of one invocation: config, data, pool, output paths."""

    def __init__(self, cfg, workers):
        self.cfg = cfg
        self.workers = workers
        self.out = cfg.output
        os.makedirs(self.out, exist_ok=True)
        self._data = None
        self._pool = None

    @property
    def data(self):
        if self._data is None:
            self._data = self.cfg.datasets()
        return self._data

    @property
    def pool(self):
        if self._pool is None:
            p = self.cfg.raw["pool"]
            cache = p["cache_dir"] or os.path.join(self.out, "models")
            self._pool = build_pool(self.data[0], p["spec"], p["training"], cache, self.workers)
        return self._pool

    def transform(self):
        train = self.data[0]
        return self.cfg.transform(reference=(train.images, train.labels))

    def path(self, kind, ext):
        return os.path.join(self.out, f"{self.cfg.run_id}.{kind}.{ext}")

    def manifest(self, command, outputs, **extra):
        payload = {
            "command": command,
            "run_id": self.cfg.run_id,
            "config": self.cfg.resolved(),
            "overrides": self.cfg.overrides,
            "seeds": {"run": self.cfg.seed, "attack": self.cfg.seed, "batch": self.cfg.seed},
            "outputs": sorted(os.path.basename(o) for o in outputs),
        }
        payload.update(extra)
        path = self.path(command, "manifest.json")
        _write_json(path, payload)
        return path


def cmd_train(run, args):
    train, evaluation = run.data
    pool = run.pool
    rows = {}
    for role in ("surrogates", "validation", "test"):
        for model in getattr(pool, role):
            loss, acc = evaluate(model, evaluation)
            rows[model.name] = {"role": role, "arch": model.arch_id, "eval_loss": loss, "eval_accuracy": acc,
                                "train_accuracy": model.metadata.get("train_accuracy")}
    report = run.path("train", "json")
    _write_json(report, {"dataset": {"train": train.fingerprint(), "eval": evaluation.fingerprint()}, "models": rows})
    return [report], {}


def cmd_attack(run, args):
    cfg = run.cfg
    images, labels = cfg.batch(run.data[1])
    attack_cfg = cfg.attack()
    result = run_attack(images, labels, run.pool.surrogates, run.transform(), attack_cfg, run.workers)
    outputs = []
    for epoch, batch in sorted(result.checkpoints.items()):
        path = run.path("attack", f"t{epoch}.npy")
        np.save(path, batch)
        outputs.append(path)
    asr = {role: dict(zip(run.pool.names(role), attack_success_rate(getattr(run.pool, role), result.final,
                                                                     labels, attack_cfg.target)))
           for role in ("validation", "test")}
    report = run.path("attack", "json")
    _write_json(report, dict(result.manifest(), asr=asr))
    outputs.append(report)
    return outputs, {"budget_violations": result.budget_violations}


def cmd_sweep(run, args):
    cfg = run.cfg
    images, labels = cfg.batch(run.data[1])
    seeds = cfg.raw["sweep"]["seeds"] or [cfg.seed]
    pool = run.pool
    sweep = run_sweep(images, labels, pool.surrogates, pool.validation + pool.test, run.transform(),
                      cfg.sweep_z_values(), cfg.raw["sweep"]["iterations"], cfg.attack(), seeds, run.workers,
                      cfg.raw["sweep"]["exclude_benign_errors"])
    report = emit_report(sweep, cfg.raw["report"]["format"], run.path("sweep", cfg.raw["report"]["format"]))
    extra = {"seeds_swept": seeds}
    if len(sweep.z_values) >= 3:
        extra["unimodal"] = {str(t): unimodality_check(sweep.curve(t, pool.names("validation")))[0]
                             for t in sweep.iterations}
    if len(sweep.iterations) >= 2:
        traj, rising = optimal_z_trajectory(sweep, pool.names("validation"))
        extra["optimal_z"] = {"trajectory": traj, "non_decreasing": rising}
    return [report], extra


def cmd_dpo(run, args):
    cfg = run.cfg
    d = cfg.raw["dpo"]
    slots = cfg.slots()
    if not slots:
        raise ConfigError(f"transform {cfg.raw['transform']['kind']!r} has nothing to optimize")
    images, labels = cfg.batch(run.data[1])
    pool = run.pool
    tspec = run.transform()
    attack_cfg = cfg.attack()
    obj = make_asr_objective(tspec, attack_cfg, pool.validation, pool.surrogates, images, labels,
                             cache=d["cache"], workers=run.workers)
    result = bisect_optimize(obj, slots, d["refine_width"], d["mode"], d["noise_floor"], cfg.anchors())
    payload = result.to_dict()
    if d["grid_search"]:
        grid_obj = make_asr_objective(tspec, attack_cfg, pool.validation, pool.surrogates, images, labels,
                                      cache=True, workers=run.workers)
        fixed, tables = [], []
        for k, slot in enumerate(slots):
            g = grid_search(grid_obj, slot, fixed, k, slots, cfg.anchors())
            fixed.append(slot.prepare(g.best))
            tables.append(dict(g.to_dict(), slot=slot.name))
        payload["grid_search"] = {"z": fixed, "slots": tables, "evaluations": sum(t["evaluations"] for t in tables)}
    adv = run_attack(images, labels, pool.surrogates, tspec.with_z(result.z), attack_cfg, run.workers).final
    payload["test_asr"] = dict(zip(pool.names("test"), attack_success_rate(pool.test, adv, labels, attack_cfg.target)))
    fmt = cfg.raw["report"]["format"]
    report = emit_report(payload if fmt == "json" else result, fmt, run.path("dpo", fmt))
    evaluations = dict(result.evaluations, total=result.total_evaluations)
    extra = {"z": result.z, "evaluations": evaluations, "flags": result.flags}
    if d["grid_search"]:
        extra["grid_search"] = {"z": payload["grid_search"]["z"],
                                "evaluations": {t["slot"]: t["evaluations"] for t in payload["grid_search"]["slots"]}}
    return [report], extra


def cmd_kl_probe(run, args):
    cfg = run.cfg
    k = cfg.raw["kl"]
    images, _ = cfg.batch(run.data[1])
    z_values = k["z_values"] if k["z_values"] is not None else cfg.sweep_z_values()
    result = kl_probe(run.pool.surrogates[0], images, run.transform(), z_values, k["sample_count"],
                      k["draws_per_sample"], cfg.seed, run.workers)
    fmt = cfg.raw["report"]["format"]
    return [emit_report(result, fmt, run.path("kl", fmt))], {"floored": result.floored}


def cmd_report(run, args):
    """Convert a JSON sweep / KL report into the configured format."""
    if not args.input:
        raise ConfigError("report needs --input pointing at a .sweep.json or .kl.json file")
    name = os.path.basename(args.input)
    try:
        with open(args.input) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.input}: not a JSON report") from exc
    if name.endswith(".sweep.json"):
        result, kind = SweepResult.from_dict(data), "sweep"
    elif name.endswith(".kl.json"):
        result, kind = KLProbeResult.from_dict(data), "kl"
    else:
        raise ConfigError(f"{name}: expected a '.sweep.json' or '.kl.json' report")
    fmt = run.cfg.raw["report"]["format"]
    return [emit_report(result, fmt, run.path(kind, fmt))], {"input": name}


HANDLERS = {"train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep, "dpo": cmd_dpo,
            "kl-probe": cmd_kl_probe, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="dpolab", description="Transfer-attack laboratory with dynamic "
                                     "parameter optimization.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--workers", type=int, default=1, help="worker threads; never changes results")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--input", help="JSON report to convert")
            p.add_argument("--format", choices=("json", "csv"), help="output format")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        overrides = {"seed": args.seed, "output": args.out}
        if args.config:
            cfg = RunConfig.load(args.config, overrides)
        else:
            cfg = RunConfig.from_dict({}, overrides)
        if getattr(args, "format", None):
            cfg.raw["report"]["format"] = args.format
            cfg.overrides["report.format"] = args.format
        run = Run(cfg, args.workers)
        outputs, extra = HANDLERS[args.command](run, args)
        manifest = run.manifest(args.command, outputs, **extra)
    except USAGE_ERRORS as exc:
        print(f"dpolab {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DPOLabError, OSError, ValueError) as exc:
        print(f"dpolab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())

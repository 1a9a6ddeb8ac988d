"""Desk-scale laboratory for transformation-based transfer attacks."""

from dpolab.attack import AttackConfig, AttackResult, run_attack
from dpolab.dpo import ObjectiveSpec, Slot, bisect_optimize, grid_search, make_asr_objective
from dpolab.evaluation import attack_success_rate, kl_probe, unimodality_check
from dpolab.transforms import TransformSpec, apply_transform, sample_params

__version__ = "0.1.0"

__all__ = ["AttackConfig", "AttackResult", "run_attack", "ObjectiveSpec", "Slot", "bisect_optimize", "grid_search",
           "make_asr_objective", "attack_success_rate", "kl_probe", "unimodality_check", "TransformSpec",
           "apply_transform", "sample_params"]

"""Adversarial attacks behind a uniform registry."""

from madbench.attacks.black_box import one_pixel, square_attack
from madbench.attacks.projection import perturbation_norm, project_ball
from madbench.attacks.registry import (
    ATTACK_TABLE,
    IMPLEMENTED_IDS,
    AttackOutcome,
    AttackSpec,
    builtin_suite,
    default_spec,
    load_suite,
    run_attack,
    save_suite,
)
from madbench.attacks.white_box import cw_l2, deepfool, fgsm, iterative_fgsm_family

__all__ = [
    "ATTACK_TABLE",
    "IMPLEMENTED_IDS",
    "AttackOutcome",
    "AttackSpec",
    "builtin_suite",
    "cw_l2",
    "deepfool",
    "default_spec",
    "fgsm",
    "iterative_fgsm_family",
    "load_suite",
    "one_pixel",
    "perturbation_norm",
    "project_ball",
    "run_attack",
    "save_suite",
    "square_attack",
]

"""Madry-style adversarial training, the comparison baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from madbench import core_model as cm
from madbench.attacks.projection import perturbation_norm
from madbench.attacks.registry import AttackSpec, default_spec, run_attack
from madbench.errors import ConfigError, NumericError

# AT trains on groups "1+4" and validates on "2+5" under the default grouping
AT_TRAIN_GROUPS = (1, 4)
AT_VAL_GROUPS = (2, 5)


@dataclass
class ATConfig:
    inner_attack: AttackSpec = field(default_factory=lambda: default_spec(18))
    mix_clean: bool = True
    pregen_ratio: float = 0.5
    train_groups: tuple = AT_TRAIN_GROUPS
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.inner_attack, dict):
            self.inner_attack = AttackSpec.from_dict(self.inner_attack)
        if not self.inner_attack.implemented:
            raise ConfigError(f"inner attack {self.inner_attack.attack_id} is not implemented")
        if self.inner_attack.knowledge != "white_box":
            raise ConfigError("adversarial training needs a white-box inner attack")
        if not 0 <= self.pregen_ratio <= 1:
            raise ConfigError("pregen_ratio must lie in [0, 1]")
        self.train_groups = tuple(int(g) for g in self.train_groups)

    def train_config(self) -> cm.TrainConfig:
        return cm.TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.optimizer, self.momentum, self.seed)


def at_train(model: cm.ModelState, dataset=None, cfg: Optional[ATConfig] = None, clean=None) -> cm.ModelState:
    """Adversarial training on clean batches with on-the-fly inner attacks.

    Each shuffled clean batch is attacked against the current parameters
    (inner max). A ``pregen_ratio`` share of the adversarial half is swapped
    for pre-generated examples from the dataset's AT training groups, and
    with ``mix_clean`` the clean batch is concatenated (exact 50/50 split).
    ``clean`` overrides the clean pool (defaults to the dataset's clean
    train split).
    """
    cfg = cfg or ATConfig()
    if clean is None:
        if dataset is None:
            raise ConfigError("at_train needs a dataset or explicit clean examples")
        clean = dataset.clean_images_and_labels("train")
    x, y = clean
    pre_x = pre_y = None
    if dataset is not None and cfg.pregen_ratio > 0:
        attacks = dataset.attacks_in_groups(cfg.train_groups)
        if not attacks:
            raise ConfigError(f"no attacks in AT training groups {cfg.train_groups}")
        pre_x, pre_y = dataset.pool(attacks, "train")
    spec = cfg.inner_attack
    tally = {"batches": 0, "clean": 0, "adversarial": 0, "pregenerated": 0}

    def transform(state, xb, yb, step):
        outcome = run_attack(spec, state, xb, yb, seed=cfg.seed, batch_index=step)
        x_adv = outcome.x_adv.to(xb.dtype)
        if spec.norm in ("linf", "l2"):
            worst = float(perturbation_norm(x_adv, xb, spec.norm).max())
            if worst > spec.epsilon + 1e-6:
                raise NumericError(f"inner attack exceeded its budget ({worst} > {spec.epsilon})")
        y_adv = yb
        n_pre = int(round(cfg.pregen_ratio * len(xb))) if pre_x is not None else 0
        if n_pre:
            rng = np.random.default_rng([cfg.seed, step, 3])
            pick = torch.from_numpy(rng.choice(len(pre_x), n_pre, replace=len(pre_x) < n_pre))
            x_adv = torch.cat([x_adv[: len(xb) - n_pre], pre_x[pick]])
            y_adv = torch.cat([yb[: len(xb) - n_pre], pre_y[pick]])
        tally["batches"] += 1
        tally["adversarial"] += len(xb)
        tally["pregenerated"] += n_pre
        if cfg.mix_clean:
            tally["clean"] += len(xb)
            return torch.cat([xb, x_adv]), torch.cat([yb, y_adv])
        return x_adv, y_adv

    out = cm.fit(model, x, y, cfg.train_config(), transform)
    if cfg.epochs:
        out.training_meta["at_composition"] = tally
    return out

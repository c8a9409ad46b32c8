"""Scoring a defended model over the evaluation roles of a dataset."""

from __future__ import annotations

import time

import numpy as np

from madbench import core_model as cm
from madbench.errors import ConfigError
from madbench.mad_dataset import MadDataset, sample_eval_task
from madbench.meta_at import MetaParams, finetune_and_eval
from madbench.metrics import DefenseRecord

ROLE_TAG = {"test_learned": "learned", "test_new": "new"}


def evaluate_defense(
    defended: cm.ModelState,
    reference: cm.ModelState,
    dataset: MadDataset,
    params: MetaParams,
    roles=("test_learned", "test_new"),
    attack_ids=None,
    finetune_steps=None,
    extra_ot_hours: float = 0.0,
    seed: int = 0,
):
    """Fine-tune-and-score every attack in ``roles``; returns (records, clean accuracies).

    CA values in each record are measured on the adversarial part of Q'.
    ``extra_ot_hours`` is added to every record's OT (training time of
    methods that do not fine-tune).
    """
    unknown = set(roles) - set(ROLE_TAG)
    if unknown:
        raise ConfigError(f"cannot score roles {sorted(unknown)}; use test_learned/test_new")
    clean_x, clean_y = dataset.clean_images_and_labels("test")
    records, clean_cas = [], []
    for role in roles:
        ids = dataset.attacks_for_role(role)
        if attack_ids is not None:
            ids = [a for a in ids if a in set(attack_ids)]
        for a in ids:
            t0 = time.perf_counter()
            rng = np.random.default_rng([int(seed), int(a)])
            task = sample_eval_task(dataset, a, params, rng)
            res = finetune_and_eval(defended, task, params, steps=finetune_steps, seed=seed)
            adv = task.query_origin == a
            qx, qy = task.query_x[adv], task.query_y[adv]
            ca_attacked = cm.evaluate_accuracy(reference, qx, qy)
            ca_defended = cm.evaluate_accuracy(res.model, qx, qy)
            clean_ca = cm.evaluate_accuracy(res.model, clean_x, clean_y)
            clean_cas.append(clean_ca)
            records.append(DefenseRecord(
                attack_id=a,
                role=ROLE_TAG[role],
                cca=dataset.cca,
                ca_attacked=ca_attacked,
                ca_defended=ca_defended,
                ot_hours=res.ot_hours + extra_ot_hours,
                extra={
                    "ca_before_query": res.ca_before,
                    "ca_after_query": res.ca_after,
                    "ca_before_attacked": cm.evaluate_accuracy(defended, qx, qy),
                    "finetune_steps": res.steps,
                    "cca_defended": clean_ca,
                    "ot_total_hours": (time.perf_counter() - t0) / 3600 + extra_ot_hours,
                },
            ))
    return records, clean_cas

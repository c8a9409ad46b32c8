"""The desk-scale end-to-end run: clean model, MAD store, meta-training, few-shot defense."""

import time
from dataclasses import dataclass

import numpy as np
import torch

from madbench import core_model as cm
from madbench import mad_dataset as md
from madbench.attacks import default_spec
from madbench.data import mnist_subset
from madbench.meta_at import MetaParams, finetune_and_eval, meta_train
from madbench.metrics import DefenseRecord

FGSM, PGD, MIFGSM, RFGSM, BIM = 13, 18, 16, 21, 14
SUITE_IDS = (FGSM, PGD, MIFGSM, RFGSM, BIM)
# meta_train groups 1-2, meta_val group 4, test_new group 9
GROUPING = {FGSM: 1, MIFGSM: 1, PGD: 2, RFGSM: 4, BIM: 9}

CLEAN_TRAIN = cm.TrainConfig(epochs=20, batch_size=32, learning_rate=0.05, optimizer="sgd_momentum", seed=0)
META = MetaParams(
    beta=0.01, lambda_=0.01, epochs=5, episodes_per_epoch=20, ways=2, query_ways=1,
    shot_k=5, query_m=3, test_shot_K=1, test_query_M=15, finetune_lr=0.02,
)


@dataclass
class SmokeResult:
    clean_model: cm.ModelState
    clean_test_accuracy: float
    dataset: md.MadDataset
    store_cas: dict
    best: cm.ModelState
    meta_log: object
    finetune: object
    defended_clean_accuracy: float
    record: DefenseRecord
    seconds: float


def run_smoke(seed: int = 0) -> SmokeResult:
    t0 = time.perf_counter()
    (xtr, ytr), (xte, yte) = mnist_subset(200, 300, seed=seed)
    model = cm.build_model(cm.ModelSpec("small_cnn", (1, 28, 28), 10), seed)
    model = cm.train_clean(model, xtr, ytr, CLEAN_TRAIN)
    clean_acc = cm.evaluate_accuracy(model, xte, yte)

    # every bundled digit is attacked, so each store has headroom for M-sized validation queries
    x_all, y_all = torch.cat([xtr, xte]), torch.cat([ytr, yte])
    suite = [default_spec(a) for a in SUITE_IDS]
    ds = md.generate_mad(model, x_all, y_all, suite, batch=256, seed=seed, name="mad_smoke")
    ds = md.filter_and_balance(ds, min_per_class=5 * META.test_query_M, seed=seed)
    ds = md.split_3_1_1(ds, seed=seed)
    ds = md.assign_groups(ds, GROUPING)
    store_cas = {a: cm.evaluate_accuracy(model, *s.images_and_labels()) for a, s in ds.attacks.items()}

    best, meta_log = meta_train(model, ds, META, seed=seed)
    task = md.sample_eval_task(ds, BIM, META, np.random.default_rng([seed, BIM]))
    ft = finetune_and_eval(best, task, META, seed=seed)
    defended_acc = cm.evaluate_accuracy(ft.model, xte, yte)
    adv = task.query_origin == BIM
    qx, qy = task.query_x[adv], task.query_y[adv]
    record = DefenseRecord(
        attack_id=BIM, role="new", cca=clean_acc,
        ca_attacked=cm.evaluate_accuracy(model, qx, qy),
        ca_defended=cm.evaluate_accuracy(ft.model, qx, qy),
        ot_hours=ft.ot_hours,
        extra={"ca_before_query": ft.ca_before, "ca_after_query": ft.ca_after, "finetune_steps": ft.steps},
    )
    return SmokeResult(model, clean_acc, ds, store_cas, best, meta_log, ft, defended_acc, record,
                       time.perf_counter() - t0)

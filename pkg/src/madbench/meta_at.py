"""Episodic meta-adversarial training and the few-shot fine-tuning protocol.

One epoch samples ``episodes_per_epoch`` tasks. For each task the base
parameters are adapted on the support set (``inner_update``), the query-set
gradient is taken at the adapted point (``query_gradient``), and after the
sweep the base parameters move by ``-(lambda_ / e) * sum(g)``. The base
parameters are never modified inside the sweep.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from madbench import core_model as cm
from madbench.errors import ConfigError, DataError, NumericError
from madbench.mad_dataset import MadDataset, sample_eval_task, sample_train_episode

log = logging.getLogger(__name__)

LossFn = Callable[[dict, tuple], torch.Tensor]


@dataclass
class MetaParams:
    beta: float = 0.01
    lambda_: float = 0.001
    epochs: int = 50
    episodes_per_epoch: int = 100
    batch_size: int = 32
    patience: int = 25
    ways: int = 5
    query_ways: int = 1
    shot_k: int = 15
    query_m: int = 6
    test_shot_K: int = 1
    test_query_M: int = 15
    inner_steps: int = 1
    second_order: bool = False
    val_tasks: int = 5
    finetune_steps: int = 100
    finetune_lr: Optional[float] = None
    holdout_fraction: float = 0.25
    finetune_monitor: str = "loss"

    def __post_init__(self):
        for name in ("epochs", "episodes_per_epoch", "batch_size", "patience", "ways", "query_ways",
                     "shot_k", "query_m", "test_shot_K", "test_query_M", "inner_steps", "val_tasks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 1 <= self.query_ways <= self.ways:
            raise ConfigError("query_ways must lie in [1, ways]")
        if not (self.beta > 0 and self.lambda_ > 0):
            raise ConfigError("beta and lambda_ must be > 0")
        if self.finetune_steps < 0:
            raise ConfigError("finetune_steps must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.finetune_monitor not in ("loss", "ca"):
            raise ConfigError("finetune_monitor must be 'loss' or 'ca'")

    @property
    def finetune_rate(self) -> float:
        return self.beta if self.finetune_lr is None else float(self.finetune_lr)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetaParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown meta parameters: {', '.join(sorted(unknown))}")
        return cls(**d)


class EarlyStopper:
    """Stops once ``patience`` consecutive observations fail to strictly beat the best."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = int(patience)
        self.best = math.inf
        self._best_index = -1
        self.count = 0
        self.bad = 0

    def observe(self, loss: float) -> str:
        if loss < self.best:
            self.best = float(loss)
            self._best_index = self.count
            self.bad = 0
        else:
            self.bad += 1
        self.count += 1
        return "stop" if self.bad >= self.patience else "continue"

    def best_index(self) -> int:
        return self._best_index

    @property
    def improved(self) -> bool:
        return self.count > 0 and self._best_index == self.count - 1

    def state_dict(self) -> dict:
        return {"patience": self.patience, "best": self.best, "best_index": self._best_index,
                "count": self.count, "bad": self.bad}

    @classmethod
    def from_state(cls, d: dict) -> "EarlyStopper":
        s = cls(d["patience"])
        s.best, s._best_index, s.count, s.bad = d["best"], d["best_index"], d["count"], d["bad"]
        return s


# --------------------------------------------------------------------------
# inner / outer steps


def model_loss(model: cm.ModelState) -> LossFn:
    def loss_fn(params, batch):
        x, y = batch
        return cm.compute_loss(cm.forward(model, x.to(model.dtype), params), y)
    return loss_fn


def _live(params) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().requires_grad_(True)) for k, v in params.items())


def _adapt(params, loss_fn, batch, beta, steps, create_graph):
    for _ in range(steps):
        loss = loss_fn(params, batch)
        grads = torch.autograd.grad(loss, list(params.values()), create_graph=create_graph)
        if not all(bool(torch.isfinite(g).all()) for g in grads):
            raise NumericError("non-finite gradient in inner update")
        params = OrderedDict((k, p - beta * g) for (k, p), g in zip(params.items(), grads))
    return params


def inner_update(theta: cm.ModelState, S, beta: float, inner_steps: int = 1, loss_fn: Optional[LossFn] = None):
    """theta' = theta - beta * grad L(theta; S), ``inner_steps`` times. ``theta`` is left untouched."""
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    if inner_steps < 1:
        raise ConfigError("inner_steps must be >= 1")
    if len(S[1]) == 0:
        raise DataError("support set is empty")
    loss_fn = loss_fn or model_loss(theta)
    params = theta.params
    with torch.enable_grad():
        for _ in range(inner_steps):
            params = OrderedDict((k, p.detach()) for k, p in _adapt(_live(params), loss_fn, S, beta, 1, False).items())
    return cm.ModelState(theta.spec, params, theta.rng_seed, dict(theta.training_meta))


def query_gradient(
    theta_prime: cm.ModelState,
    Q,
    second_order: bool = False,
    theta: Optional[cm.ModelState] = None,
    S=None,
    beta: Optional[float] = None,
    inner_steps: int = 1,
    loss_fn: Optional[LossFn] = None,
):
    """Gradient of the query loss for the outer update.

    First order: gradient at ``theta_prime`` w.r.t. ``theta_prime``. Second
    order: the inner adaptation from ``theta`` on ``S`` is replayed with a
    graph, so the result is the exact derivative w.r.t. ``theta``.
    Returns ``(loss, grads)``.
    """
    if len(Q[1]) == 0:
        raise DataError("query set is empty")
    loss_fn = loss_fn or model_loss(theta_prime)
    with torch.enable_grad():
        if not second_order:
            live = _live(theta_prime.params)
            loss = loss_fn(live, Q)
            grads = torch.autograd.grad(loss, list(live.values()))
            keys = live.keys()
        else:
            if theta is None or S is None or beta is None:
                raise ConfigError("second-order query gradient needs theta, S and beta")
            base = _live(theta.params)
            adapted = _adapt(base, loss_fn, S, beta, inner_steps, create_graph=True)
            loss = loss_fn(adapted, Q)
            grads = torch.autograd.grad(loss, list(base.values()))
            keys = base.keys()
    loss = float(loss.detach())
    if not math.isfinite(loss) or not all(bool(torch.isfinite(g).all()) for g in grads):
        raise NumericError("non-finite query gradient")
    return loss, OrderedDict(zip(keys, (g.detach() for g in grads)))


def outer_update(theta: cm.ModelState, grads_list, lambda_: float, episodes: int) -> cm.ModelState:
    """theta - (lambda_ / e) * sum of episode gradients."""
    total = OrderedDict((k, torch.zeros_like(v)) for k, v in theta.params.items())
    for g in grads_list:
        for k in total:
            total[k] = total[k] + g[k]
    scale = lambda_ / episodes
    params = OrderedDict((k, p - scale * total[k]) for k, p in theta.params.items())
    return cm.ModelState(theta.spec, params, theta.rng_seed, dict(theta.training_meta))


def _accuracy(model, params, batch) -> float:
    x, y = batch
    with torch.no_grad():
        pred = cm.forward(model, x.to(model.dtype), params).argmax(dim=1)
    return 100.0 * float((pred == y).sum()) / len(y)


def meta_epoch(theta: cm.ModelState, episodes, params: MetaParams, loss_fn: Optional[LossFn] = None):
    """One sweep over ``episodes`` followed by the outer update. Returns (theta_new, records)."""
    records, grads = [], []
    for j, ep in enumerate(episodes):
        S, Q = ep.S, ep.Q
        fn = loss_fn or model_loss(theta)
        with torch.no_grad():
            inner_loss = float(fn(theta.params, S))
        adapted = inner_update(theta, S, params.beta, params.inner_steps, loss_fn)
        q_loss, g = query_gradient(
            adapted, Q, params.second_order, theta=theta, S=S, beta=params.beta,
            inner_steps=params.inner_steps, loss_fn=loss_fn,
        )
        grads.append(g)
        rec = {"episode": j, "inner_loss": inner_loss, "query_loss": q_loss}
        if loss_fn is None:
            rec["query_ca"] = _accuracy(theta, adapted.params, Q)
            rec["attacks_S"] = list(ep.attacks_S)
            rec["attacks_Q"] = list(ep.attacks_Q)
        records.append(rec)
    return outer_update(theta, grads, params.lambda_, len(grads)), records


# --------------------------------------------------------------------------
# training loop


@dataclass
class MetaTrainLog:
    episodes: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_checkpoint_id: Optional[str] = None
    best_epoch: Optional[int] = None
    stop_reason: Optional[str] = None

    def summary(self) -> dict:
        return {
            "best_checkpoint_id": self.best_checkpoint_id,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "validation": self.validation,
            "episodes_run": len(self.episodes),
        }

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "log.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.episodes:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (d / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, directory) -> "MetaTrainLog":
        d = Path(directory)
        episodes = [json.loads(line) for line in (d / "log.jsonl").read_text().splitlines() if line.strip()]
        s = json.loads((d / "summary.json").read_text())
        return cls(episodes, s["validation"], s["best_checkpoint_id"], s["best_epoch"], s["stop_reason"])


def validation_panel(dataset: MadDataset, params: MetaParams, seed: int) -> list:
    attacks = dataset.attacks_for_role("meta_val")
    if not attacks:
        raise ConfigError("meta_val role has no attacks")
    rng = np.random.default_rng([int(seed), 1])
    return [sample_eval_task(dataset, attacks[i % len(attacks)], params, rng) for i in range(params.val_tasks)]


def _panel_score(theta, panel, params):
    losses, cas = [], []
    for task in panel:
        adapted = inner_update(theta, task.S, params.beta, params.inner_steps)
        with torch.no_grad():
            losses.append(float(model_loss(theta)(adapted.params, task.Q)))
        cas.append(_accuracy(theta, adapted.params, task.Q))
    return float(np.mean(losses)), float(np.mean(cas))


def meta_train(
    model: cm.ModelState,
    dataset: Optional[MadDataset],
    params: MetaParams,
    seed: int = 0,
    out_dir=None,
    resume: bool = False,
    episode_fn: Optional[Callable] = None,
    val_fn: Optional[Callable] = None,
    loss_fn: Optional[LossFn] = None,
):
    """Run meta-adversarial training; returns ``(best_state, MetaTrainLog)``.

    ``episode_fn(rng, epoch, j)`` and ``val_fn(state, epoch) -> (loss, ca)``
    replace dataset sampling and the meta_val panel (used for scripted runs).
    With ``out_dir`` the run writes ``best_val.ckpt``, ``last.ckpt``, the
    JSON-lines log and a resumable trainer state after every epoch.
    """
    if dataset is None and episode_fn is None:
        raise ConfigError("meta_train needs a dataset or an episode_fn")
    if dataset is not None and episode_fn is None and not dataset.attacks_for_role("meta_train"):
        raise ConfigError("meta_train role has no attacks")
    rng = np.random.default_rng(int(seed))
    if episode_fn is None:
        episode_fn = lambda r, epoch, j: sample_train_episode(dataset, params, r)  # noqa: E731
    if val_fn is None:
        if dataset is None:
            raise ConfigError("validation needs a dataset or a val_fn")
        panel = validation_panel(dataset, params, seed)
        val_fn = lambda state, epoch: _panel_score(state, panel, params)  # noqa: E731

    theta = model.clone()
    best = theta.clone()
    stopper = EarlyStopper(params.patience)
    run_log = MetaTrainLog()
    start_epoch = 0
    out = Path(out_dir) if out_dir is not None else None
    if resume and out is not None and (out / "trainer_state.json").exists():
        state = json.loads((out / "trainer_state.json").read_text())
        theta = cm.load_checkpoint(out / "last.ckpt")
        best = cm.load_checkpoint(out / "best_val.ckpt")
        stopper = EarlyStopper.from_state(state["stopper"])
        rng.bit_generator.state = state["rng"]
        run_log = MetaTrainLog.read(out)
        start_epoch = state["next_epoch"]
        if run_log.stop_reason == "patience":
            return best, run_log
        log.info("resuming meta-training at epoch %d", start_epoch)

    stop = run_log.stop_reason == "patience"
    step = len(run_log.episodes)
    for epoch in range(start_epoch, params.epochs):
        episodes = [episode_fn(rng, epoch, j) for j in range(params.episodes_per_epoch)]
        theta, records = meta_epoch(theta, episodes, params, loss_fn)
        if not theta.is_finite():
            raise NumericError(f"meta-training diverged in epoch {epoch}")
        for rec in records:
            rec.update(epoch=epoch, step=step)
            step += 1
        run_log.episodes.extend(records)
        v_loss, v_ca = val_fn(theta, epoch)
        run_log.validation.append({"epoch": epoch, "loss": v_loss, "ca": v_ca})
        decision = stopper.observe(v_loss)
        if stopper.improved:
            best = theta.clone()
            run_log.best_epoch = epoch
        log.info("epoch %d: val loss %.4f, val CA %.2f%%", epoch, v_loss, v_ca)
        if decision == "stop":
            stop = True
        run_log.stop_reason = "patience" if stop else (
            "epochs_exhausted" if epoch == params.epochs - 1 else None)
        best.training_meta["meta_epochs"] = (run_log.best_epoch or 0) + 1
        run_log.best_checkpoint_id = best.digest()
        if out is not None:
            _persist(out, theta, best, stopper, rng, run_log, epoch + 1, params, seed)
        if stop:
            break
    if run_log.stop_reason is None:
        run_log.stop_reason = "epochs_exhausted"
        if out is not None:
            run_log.write(out)
    return best, run_log


def _persist(out, theta, best, stopper, rng, run_log, next_epoch, params, seed):
    out.mkdir(parents=True, exist_ok=True)
    cm.save_checkpoint(theta, out / "last.ckpt")
    cm.save_checkpoint(best, out / "best_val.ckpt")
    run_log.write(out)
    state = {
        "next_epoch": next_epoch,
        "stopper": stopper.state_dict(),
        "rng": rng.bit_generator.state,
        "params": params.to_dict(),
        "seed": seed,
    }
    (out / "trainer_state.json").write_text(json.dumps(state, indent=2) + "\n")


# --------------------------------------------------------------------------
# few-shot evaluation


@dataclass
class FinetuneResult:
    ca_before: float
    ca_after: float
    ot_hours: float
    steps: int
    ot_total_hours: float
    model: cm.ModelState = field(repr=False, default=None)

    def record(self) -> dict:
        return {"ca_before": self.ca_before, "ca_after": self.ca_after, "ot_hours": self.ot_hours,
                "steps": self.steps, "ot_total_hours": self.ot_total_hours}


def finetune_and_eval(best: cm.ModelState, task, params: MetaParams, steps: Optional[int] = None, seed: int = 0) -> FinetuneResult:
    """Fine-tune on S' and measure CA on Q' before and after.

    Updates are plain gradient steps on the non-held-out part of S'; the
    held-out slice (``holdout_fraction`` of S') drives early stopping, and the
    best state on that slice is the one scored on Q'. The slice is scored by
    cross-entropy by default (``finetune_monitor="loss"``) because CA on a
    handful of held-out images ties too often to move the stopper; ``"ca"``
    monitors 100 - CA instead.
    """
    t_total = time.perf_counter()
    sx, sy = task.S
    qx, qy = task.Q
    if len(sy) == 0 or len(qy) == 0:
        raise DataError("evaluation task has an empty support or query set")
    budget = params.finetune_steps if steps is None else int(steps)
    ca_before = cm.evaluate_accuracy(best, qx, qy)
    if budget == 0:
        elapsed = (time.perf_counter() - t_total) / 3600
        return FinetuneResult(ca_before, ca_before, 0.0, 0, elapsed, best.clone())

    n_hold = int(round(params.holdout_fraction * len(sy)))
    n_hold = min(max(n_hold, 1 if params.holdout_fraction > 0 else 0), len(sy) - 1)
    perm = torch.from_numpy(np.random.default_rng([int(seed), 2]).permutation(len(sy)))
    hold, fit = perm[:n_hold], perm[n_hold:]
    fit_set = (sx[fit], sy[fit])

    t0 = time.perf_counter()
    state, kept, done = best, best, 0
    stopper = EarlyStopper(params.patience)

    def hold_loss(model):
        if params.finetune_monitor == "ca":
            return 100.0 - cm.evaluate_accuracy(model, sx[hold], sy[hold])
        with torch.no_grad():
            return float(cm.compute_loss(cm.forward(model, sx[hold]), sy[hold]))

    if n_hold:
        # the unadapted model is the first candidate, so a harmful step is never kept
        stopper.observe(hold_loss(best))
    for _ in range(budget):
        state = inner_update(state, fit_set, params.finetune_rate, 1)
        done += 1
        if n_hold == 0:
            kept = state
            continue
        decision = stopper.observe(hold_loss(state))
        if stopper.improved:
            kept = state
        if decision == "stop":
            break
    ot = (time.perf_counter() - t0) / 3600
    ca_after = cm.evaluate_accuracy(kept, qx, qy)
    return FinetuneResult(ca_before, ca_after, ot, done, (time.perf_counter() - t_total) / 3600, kept)

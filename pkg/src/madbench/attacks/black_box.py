"""Score-based black-box attacks. Nothing here touches gradients."""

from __future__ import annotations

import math

import numpy as np
import torch

from madbench import core_model as cm
from madbench.attacks.registry import AttackOutcome, AttackSpec
from madbench.errors import ConfigError


def _margin(model, x, y):
    """True-class logit minus the best other logit; negative means misclassified."""
    z = cm.predict_logits(model, x)
    onehot = torch.nn.functional.one_hot(y, z.shape[1]).to(torch.bool)
    return z[onehot] - z.masked_fill(onehot, -math.inf).amax(dim=1)


def _p_selection(p_init: float, it: int, budget: int) -> float:
    it = int(it / budget * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


@torch.no_grad()
def square_attack(model, x, y, spec: AttackSpec, generator=None) -> AttackOutcome:
    """Linf random search over square patches set to +-eps per channel.

    Starts from the clean input; every query evaluates one square proposal
    per still-unbroken example and keeps it only if the margin strictly
    drops. ``info['loss_trace']`` holds the accepted margin after each query.
    """
    budget = int(spec.extra.get("max_queries", spec.iterations))
    if budget <= 0:
        raise ConfigError("square attack needs a positive query budget")
    if spec.norm != "linf":
        raise ConfigError("only the linf square attack is implemented")
    p_init = float(spec.extra.get("p_init", 0.8))
    if not 0 < p_init <= 1:
        raise ConfigError("p_init must lie in (0, 1]")
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    x = x.detach().to(model.dtype)
    cm._check_batch(model, x, y)
    eps = spec.epsilon
    n, c, h, w = x.shape
    best = x.clone()
    if eps == 0:
        return AttackOutcome(best, cm.predict(model, best) != y, 0, {"loss_trace": []})
    loss = _margin(model, best, y)
    trace = [loss.clone()]
    queries = 0
    rows = torch.arange(h).view(1, h, 1)
    cols = torch.arange(w).view(1, 1, w)
    for it in range(budget):
        active = loss > 0
        if not active.any():
            break
        s = int(round(math.sqrt(_p_selection(p_init, it, budget) * h * w)))
        s = min(max(s, 1), h, w)
        r0 = torch.randint(0, h - s + 1, (n,), generator=gen).view(n, 1, 1)
        c0 = torch.randint(0, w - s + 1, (n,), generator=gen).view(n, 1, 1)
        window = ((rows >= r0) & (rows < r0 + s) & (cols >= c0) & (cols < c0 + s)).unsqueeze(1)
        signs = torch.randint(0, 2, (n, c, 1, 1), generator=gen).to(x.dtype) * 2 - 1
        proposal = torch.where(window, (x + eps * signs).clamp(0.0, 1.0), best)
        idx = active.nonzero().flatten()
        new_loss = _margin(model, proposal[idx], y[idx])
        queries += 1
        accept = new_loss < loss[idx]
        take = idx[accept]
        best[take] = proposal[take]
        loss[take] = new_loss[accept]
        trace.append(loss.clone())
    return AttackOutcome(best, cm.predict(model, best) != y, queries, {"loss_trace": trace})


def _apply_pixels(image: torch.Tensor, cand: np.ndarray, pixels: int) -> torch.Tensor:
    c, h, w = image.shape
    out = image.clone()
    for chunk in cand.reshape(pixels, 2 + c):
        r = min(int(chunk[0]), h - 1)
        q = min(int(chunk[1]), w - 1)
        out[:, r, q] = torch.as_tensor(chunk[2:], dtype=image.dtype)
    return out


@torch.no_grad()
def one_pixel(model, x, y, spec: AttackSpec, generator=None) -> AttackOutcome:
    """Differential evolution (rand/1/bin) over (row, col, channel values) tuples.

    Fitness is the softmax probability of the true class (minimized). Trial
    vectors replace their parent only when no worse, so the best fitness
    never rises above the initial population's.
    """
    pixels = int(spec.extra.get("pixels", 1))
    pop_size = int(spec.extra.get("population", 50))
    generations = int(spec.extra.get("generations", 30))
    mut = float(spec.extra.get("mutation", 0.5))
    cr = float(spec.extra.get("crossover", 0.9))
    if pop_size < 4:
        raise ConfigError("differential evolution needs a population of at least 4")
    if pixels < 0 or generations < 0:
        raise ConfigError("pixels and generations must be >= 0")
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    rng = np.random.default_rng(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    x = x.detach().to(model.dtype)
    cm._check_batch(model, x, y)
    n, c, h, w = x.shape
    if pixels == 0:
        return AttackOutcome(x.clone(), cm.predict(model, x) != y, 0, {})
    low = np.tile(np.r_[0.0, 0.0, np.zeros(c)], pixels)
    high = np.tile(np.r_[h - 1e-9, w - 1e-9, np.ones(c)], pixels)
    dim = len(low)

    def fitness(image, label, pop):
        batch = torch.stack([_apply_pixels(image, cand, pixels) for cand in pop])
        probs = torch.softmax(cm.predict_logits(model, batch), dim=1)[:, label]
        return probs.double().numpy(), batch

    out, initial, final, evals = [], [], [], 0
    for i in range(n):
        image, label = x[i], int(y[i])
        pop = low + rng.random((pop_size, dim)) * (high - low)
        fit, batch = fitness(image, label, pop)
        evals += pop_size
        initial.append(fit.copy())
        for _ in range(generations):
            b = int(fit.argmin())
            if int(cm.predict(model, batch[b:b + 1])) != label:
                break
            trials = np.empty_like(pop)
            for j in range(pop_size):
                a, bb, cc = rng.choice([k for k in range(pop_size) if k != j], 3, replace=False)
                mutant = np.clip(pop[a] + mut * (pop[bb] - pop[cc]), low, high)
                cross = rng.random(dim) < cr
                cross[rng.integers(dim)] = True
                trials[j] = np.where(cross, mutant, pop[j])
            trial_fit, trial_batch = fitness(image, label, trials)
            evals += pop_size
            keep = trial_fit <= fit
            pop[keep], fit[keep] = trials[keep], trial_fit[keep]
            batch[torch.from_numpy(keep)] = trial_batch[torch.from_numpy(keep)]
        b = int(fit.argmin())
        final.append(float(fit[b]))
        out.append(batch[b])
    x_adv = torch.stack(out)
    return AttackOutcome(
        x_adv, cm.predict(model, x_adv) != y, evals, {"initial_fitness": initial, "best_fitness": final}
    )

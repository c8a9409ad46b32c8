"""Gradient-based attacks: FGSM and its iterative relatives, DeepFool, CW-L2."""

from __future__ import annotations

import math

import torch

from madbench import core_model as cm
from madbench.attacks.projection import project_ball
from madbench.attacks.registry import AttackOutcome, AttackSpec
from madbench.errors import ConfigError, NumericError

VARIANTS = ("bim", "pgd_linf", "pgd_l2", "mifgsm", "rfgsm", "ffgsm", "tpgd", "eotpgd")
REQUIRED_EXTRAS = {
    "bim": (),
    "pgd_linf": ("random_start",),
    "pgd_l2": ("random_start",),
    "mifgsm": ("decay",),
    "rfgsm": ("random_start",),
    "ffgsm": ("random_start",),
    "tpgd": (),
    "eotpgd": ("eot_samples", "random_start"),
}


def _outcome(model, x_adv, y, steps, **info) -> AttackOutcome:
    success = cm.predict(model, x_adv) != y
    return AttackOutcome(x_adv.detach(), success, int(steps), info)


def _prepare(model, x, y, spec: AttackSpec):
    if spec.epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    x = x.detach().to(model.dtype)
    cm._check_batch(model, x, y)
    return x


def _view(t, like):
    return t.view(-1, *([1] * (like.ndim - 1)))


def _l2_normalize(g):
    return g / _view(g.flatten(1).norm(p=2, dim=1).clamp_min(1e-12), g)


def fgsm(model, x, y, spec: AttackSpec) -> AttackOutcome:
    x = _prepare(model, x, y, spec)
    if spec.epsilon == 0:
        return _outcome(model, x.clone(), y, 0)
    g = cm.input_grad(model, x, y)
    x_adv = (x + spec.epsilon * g.sign()).clamp(0.0, 1.0)
    return _outcome(model, x_adv, y, 1)


def _random_start(x, magnitude, norm, gen):
    if magnitude <= 0:
        return x.clone()
    if norm == "linf":
        noise = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * magnitude
    else:
        direction = _l2_normalize(torch.randn(x.shape, generator=gen, dtype=x.dtype))
        radius = torch.rand(x.shape[0], generator=gen, dtype=x.dtype) * magnitude
        noise = direction * _view(radius, x)
    return x + noise


def iterative_fgsm_family(model, x, y, spec: AttackSpec, variant: str, generator=None) -> AttackOutcome:
    """Signed (or L2-normalized) gradient steps followed by projection.

    ``bim``      iterative FGSM from the clean point
    ``pgd_*``    same with an optional uniform random start
    ``mifgsm``   steps along an accumulated L1-normalized gradient
    ``rfgsm``    random sign step of size ``random_start`` then one step of ``eps - random_start``
    ``ffgsm``    uniform random start then one step of ``step_size``
    ``tpgd``     steps on KL(clean softmax || adversarial softmax)
    ``eotpgd``   gradient averaged over uniform input-noise samples
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown iterative variant {variant!r}")
    missing = [k for k in REQUIRED_EXTRAS[variant] if k not in spec.extra]
    if missing:
        raise ConfigError(f"{variant} needs extra keys: {', '.join(missing)}")
    x = _prepare(model, x, y, spec)
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    eps, alpha = spec.epsilon, spec.step_size
    norm = "l2" if variant == "pgd_l2" else "linf"
    if eps == 0:
        return _outcome(model, x.clone(), y, 0)

    if variant == "rfgsm":
        r = float(spec.extra["random_start"])
        if not 0 <= r < eps:
            raise ConfigError("rfgsm random_start must lie in [0, epsilon)")
        x1 = (x + r * torch.randn(x.shape, generator=gen, dtype=x.dtype).sign()).clamp(0.0, 1.0)
        g = cm.input_grad(model, x1, y)
        return _outcome(model, project_ball(x1 + (eps - r) * g.sign(), x, eps, "linf"), y, 1)
    if variant == "ffgsm":
        x1 = project_ball(_random_start(x, float(spec.extra["random_start"]), "linf", gen), x, eps, "linf")
        g = cm.input_grad(model, x1, y)
        return _outcome(model, project_ball(x1 + alpha * g.sign(), x, eps, "linf"), y, 1)

    reference = None
    if variant == "tpgd":
        reference = cm.predict_logits(model, x)
        noise = float(spec.extra.get("init_noise", 0.001))
        x_adv = project_ball(x + noise * torch.randn(x.shape, generator=gen, dtype=x.dtype), x, eps, norm)
    elif variant in ("pgd_linf", "pgd_l2", "eotpgd"):
        x_adv = project_ball(_random_start(x, float(spec.extra["random_start"]), norm, gen), x, eps, norm)
    else:
        x_adv = x.clone()

    decay = float(spec.extra.get("decay", 0.0))
    momentum = torch.zeros_like(x)
    for _ in range(spec.iterations):
        if variant == "tpgd":
            g = cm.input_grad(model, x_adv, y, "kl_to_reference", reference)
        elif variant == "eotpgd":
            samples = int(spec.extra["eot_samples"])
            if samples < 1:
                raise ConfigError("eot_samples must be >= 1")
            sigma = float(spec.extra.get("eot_noise", alpha))
            g = torch.zeros_like(x)
            for _ in range(samples):
                jitter = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * sigma
                g = g + cm.input_grad(model, (x_adv + jitter).clamp(0.0, 1.0), y)
            g = g / samples
        else:
            g = cm.input_grad(model, x_adv, y)
        if variant == "mifgsm":
            g = g / _view(g.abs().flatten(1).mean(dim=1).clamp_min(1e-12), g)
            momentum = decay * momentum + g
            g = momentum
        step = alpha * (_l2_normalize(g) if norm == "l2" else g.sign())
        x_adv = project_ball(x_adv + step, x, eps, norm)
    return _outcome(model, x_adv, y, spec.iterations)


def _logits_and_class_grads(model, x):
    xg = x.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = cm.forward(model, xg)
        grads = [
            torch.autograd.grad(logits[:, k].sum(), xg, retain_graph=k + 1 < logits.shape[1])[0]
            for k in range(logits.shape[1])
        ]
    return logits.detach(), torch.stack(grads, dim=1)


def deepfool(model, x, y, spec: AttackSpec) -> AttackOutcome:
    """Minimal-L2 linearized boundary steps with overshoot.

    ``spec.epsilon`` caps the final L2 perturbation; ``extra['min_step']``
    is added to every linearized step so the iterate leaves the boundary.
    """
    x = _prepare(model, x, y, spec)
    overshoot = float(spec.extra.get("overshoot", 0.02))
    min_step = float(spec.extra.get("min_step", 1e-6))
    if spec.epsilon == 0:
        return _outcome(model, x.clone(), y, 0)
    r_tot = torch.zeros_like(x)
    x_adv = x.clone()
    rows = torch.arange(len(x))
    steps = 0
    for _ in range(spec.iterations):
        logits, jac = _logits_and_class_grads(model, x_adv)
        if not torch.isfinite(logits).all():
            raise NumericError("deepfool: non-finite logits")
        active = logits.argmax(dim=1) == y
        if not active.any():
            break
        steps += 1
        f_diff = logits - logits[rows, y].unsqueeze(1)
        w_diff = jac - jac[rows, y].unsqueeze(1)
        w_norm = w_diff.flatten(2).norm(dim=2)
        dist = f_diff.abs() / w_norm.clamp_min(1e-12)
        dist[rows, y] = math.inf
        k = dist.argmin(dim=1)
        w_k = w_diff[rows, k]
        scale = (dist[rows, k] + min_step) / w_norm[rows, k].clamp_min(1e-12)
        r_i = _view(scale, x) * w_k
        r_tot = r_tot + r_i * _view(active.to(x.dtype), x)
        x_adv = (x + (1 + overshoot) * r_tot).clamp(0.0, 1.0)
    x_adv = project_ball(x_adv, x, spec.epsilon, "l2")
    return _outcome(model, x_adv, y, steps)


def cw_l2(model, x, y, spec: AttackSpec) -> AttackOutcome:
    """Carlini-Wagner L2 in tanh space with Adam.

    Minimizes ``||delta||_2^2 + c * max(Z_y - max_{j != y} Z_j + kappa, 0)``.
    An example counts as found when the margin condition holds and the L2
    distance is within ``spec.epsilon``; the smallest such point is kept.
    Examples never found are returned unperturbed.
    """
    c = float(spec.extra.get("c", 1.0))
    kappa = float(spec.extra.get("confidence", 0.0))
    if c <= 0:
        raise ConfigError("cw_l2 needs c > 0")
    if kappa < 0:
        raise ConfigError("cw_l2 confidence must be >= 0")
    x = _prepare(model, x, y, spec)
    if spec.epsilon == 0:
        return _outcome(model, x.clone(), y, 0)
    n_cls = model.spec.num_classes
    onehot = torch.nn.functional.one_hot(y, n_cls).to(torch.bool)
    w = torch.atanh((2 * x - 1) * (1 - 1e-6)).detach().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=spec.step_size)
    best = x.clone()
    best_l2 = torch.full((len(x),), math.inf, dtype=x.dtype)
    found = torch.zeros(len(x), dtype=torch.bool)
    with torch.enable_grad():
        for _ in range(spec.iterations):
            xa = (torch.tanh(w) + 1) / 2
            z = cm.forward(model, xa)
            real = z[onehot]
            other = z.masked_fill(onehot, -math.inf).amax(dim=1)
            margin = torch.clamp(real - other + kappa, min=0)
            l2sq = (xa - x).flatten(1).pow(2).sum(dim=1)
            loss = (l2sq + c * margin).sum()
            opt.zero_grad()
            loss.backward()
            with torch.no_grad():
                l2 = l2sq.sqrt()
                ok = (real + kappa <= other) & (z.argmax(dim=1) != y) & (l2 <= spec.epsilon) & (l2 < best_l2)
                best[ok] = xa[ok].detach()
                best_l2[ok] = l2[ok]
                found |= ok
            opt.step()
    return _outcome(model, best, y, spec.iterations, found=found)

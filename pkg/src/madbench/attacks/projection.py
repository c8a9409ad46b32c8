"""Norm-ball projections in pixel space."""

import torch

from madbench.errors import ConfigError

PROJECTABLE_NORMS = ("linf", "l2")


def _per_example_l2(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).norm(p=2, dim=1).view(-1, *([1] * (t.ndim - 1)))


def project_ball(x_adv: torch.Tensor, x0: torch.Tensor, epsilon: float, norm: str) -> torch.Tensor:
    """Project ``x_adv`` onto the ``norm`` ball of radius ``epsilon`` around ``x0``, then onto [0, 1].

    For ``linf`` the result is the exact Euclidean projection onto the
    intersection (both sets are boxes). For ``l2`` the perturbation is scaled
    radially and then clipped; since ``x0`` lies in [0, 1], clipping only
    moves coordinates towards ``x0`` so the norm bound survives, and the map
    is idempotent.
    """
    if x_adv.shape != x0.shape:
        raise ConfigError(f"shape mismatch {tuple(x_adv.shape)} vs {tuple(x0.shape)}")
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    if norm == "linf":
        out = torch.max(torch.min(x_adv, x0 + epsilon), x0 - epsilon)
    elif norm == "l2":
        delta = x_adv - x0
        length = _per_example_l2(delta)
        factor = torch.where(length > epsilon, epsilon / length.clamp_min(1e-30), torch.ones_like(length))
        out = torch.where(factor < 1, x0 + delta * factor, x_adv)
    else:
        raise ConfigError(f"cannot project onto a {norm!r} ball; supported: {PROJECTABLE_NORMS}")
    return out.clamp(0.0, 1.0)


def perturbation_norm(x_adv: torch.Tensor, x0: torch.Tensor, norm: str) -> torch.Tensor:
    delta = (x_adv - x0).flatten(1)
    if norm == "linf":
        return delta.abs().amax(dim=1)
    if norm == "l2":
        return delta.norm(p=2, dim=1)
    if norm == "l0":
        # spatial positions touched, any channel
        return (x_adv != x0).any(dim=1).flatten(1).sum(dim=1).to(x0.dtype)
    raise ConfigError(f"unsupported norm {norm!r}")

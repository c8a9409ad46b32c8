"""Central finite differences in float64 for gradient checks."""

import numpy as np
import torch

from madbench import core_model as cm

H = 1e-6


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    scale = max(float(a.norm()), float(b.norm()))
    return 0.0 if scale == 0 else float((a - b).norm()) / scale


def _loss(model, x, y, params=None, loss_kind="cross_entropy", reference=None, reduction="mean"):
    with torch.no_grad():
        return float(cm.compute_loss(cm.forward(model, x, params), y, loss_kind, reference, reduction))


def param_fd(model, x, y, coords=None, loss_kind="cross_entropy", reference=None):
    """FD gradient w.r.t. the flattened parameters (all of them, or ``coords``)."""
    names = list(model.params)
    sizes = [model.params[k].numel() for k in names]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    coords = range(total) if coords is None else coords
    out = torch.zeros(total, dtype=torch.float64)
    for i in coords:
        t = int(np.searchsorted(offsets, i, side="right") - 1)
        name, j = names[t], i - int(offsets[t])
        vals = []
        for sign in (1, -1):
            params = {k: v.clone() for k, v in model.params.items()}
            params[name].view(-1)[j] += sign * H
            vals.append(_loss(model, x, y, params, loss_kind, reference))
        out[i] = (vals[0] - vals[1]) / (2 * H)
    return out


def input_fd(model, x, y, loss_kind="cross_entropy", reference=None):
    """FD gradient of the summed loss w.r.t. every input coordinate."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        vals = []
        for sign in (1, -1):
            xp = flat.clone()
            xp[i] += sign * H
            vals.append(_loss(model, xp.view_as(x), y, None, loss_kind, reference, "sum"))
        g.view(-1)[i] = (vals[0] - vals[1]) / (2 * H)
    return g

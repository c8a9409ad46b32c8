"""Classifier backbones, clean training, gradients and checkpoints.

Models are kept functional: a :class:`ModelState` owns an ordered dict of
parameter tensors and every forward pass goes through
``torch.func.functional_call`` on a parameter-free skeleton module. That lets
the meta-learning code build adapted parameter sets without touching the
original state.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from madbench.errors import (
    ConfigError,
    CorruptFileError,
    DataError,
    FormatVersionError,
    StorageError,
    TrainingDivergedError,
)

ARCHITECTURES = ("small_cnn", "resnet18_like", "alexnet_like")
DEFAULT_WIDTH = {"small_cnn": 16, "resnet18_like": 8, "alexnet_like": 8}
LOSS_KINDS = ("cross_entropy", "kl_to_reference")
OPTIMIZERS = ("sgd", "sgd_momentum")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class ModelSpec:
    architecture_id: str
    input_shape: tuple
    num_classes: int
    width: Optional[int] = None

    def __post_init__(self):
        if self.architecture_id not in _BUILDERS:
            raise ConfigError(
                f"unknown architecture_id {self.architecture_id!r}; "
                f"expected one of {', '.join(_BUILDERS)}"
            )
        shape = tuple(int(v) for v in self.input_shape)
        if len(shape) != 3 or min(shape) <= 0:
            raise ConfigError(f"input_shape must be 3 positive ints, got {self.input_shape!r}")
        object.__setattr__(self, "input_shape", shape)
        if int(self.num_classes) < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.width is not None and int(self.width) < 1:
            raise ConfigError("width must be >= 1")

    @property
    def resolved_width(self) -> int:
        return int(self.width) if self.width is not None else DEFAULT_WIDTH.get(self.architecture_id, 1)

    def to_dict(self) -> dict:
        return {
            "architecture_id": self.architecture_id,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["architecture_id"], tuple(d["input_shape"]), int(d["num_classes"]), d.get("width"))


@dataclass
class ModelState:
    spec: ModelSpec
    params: "OrderedDict[str, torch.Tensor]"
    rng_seed: int = 0
    training_meta: dict = field(default_factory=dict)

    def clone(self) -> "ModelState":
        params = OrderedDict((k, v.detach().clone()) for k, v in self.params.items())
        return ModelState(self.spec, params, self.rng_seed, json.loads(json.dumps(self.training_meta)))

    def to(self, dtype: torch.dtype) -> "ModelState":
        out = self.clone()
        out.params = OrderedDict((k, v.to(dtype)) for k, v in out.params.items())
        return out

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def flat(self) -> torch.Tensor:
        return torch.cat([p.reshape(-1) for p in self.params.values()])

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.params.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 0:
            raise ConfigError("epochs must be >= 0")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if not float(self.learning_rate) > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# --------------------------------------------------------------------------
# backbones


class SmallCNN(nn.Module):
    """Two conv blocks and two dense layers."""

    def __init__(self, c, h, w, n, width):
        super().__init__()
        self.conv1 = nn.Conv2d(c, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        fh, fw = h // 2 // 2, w // 2 // 2
        if fh < 1 or fw < 1:
            raise ConfigError("small_cnn needs inputs of at least 4x4")
        self.fc1 = nn.Linear(2 * width * fh * fw, 4 * width)
        self.fc2 = nn.Linear(4 * width, n)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(1, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(1, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.GroupNorm(1, cout)
            )

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ResNet18Like(nn.Module):
    """ResNet-18 topology (stem, 4 stages of 2 basic blocks, linear head) at reduced width.

    GroupNorm replaces BatchNorm so the network has no running buffers and a
    forward pass is a pure function of (parameters, input).
    """

    def __init__(self, c, h, w, n, width):
        super().__init__()
        self.stem = nn.Conv2d(c, width, 3, padding=1, bias=False)
        self.stem_norm = nn.GroupNorm(1, width)
        widths = [width, 2 * width, 4 * width, 8 * width]
        blocks, cin = [], width
        for i, cout in enumerate(widths):
            stride = 1 if i == 0 else 2
            blocks += [BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)]
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin, n)

    def forward(self, x):
        x = F.relu(self.stem_norm(self.stem(x)))
        x = self.blocks(x)
        return self.fc(x.mean(dim=(2, 3)))


class AlexNetLike(nn.Module):
    """Five conv layers (channel ratios 1:3:6:4:4) and a three-layer classifier."""

    def __init__(self, c, h, w, n, width):
        super().__init__()
        ch = [width, 3 * width, 6 * width, 4 * width, 4 * width]
        self.features = nn.Sequential(
            nn.Conv2d(c, ch[0], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True),
            nn.Conv2d(ch[0], ch[1], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True),
            nn.Conv2d(ch[1], ch[2], 3, padding=1), nn.ReLU(),
            nn.Conv2d(ch[2], ch[3], 3, padding=1), nn.ReLU(),
            nn.Conv2d(ch[3], ch[4], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(2)
        hidden = 16 * width
        self.classifier = nn.Sequential(
            nn.Linear(ch[4] * 4, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, n),
        )

    def forward(self, x):
        return self.classifier(self.pool(self.features(x)).flatten(1))


_BUILDERS = {"small_cnn": SmallCNN, "resnet18_like": ResNet18Like, "alexnet_like": AlexNetLike}


def register_architecture(name: str, builder: Callable) -> None:
    """Add a backbone: ``builder(channels, height, width, num_classes, width_mult) -> nn.Module``.

    Parameters must be the module's only state (no buffers), since
    forward passes run through ``functional_call`` on parameters alone.
    """
    if name in ARCHITECTURES:
        raise ConfigError(f"{name!r} is a built-in architecture")
    _BUILDERS[name] = builder
    _skeleton.cache_clear()


@functools.lru_cache(maxsize=32)
def _skeleton(spec: ModelSpec) -> nn.Module:
    c, h, w = spec.input_shape
    return _BUILDERS[spec.architecture_id](c, h, w, spec.num_classes, spec.resolved_width)


def build_model(spec: ModelSpec, seed: int = 0) -> ModelState:
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec.from_dict(spec)
    c, h, w = spec.input_shape
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        module = _BUILDERS[spec.architecture_id](c, h, w, spec.num_classes, spec.resolved_width)
    params = OrderedDict((k, v.detach().clone()) for k, v in module.named_parameters())
    return ModelState(spec, params, int(seed), {"epochs_run": 0})


# --------------------------------------------------------------------------
# forward passes, losses, gradients


def _check_batch(model: ModelState, x: torch.Tensor, y: Optional[torch.Tensor] = None):
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise DataError(f"expected images shaped (N, {model.spec.input_shape}), got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise DataError("empty batch")
    if y is not None:
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise DataError(f"labels shape {tuple(y.shape)} does not match batch of {x.shape[0]}")
        if int(y.min()) < 0 or int(y.max()) >= model.spec.num_classes:
            raise DataError(f"labels must lie in [0, {model.spec.num_classes})")


def forward(model: ModelState, x: torch.Tensor, params=None) -> torch.Tensor:
    """Logits for ``x``; ``params`` overrides the state's own parameters."""
    return functional_call(_skeleton(model.spec), model.params if params is None else params, (x,))


@torch.no_grad()
def predict_logits(model: ModelState, x: torch.Tensor) -> torch.Tensor:
    _check_batch(model, x)
    x = x.to(model.dtype)
    return torch.cat([forward(model, x[i:i + EVAL_CHUNK]) for i in range(0, len(x), EVAL_CHUNK)])


def predict(model: ModelState, x: torch.Tensor) -> torch.Tensor:
    return predict_logits(model, x).argmax(dim=1)


def compute_loss(logits, y, loss_kind="cross_entropy", reference=None, reduction="mean"):
    if loss_kind == "cross_entropy":
        if reference is not None:
            raise ConfigError("reference logits are only used by kl_to_reference")
        return F.cross_entropy(logits, y, reduction=reduction)
    if loss_kind == "kl_to_reference":
        if reference is None:
            raise ConfigError("kl_to_reference needs reference logits")
        if reference.shape != logits.shape:
            raise DataError("reference logits shape mismatch")
        per = F.kl_div(
            F.log_softmax(logits, dim=1),
            F.log_softmax(reference.to(logits.dtype), dim=1),
            log_target=True,
            reduction="none",
        ).sum(dim=1)
        return per.mean() if reduction == "mean" else per.sum()
    raise ConfigError(f"unknown loss_kind {loss_kind!r}")


def loss_and_grad(model: ModelState, x, y, loss_kind="cross_entropy", reference=None, params=None):
    """Batch-mean loss and its gradient w.r.t. every parameter tensor."""
    _check_batch(model, x, y)
    base = model.params if params is None else params
    live = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in base.items())
    with torch.enable_grad():
        loss = compute_loss(forward(model, x.to(model.dtype), live), y, loss_kind, reference)
        grads = torch.autograd.grad(loss, list(live.values()))
    return float(loss.detach()), OrderedDict(zip(live.keys(), (g.detach() for g in grads)))


def input_grad(model: ModelState, x, y, loss_kind="cross_entropy", reference=None) -> torch.Tensor:
    """Gradient of the summed loss w.r.t. the input batch.

    Summing (not averaging) keeps each example's gradient independent of the
    batch size it was computed in.
    """
    _check_batch(model, x, y)
    xg = x.detach().to(model.dtype).requires_grad_(True)
    with torch.enable_grad():
        loss = compute_loss(forward(model, xg), y, loss_kind, reference, reduction="sum")
        # an input-independent model leaves x out of the graph entirely
        g = torch.autograd.grad(loss, xg, allow_unused=True)[0] if loss.requires_grad else None
    return torch.zeros_like(xg) if g is None else g.detach()


def evaluate_accuracy(model: ModelState, x, y) -> float:
    """Percentage of argmax-correct predictions."""
    if x.shape[0] == 0:
        raise DataError("cannot evaluate accuracy on an empty set")
    _check_batch(model, x, y)
    correct = int((predict(model, x) == y).sum())
    return 100.0 * correct / int(x.shape[0])


# --------------------------------------------------------------------------
# training


BatchTransform = Callable[[ModelState, torch.Tensor, torch.Tensor, int], tuple]


def fit(model: ModelState, x, y, cfg: TrainConfig, batch_transform: Optional[BatchTransform] = None) -> ModelState:
    """Minibatch SGD shared by clean and adversarial training.

    ``batch_transform(state, xb, yb, step)`` may replace each shuffled batch
    before the gradient step (adversarial training regenerates it there).
    """
    _check_batch(model, x, y)
    state = model.clone()
    if cfg.epochs == 0:
        return state
    gen = torch.Generator().manual_seed(int(cfg.seed))
    velocity = OrderedDict((k, torch.zeros_like(v)) for k, v in state.params.items())
    n = x.shape[0]
    losses = list(state.training_meta.get("epoch_losses", []))
    step = 0
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if batch_transform is not None:
                xb, yb = batch_transform(state, xb, yb, step)
            loss, grads = loss_and_grad(state, xb, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at step {step}")
            for k, g in grads.items():
                if cfg.optimizer == "sgd_momentum":
                    velocity[k].mul_(cfg.momentum).add_(g)
                    g = velocity[k]
                state.params[k] = state.params[k] - cfg.learning_rate * g
            total += loss * len(yb)
            seen += len(yb)
            step += 1
        losses.append(total / seen)
    state.training_meta["epochs_run"] = int(state.training_meta.get("epochs_run", 0)) + cfg.epochs
    state.training_meta["epoch_losses"] = losses
    state.training_meta["final_loss"] = losses[-1]
    if not state.is_finite():
        raise TrainingDivergedError("parameters became non-finite")
    return state


def train_clean(model: ModelState, x, y, cfg: TrainConfig) -> ModelState:
    """Plain cross-entropy training on clean images in [0, 1]."""
    if x.numel() and (float(x.min()) < 0.0 or float(x.max()) > 1.0):
        raise DataError("images must be normalized to [0, 1]")
    return fit(model, x, y, cfg)


# --------------------------------------------------------------------------
# checkpoints
#
# layout: b"MADCKPT\0" | u32 LE header length | UTF-8 JSON header | payload
# The header lists each tensor's name, shape, byte offset into the payload
# and byte length; the payload is the raw little-endian float32 tensors in
# header order. ``payload_sha256`` guards against silent corruption.

CKPT_MAGIC = b"MADCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(state: ModelState, path) -> Path:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, p in state.params.items():
        arr = p.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "format_version": CKPT_VERSION,
        **state.spec.to_dict(),
        "seed": state.rng_seed,
        "training_meta": state.training_meta,
        "tensors": index,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<I", len(head)) + head + payload)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:8] != CKPT_MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CorruptFileError(f"{path}: truncated header ({len(raw) - 12} of {hlen} bytes)")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != CKPT_VERSION:
        raise FormatVersionError(f"{path}: format_version {version!r}, this reader supports {CKPT_VERSION}")
    payload = raw[12 + hlen:]
    if len(payload) != header["payload_nbytes"]:
        raise CorruptFileError(
            f"{path}: payload is {len(payload)} bytes, header declares {header['payload_nbytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptFileError(f"{path}: payload checksum mismatch")
    spec = ModelSpec.from_dict(header)
    params = OrderedDict()
    for t in header["tensors"]:
        buf = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).astype(np.float32)
        params[t["name"]] = torch.from_numpy(arr.copy())
    expected = [k for k, _ in _skeleton(spec).named_parameters()]
    if list(params) != expected:
        raise CorruptFileError(f"{path}: tensor names do not match architecture {spec.architecture_id}")
    return ModelState(spec, params, int(header["seed"]), header.get("training_meta", {}))

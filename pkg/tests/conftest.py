"""Shared fixtures: tiny registered backbones and the acceptance summary hook."""

import sys
from pathlib import Path

import pytest
import torch
import torch.nn as nn

from madbench import core_model as cm

sys.path.insert(0, str(Path(__file__).parent))


class Linear(nn.Module):
    """Flatten then one affine map; logistic regression when num_classes is 2."""

    def __init__(self, c, h, w, n, width):
        super().__init__()
        self.fc = nn.Linear(c * h * w, n)

    def forward(self, x):
        return self.fc(x.flatten(1))


class Constant(nn.Module):
    """Logits that ignore the input."""

    def __init__(self, c, h, w, n, width):
        super().__init__()
        self.bias = nn.Parameter(torch.linspace(-1.0, 1.0, n))

    def forward(self, x):
        return self.bias.expand(x.shape[0], -1)


class TinyMLP(nn.Module):
    def __init__(self, c, h, w, n, width):
        super().__init__()
        self.l1 = nn.Linear(c * h * w, width)
        self.l2 = nn.Linear(width, n)

    def forward(self, x):
        return self.l2(torch.tanh(self.l1(x.flatten(1))))


class TinyConv(nn.Module):
    def __init__(self, c, h, w, n, width):
        super().__init__()
        self.conv = nn.Conv2d(c, width, 3, padding=1)
        self.fc = nn.Linear(width, n)

    def forward(self, x):
        return self.fc(torch.tanh(self.conv(x)).mean(dim=(2, 3)))


TOYS = {"toy_linear": Linear, "toy_constant": Constant, "toy_mlp": TinyMLP, "toy_conv": TinyConv}
for _name, _builder in TOYS.items():
    if _name not in cm._BUILDERS:
        cm.register_architecture(_name, _builder)


def toy(arch, shape=(1, 4, 4), n=3, width=4, seed=0, dtype=torch.float32):
    return cm.build_model(cm.ModelSpec(arch, shape, n, width), seed).to(dtype)


@pytest.fixture
def make_toy():
    return toy


# --------------------------------------------------------------------------
# acceptance summary

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")

import struct

import numpy as np
import pytest
import torch

from madbench import core_model as cm
from madbench.errors import ConfigError, CorruptFileError, DataError, FormatVersionError, TrainingDivergedError

from conftest import toy
from fd import input_fd, param_fd, rel_error

F64 = torch.float64


def _batch(shape=(1, 4, 4), n=6, classes=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, *shape, generator=g, dtype=dtype)
    y = torch.randint(0, classes, (n,), generator=g)
    return x, y


# --------------------------------------------------------------------------
# construction


def test_build_is_deterministic_per_seed():
    spec = cm.ModelSpec("small_cnn", (1, 28, 28), 10)
    assert cm.build_model(spec, 3).digest() == cm.build_model(spec, 3).digest()
    assert cm.build_model(spec, 3).digest() != cm.build_model(spec, 4).digest()


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    cm.build_model(cm.ModelSpec("small_cnn", (1, 28, 28), 10), 0)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("arch", cm.ARCHITECTURES)
def test_builtin_architectures_produce_logits(arch):
    m = cm.build_model(cm.ModelSpec(arch, (3, 32, 32), 10), 0)
    assert cm.predict_logits(m, torch.rand(2, 3, 32, 32)).shape == (2, 10)


def test_unknown_architecture_rejected():
    with pytest.raises(ConfigError):
        cm.ModelSpec("vgg", (1, 28, 28), 10)


@pytest.mark.parametrize("kwargs", [dict(input_shape=(28, 28)), dict(num_classes=1), dict(width=0)])
def test_bad_spec_fields_rejected(kwargs):
    args = dict(architecture_id="small_cnn", input_shape=(1, 28, 28), num_classes=10) | kwargs
    with pytest.raises(ConfigError):
        cm.ModelSpec(**args)


def test_builtin_names_cannot_be_re_registered():
    with pytest.raises(ConfigError):
        cm.register_architecture("small_cnn", lambda *a: None)


# --------------------------------------------------------------------------
# accuracy, losses


def test_accuracy_examples():
    m = toy("toy_constant", n=3)  # always predicts class 2
    x = torch.rand(4, 1, 4, 4)
    assert cm.evaluate_accuracy(m, x, torch.tensor([2, 2, 2, 2])) == 100.0
    assert cm.evaluate_accuracy(m, x, torch.tensor([0, 1, 0, 1])) == 0.0
    assert cm.evaluate_accuracy(m, x, torch.tensor([2, 2, 2, 0])) == 75.0


def test_accuracy_rejects_empty_and_bad_labels():
    m = toy("toy_linear")
    with pytest.raises(DataError):
        cm.evaluate_accuracy(m, torch.rand(0, 1, 4, 4), torch.zeros(0, dtype=torch.long))
    with pytest.raises(DataError):
        cm.evaluate_accuracy(m, torch.rand(2, 1, 4, 4), torch.tensor([0, 3]))
    with pytest.raises(DataError):
        cm.evaluate_accuracy(m, torch.rand(2, 1, 5, 5), torch.tensor([0, 1]))


def test_kl_to_self_is_zero():
    m = toy("toy_mlp")
    x, _ = _batch()
    logits = cm.predict_logits(m, x)
    assert float(cm.compute_loss(logits, None, "kl_to_reference", logits)) == pytest.approx(0.0, abs=1e-7)


def test_loss_kind_validation():
    logits = torch.zeros(2, 3)
    y = torch.tensor([0, 1])
    with pytest.raises(ConfigError):
        cm.compute_loss(logits, y, "hinge")
    with pytest.raises(ConfigError):
        cm.compute_loss(logits, y, "kl_to_reference")
    with pytest.raises(ConfigError):
        cm.compute_loss(logits, y, "cross_entropy", logits)


# --------------------------------------------------------------------------
# gradients


def test_linear_model_softmax_gradient_is_analytic():
    m = toy("toy_linear", dtype=F64)
    x, y = _batch(dtype=F64)
    _, grads = cm.loss_and_grad(m, x, y)
    xf = x.flatten(1)
    p = torch.softmax(xf @ m.params["fc.weight"].T + m.params["fc.bias"], dim=1)
    delta = (p - torch.nn.functional.one_hot(y, 3).to(F64)) / len(y)
    assert torch.allclose(grads["fc.weight"], delta.T @ xf, atol=1e-12)
    assert torch.allclose(grads["fc.bias"], delta.sum(0), atol=1e-12)
    gx = cm.input_grad(m, x, y)
    assert torch.allclose(gx.flatten(1), delta * len(y) @ m.params["fc.weight"], atol=1e-12)


def test_constant_model_has_zero_input_gradient():
    m = toy("toy_constant")
    x, y = _batch()
    assert torch.count_nonzero(cm.input_grad(m, x, y)) == 0


def test_input_gradient_is_per_example():
    m = toy("toy_mlp", dtype=F64)
    x, y = _batch(dtype=F64)
    whole = cm.input_grad(m, x, y)
    single = torch.cat([cm.input_grad(m, x[i:i + 1], y[i:i + 1]) for i in range(len(x))])
    assert torch.allclose(whole, single, atol=1e-14)


GRAD_MODELS = [
    ("toy_mlp", (1, 4, 4), 4),
    ("toy_conv", (2, 4, 4), 3),
    ("small_cnn", (1, 8, 8), 1),
]


@pytest.mark.parametrize("arch,shape,width", GRAD_MODELS)
def test_parameter_gradients_match_finite_differences(arch, shape, width):
    m = toy(arch, shape=shape, width=width, seed=1, dtype=F64)
    assert m.num_parameters() <= 500
    x, y = _batch(shape, dtype=F64, seed=2)
    _, grads = cm.loss_and_grad(m, x, y)
    analytic = torch.cat([g.reshape(-1) for g in grads.values()])
    err = rel_error(analytic, param_fd(m, x, y))
    assert err <= 1e-3, err


@pytest.mark.parametrize("arch,shape,width", GRAD_MODELS)
def test_input_gradients_match_finite_differences(arch, shape, width):
    m = toy(arch, shape=shape, width=width, seed=1, dtype=F64)
    x, y = _batch(shape, n=3, dtype=F64, seed=3)
    err = rel_error(cm.input_grad(m, x, y), input_fd(m, x, y))
    assert err <= 1e-3, err


def test_kl_input_gradient_matches_finite_differences():
    m = toy("toy_mlp", dtype=F64, seed=4)
    x, y = _batch(n=3, dtype=F64)
    ref = cm.predict_logits(m, x + 0.05)
    err = rel_error(cm.input_grad(m, x, y, "kl_to_reference", ref), input_fd(m, x, y, "kl_to_reference", ref))
    assert err <= 1e-3, err


@pytest.mark.parametrize("arch", ["resnet18_like", "alexnet_like"])
def test_large_backbone_gradients_on_sampled_coordinates(arch):
    m = toy(arch, shape=(1, 8, 8), n=3, width=1, seed=0, dtype=F64)
    x, y = _batch((1, 8, 8), n=2, dtype=F64)
    _, grads = cm.loss_and_grad(m, x, y)
    analytic = torch.cat([g.reshape(-1) for g in grads.values()])
    coords = np.random.default_rng(0).choice(m.num_parameters(), 150, replace=False)
    numeric = param_fd(m, x, y, coords)
    err = rel_error(analytic[coords], numeric[coords])
    assert err <= 1e-3, err


# --------------------------------------------------------------------------
# training


def _separable(n=200, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 1, 2, 2, generator=g)
    y = (x.flatten(1)[:, 0] > x.flatten(1)[:, 1]).long()
    return x, y


def test_training_on_separable_data_matches_logistic_regression():
    x, y = _separable()
    m = cm.build_model(cm.ModelSpec("toy_linear", (1, 2, 2), 2), 0)
    cfg = cm.TrainConfig(epochs=200, batch_size=200, learning_rate=2.0, seed=0)
    out = cm.train_clean(m, x, y, cfg)
    assert cm.evaluate_accuracy(out, x, y) >= 97.0
    # full-batch GD on the same convex objective, written out by hand
    w = m.params["fc.weight"].clone()
    b = m.params["fc.bias"].clone()
    xf = x.flatten(1)
    onehot = torch.nn.functional.one_hot(y, 2).float()
    for _ in range(200):
        delta = (torch.softmax(xf @ w.T + b, 1) - onehot) / len(y)
        w, b = w - 2.0 * delta.T @ xf, b - 2.0 * delta.sum(0)
    assert torch.allclose(out.params["fc.weight"], w, atol=1e-4)
    assert torch.allclose(out.params["fc.bias"], b, atol=1e-4)
    assert out.training_meta["epochs_run"] == 200
    assert out.training_meta["epoch_losses"][-1] < out.training_meta["epoch_losses"][0]


def test_zero_epochs_leaves_parameters_unchanged():
    m = toy("toy_mlp")
    x, y = _batch()
    out = cm.train_clean(m, x, y, cm.TrainConfig(epochs=0))
    assert out.digest() == m.digest()


def test_training_is_deterministic_and_does_not_mutate_input():
    m = toy("toy_mlp")
    before = m.digest()
    x, y = _batch(n=40)
    cfg = cm.TrainConfig(epochs=3, batch_size=8, optimizer="sgd_momentum", seed=7)
    a, b = cm.train_clean(m, x, y, cfg), cm.train_clean(m, x, y, cfg)
    assert a.digest() == b.digest() != before
    assert m.digest() == before


def test_training_rejects_bad_inputs():
    m = toy("toy_mlp")
    x, y = _batch()
    with pytest.raises(DataError):
        cm.train_clean(m, x, torch.full_like(y, 3), cm.TrainConfig(epochs=1))
    with pytest.raises(DataError):
        cm.train_clean(m, x * 2, y, cm.TrainConfig(epochs=1))
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0), dict(optimizer="adam")):
        with pytest.raises(ConfigError):
            cm.TrainConfig(**bad)


def test_divergence_is_reported():
    m = toy("toy_linear")
    x, y = _batch(n=32)
    with pytest.raises(TrainingDivergedError):
        cm.train_clean(m, x, y, cm.TrainConfig(epochs=5, learning_rate=1e38))


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    m = cm.build_model(cm.ModelSpec("small_cnn", (1, 28, 28), 10), 5)
    m.training_meta["note"] = "x"
    path = cm.save_checkpoint(m, tmp_path / "m.ckpt")
    back = cm.load_checkpoint(path)
    assert back.digest() == m.digest()
    assert back.spec == m.spec and back.rng_seed == 5 and back.training_meta["note"] == "x"
    raw = path.read_bytes()
    assert raw[:8] == b"MADCKPT\x00"
    (hlen,) = struct.unpack("<I", raw[8:12])
    assert len(raw) == 12 + hlen + 4 * m.num_parameters()


def test_truncated_checkpoint_is_corrupt(tmp_path):
    path = cm.save_checkpoint(toy("toy_mlp"), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for cut in (5, 20, len(raw) - 4):
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptFileError):
            cm.load_checkpoint(path)


def test_flipped_payload_byte_is_caught(tmp_path):
    path = cm.save_checkpoint(toy("toy_mlp"), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError):
        cm.load_checkpoint(path)


def test_wrong_format_version(tmp_path):
    path = cm.save_checkpoint(toy("toy_mlp"), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[8:12])
    head = raw[12:12 + hlen].replace(b'"format_version": 1', b'"format_version": 9')
    path.write_bytes(raw[:12] + head + raw[12 + hlen:])
    with pytest.raises(FormatVersionError):
        cm.load_checkpoint(path)


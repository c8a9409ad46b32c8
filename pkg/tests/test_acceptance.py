"""The eight acceptance criteria, each reporting one PASS/FAIL line in the terminal summary."""

import hashlib
import time

import numpy as np
import pytest
import torch

from madbench import core_model as cm
from madbench import mad_dataset as md
from madbench.attacks import IMPLEMENTED_IDS, default_spec, fgsm, project_ball, run_attack
from madbench.meta_at import EarlyStopper, MetaParams, inner_update, meta_epoch, query_gradient
from madbench.metrics import compute_dsr, compute_edsr

from conftest import ACCEPTANCE, toy
from fd import input_fd, param_fd, rel_error
from smoke_pipeline import BIM, SUITE_IDS, run_smoke
from test_attacks import BLACK_BOX, GradientTripwire, budget_ok, closed_form_sign, logistic, quick_spec
from test_core_model import GRAD_MODELS, _batch
from test_meta_at import DUMMY, _brute_force_epoch, _scripted_episodes, half_square, scalar_state
from test_metrics import DSR_CASES, EDSR_CASES

F64 = torch.float64


def report(n, ok, detail):
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="module")
def smoke():
    return run_smoke(0)


def test_criterion_1_metric_oracles():
    t0 = time.perf_counter()
    worst = max(
        [abs(compute_dsr(d, a, c) - w) for d, a, c, w in DSR_CASES]
        + [abs(compute_edsr(s, o) - w) for s, o, w in EDSR_CASES]
    )
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and secs < 1
    report(1, ok, f"max deviation {worst:.1e}, {secs * 1000:.2f} ms")
    assert ok


def test_criterion_2_attack_properties(monkeypatch):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []
    instances = 0
    for aid in IMPLEMENTED_IDS:
        norm = default_spec(aid).norm
        for i in range(100):
            seed = int(rng.integers(2**31))
            m = toy(str(rng.choice(["toy_mlp", "toy_conv"])), seed=seed)
            x = torch.from_numpy(rng.random((2, 1, 4, 4)).astype(np.float32))
            y = torch.from_numpy(rng.integers(0, 3, 2))
            eps = float(rng.uniform(0.05, 0.5) if norm == "linf" else rng.uniform(0.2, 3.0))
            spec = quick_spec(aid, eps)
            if aid in BLACK_BOX:
                with GradientTripwire(monkeypatch):
                    out = run_attack(spec, m, x, y, seed=seed)
            else:
                out = run_attack(spec, m, x, y, seed=seed)
            if not budget_ok(spec, out.x_adv, x):
                failures.append((aid, i, "budget"))
            if not torch.equal(out.success_mask, cm.predict(m, out.x_adv) != y):
                failures.append((aid, i, "success_mask"))
            zero = quick_spec(aid, 0.0, pixels=0) if aid == 28 else quick_spec(aid, 0.0)
            if not torch.equal(run_attack(zero, m, x, y, seed=seed).x_adv, x):
                failures.append((aid, i, "eps=0"))
            instances += 1
    # closed-form directions on a logistic model
    for i in range(100):
        m = logistic(seed=i)
        x = torch.from_numpy(rng.random((3, 1, 4, 4)))
        y = torch.from_numpy(rng.integers(0, 2, 3))
        eps = float(rng.uniform(0.05, 0.5))
        s = closed_form_sign(m, y)
        if not torch.allclose(fgsm(m, x, y, default_spec(13, epsilon=eps)).x_adv, (x + eps * s).clamp(0, 1), atol=1e-6):
            failures.append((13, i, "closed form"))
        pgd = default_spec(18, epsilon=eps, step_size=eps / 3, iterations=5, extra={"random_start": 0.0})
        want = project_ball(x + eps * s, x, eps, "linf")
        if not torch.allclose(run_attack(pgd, m, x, y).x_adv, want, atol=1e-6):
            failures.append((18, i, "closed form"))
    secs = time.perf_counter() - t0
    ok = not failures and secs < 120
    report(2, ok, f"{instances} attack instances over {len(IMPLEMENTED_IDS)} attacks, "
                  f"{len(failures)} failures, {secs:.1f}s")
    assert not failures, failures[:10]
    assert secs < 120


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    worst, largest = 0.0, 0
    for arch, shape, width in GRAD_MODELS:
        m = toy(arch, shape=shape, width=width, seed=5, dtype=F64)
        largest = max(largest, sum(p.numel() for p in m.params.values()))
        x, y = _batch(shape, n=3, dtype=F64, seed=6)
        _, grads = cm.loss_and_grad(m, x, y)
        worst = max(worst, rel_error(torch.cat([g.reshape(-1) for g in grads.values()]), param_fd(m, x, y)))
        worst = max(worst, rel_error(cm.input_grad(m, x, y), input_fd(m, x, y)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-3 and largest <= 500 and secs < 60
    report(3, ok, f"worst relative error {worst:.2e}, largest model {largest} params, {secs:.1f}s")
    assert ok


def test_criterion_4_smoke_reproduction(smoke):
    gain = smoke.finetune.ca_after - smoke.finetune.ca_before
    drop = smoke.clean_test_accuracy - smoke.defended_clean_accuracy
    checks = {
        "clean accuracy": smoke.clean_test_accuracy >= 95.0,
        "zero CA": all(ca == 0.0 for ca in smoke.store_cas.values()),
        "gain": gain >= 5.0,
        "clean drop": drop <= 5.0,
        "runtime": smoke.seconds <= 15 * 60,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(4, ok, f"clean {smoke.clean_test_accuracy:.2f}%, ca {smoke.finetune.ca_before:.2f} -> "
                  f"{smoke.finetune.ca_after:.2f} (gain {gain:.2f}), defended clean "
                  f"{smoke.defended_clean_accuracy:.2f}% (drop {drop:.2f}), {smoke.seconds:.0f}s"
                  + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, checks


def test_criterion_5_algorithm_equivalence():
    theta = toy("toy_linear", shape=(1, 2, 2), n=3, seed=2, dtype=F64)
    eps = _scripted_episodes(1)
    n_params = sum(p.numel() for p in theta.params.values())
    worst = 0.0
    for so in (False, True):
        new, _ = meta_epoch(theta, eps, MetaParams(beta=0.2, lambda_=0.4, second_order=so))
        worst = max(worst, float((new.flat() - _brute_force_epoch(theta, eps, 0.2, 0.4, so)).abs().max()))
    s = scalar_state(1.0)
    inner = abs(float(inner_update(s, DUMMY, 0.01, loss_fn=half_square).params["theta"]) - 0.99)
    a = inner_update(s, DUMMY, 0.1, loss_fn=half_square)
    _, g2 = query_gradient(a, DUMMY, True, theta=s, S=DUMMY, beta=0.1, loss_fn=half_square)
    second = abs(float(g2["theta"]) - 0.81)
    ok = worst <= 1e-6 and inner <= 1e-9 and second <= 1e-9 and n_params <= 20 and len(eps) == 3
    report(5, ok, f"{len(eps)} episodes on {n_params} params: epoch max diff {worst:.1e}, "
                  f"theta' err {inner:.1e}, second-order err {second:.1e}")
    assert ok


def _split_problems(ds):
    problems = []
    for a, store in ds.attacks.items():
        for c, cs in store.classes.items():
            sources = [set(cs.source_index[cs.indices(s)].tolist()) for s in md.SPLITS]
            if sum(len(s) for s in sources) != len(cs) or len(set().union(*sources)) != len(cs):
                problems.append(f"attack {a}, class {c}: splits overlap")
            want = np.array(md.split_counts(len(cs)))
            got = np.array([len(s) for s in sources])
            # val and test are within one of c/5; the remainder goes to train
            if np.abs(got[1:] - len(cs) / 5).max() >= 1 or (got != want).any():
                problems.append(f"attack {a}, class {c}: split sizes {got.tolist()}")
    return problems


def _files_digest(folder):
    h = hashlib.sha256()
    for path in sorted(p for p in folder.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(folder)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_criterion_6_dataset_invariants(smoke, tmp_path):
    ds = smoke.dataset
    problems = md.validate_mad(ds, smoke.clean_model) + _split_problems(ds)
    roles = {r: set(ds.attacks_for_role(r)) for r in ("meta_train", "meta_val", "test_new")}
    if roles["meta_train"] & roles["meta_val"] or roles["meta_train"] & roles["test_new"] \
            or roles["meta_val"] & roles["test_new"]:
        problems.append(f"roles overlap: {roles}")
    if set().union(*roles.values()) != set(SUITE_IDS) or BIM not in roles["test_new"]:
        problems.append(f"unexpected role assignment: {roles}")

    md.save_mad(ds, tmp_path / "a")
    back = md.load_mad(tmp_path / "a")
    for a, store in ds.attacks.items():
        for c, cs in store.classes.items():
            other = back.attacks[a].classes[c]
            if not (torch.equal(cs.images, other.images) and np.array_equal(cs.source_index, other.source_index)
                    and np.array_equal(cs.split, other.split)):
                problems.append(f"attack {a}, class {c}: round trip differs")
    md.save_mad(back, tmp_path / "b")
    if _files_digest(tmp_path / "a") != _files_digest(tmp_path / "b"):
        problems.append("re-saved store differs byte-wise")
    ok = not problems
    sizes = sorted({len(cs) for s in ds.attacks.values() for cs in s.classes.values()})
    report(6, ok, f"{len(ds.attacks)} stores, per-class sizes {sizes}, {len(problems)} problems")
    assert ok, problems[:10]


def test_criterion_7_early_stopping():
    rng = np.random.default_rng(0)
    bad = checked = 0
    for _ in range(1000):
        p = int(rng.integers(1, 8))
        values = rng.permutation(60).astype(float)  # unique values
        s = EarlyStopper(p)
        count = next((i + 1 for i, v in enumerate(values) if s.observe(v) == "stop"), None)
        if count is None:
            continue
        checked += 1
        if count != s.best_index() + p + 1 or s.best_index() != int(np.argmin(values[:count])):
            bad += 1
    ties = EarlyStopper(2)
    tie_ok = [ties.observe(v) for v in (0.5, 0.5, 0.5)][-1] == "stop" and ties.best_index() == 0
    ok = bad == 0 and tie_ok
    report(7, ok, f"{bad} mismatches over 1000 sequences ({checked} stopped), ties {'ok' if tie_ok else 'wrong'}")
    assert ok


def _checkpoint_bytes(model, path):
    return cm.save_checkpoint(model, path).read_bytes()


def _comparable(record):
    d = record.__dict__.copy()
    for key in ("ot_hours", "edsr"):  # edsr is a function of wall-clock OT
        d.pop(key)
    return d


def test_criterion_8_determinism(smoke, tmp_path):
    again = run_smoke(0)
    pairs = {
        "clean": (smoke.clean_model, again.clean_model),
        "meta best": (smoke.best, again.best),
        "defended": (smoke.finetune.model, again.finetune.model),
    }
    differing = [name for name, (a, b) in pairs.items()
                 if _checkpoint_bytes(a, tmp_path / f"{name}-1.ckpt") != _checkpoint_bytes(b, tmp_path / f"{name}-2.ckpt")]
    same_record = _comparable(smoke.record) == _comparable(again.record)
    ok = not differing and same_record
    report(8, ok, f"{len(pairs) - len(differing)}/{len(pairs)} checkpoints identical, "
                  f"records {'identical' if same_record else 'differ'} (OT excluded)")
    assert ok, (differing, _comparable(smoke.record), _comparable(again.record))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bubbleattack import attacks
from bubbleattack.attacks import (EPSILON_GRID, PROBE_CONFIG, AttackConfig, EmptyPoolError, apgd,
                                  apgd_checkpoints, binary_dlr_loss, fgsm, mim, pgd, robust_accuracy,
                                  robust_markdown)
from bubbleattack.models import LinearSvmModel

from conftest import svm_fgsm_oracle

F64 = dict(precision="f64")


def _pool(model, ds, n, seed=0):
    from bubbleattack.models import predict
    ok = np.flatnonzero(predict(model, ds.pixels) == ds.labels)
    pick = np.random.default_rng(seed).permutation(ok)[:n]
    return ds.pixels[pick], ds.labels[pick].astype(np.int64)


def test_binary_dlr_examples():
    assert binary_dlr_loss([3.0, 1.0], 0) == -2.0
    assert binary_dlr_loss([0.7, 0.7], 1) == 0.0


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_binary_dlr_antisymmetric(a, b):
    assert binary_dlr_loss([a, b], 0) == -binary_dlr_loss([a, b], 1)


def test_probe_config_and_default_step():
    assert (PROBE_CONFIG.epsilon, PROBE_CONFIG.alpha, PROBE_CONFIG.steps) == (0.031, 0.00155, 20)
    assert AttackConfig(epsilon=0.1, steps=50).alpha == pytest.approx(2.5 * 0.1 / 50)
    assert EPSILON_GRID == tuple(k / 255 for k in (4, 8, 16, 32, 64, 255))
    with pytest.raises(ValueError):
        AttackConfig(epsilon=1.5)


def test_fgsm_zero_epsilon_is_identity(svm_model, split):
    x, y = _pool(svm_model, split[1], 20)
    for r, x0 in zip(fgsm(svm_model, x, y, AttackConfig(epsilon=0.0)), x):
        assert np.array_equal(r.adversarial, x0) and not r.success


def test_zero_gradient_leaves_image():
    m = LinearSvmModel()
    x = np.full((40, 50), 0.5)
    r = fgsm(m, x, 0, AttackConfig(epsilon=0.1, **F64))
    assert np.array_equal(r.adversarial, x)
    assert r.trace[0].grad_max == 0.0


def test_fgsm_matches_linear_oracle(svm_model, split):
    x, y = _pool(svm_model, split[1], 200)
    for eps in (2 / 255, 8 / 255, 32 / 255):
        got = np.array([r.success for r in fgsm(svm_model, x, y, AttackConfig(epsilon=eps, **F64))])
        assert np.array_equal(got, svm_fgsm_oracle(svm_model, x, y, eps))


def test_pgd_one_step_is_fgsm(cnn_model, split):
    x, y = _pool(cnn_model, split[1], 10)
    eps = 8 / 255
    a = pgd(cnn_model, x, y, AttackConfig(epsilon=eps, steps=1, step_size=eps))
    b = fgsm(cnn_model, x, y, AttackConfig(epsilon=eps))
    assert all(np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, b))


def test_mim_without_momentum_is_pgd(cnn_model, split):
    x, y = _pool(cnn_model, split[1], 6)
    c = AttackConfig(epsilon=16 / 255, steps=5, step_size=4 / 255)
    a = pgd(cnn_model, x, y, c)
    b = mim(cnn_model, x, y, c.with_(momentum_decay=0.0))
    assert all(np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, b))


@pytest.mark.parametrize("fn", [pgd, mim, apgd])
def test_every_iterate_stays_in_the_ball(fn, cnn_model, split, monkeypatch):
    x, y = _pool(cnn_model, split[1], 8, seed=1)
    eps = 8 / 255
    seen = []
    orig = attacks._Objective.__call__

    def spy(self, xi):
        seen.append(xi.copy())
        return orig(self, xi)
    monkeypatch.setattr(attacks._Objective, "__call__", spy)
    fn(cnn_model, x, y, AttackConfig(epsilon=eps, steps=6, random_start=True, seed=3))
    assert len(seen) == 6
    for xi in seen:
        assert np.max(np.abs(xi - x)) <= eps + 1e-12
        assert xi.min() >= 0.0 and xi.max() <= 1.0


def test_all_zero_gradients_keep_input(saturated_cnn, probe_set):
    marks = probe_set.pixels[probe_set.labels == 0][:5]
    r = mim(saturated_cnn, marks, np.zeros(5, np.int64),
            AttackConfig(epsilon=0.1, steps=5, precision="f32", flush_to_zero=True))
    for res, x0 in zip(r, marks):
        if all(st.grad_max == 0.0 for st in res.trace):
            assert np.array_equal(res.adversarial, x0)


def test_apgd_best_point(cnn_model, split):
    x, y = _pool(cnn_model, split[1], 10)
    for loss in ("ce", "dlr"):
        for r in apgd(cnn_model, x, y, AttackConfig(epsilon=16 / 255, steps=12, loss=loss)):
            assert r.best_loss >= max(s.loss for s in r.trace)


def test_apgd_checkpoints():
    c = apgd_checkpoints(100)
    assert c[:3] == [0, 22, 41] and c == sorted(c) and c[-1] <= 100


def test_dlr_success_sets_nest(svm_model, split):
    x, y = _pool(svm_model, split[1], 100, seed=2)
    prev = None
    for eps in (4 / 255, 8 / 255, 16 / 255, 32 / 255, 64 / 255):
        ok = np.array([r.success for r in apgd(svm_model, x, y, AttackConfig(epsilon=eps, steps=20, loss="dlr"))])
        if prev is not None:
            assert np.all(ok[prev])
        prev = ok


def test_robust_accuracy_rows(svm_model, split):
    x, y = _pool(svm_model, split[1], 20)
    rows = robust_accuracy(svm_model, x, y, AttackConfig(steps=5, loss="dlr"), (0.0, 1.0), "apgd", "syn")
    alls = [r for r in rows if r.direction == "all"]
    assert [r.robust_acc for r in alls] == [1.0, 0.0]
    assert {r.direction for r in rows} == {"all", "over", "under"}
    md = robust_markdown(rows)
    assert "| model | dataset | attack | loss | 0/255 | 255/255 |" in md


def test_robust_accuracy_header_matches_grid(svm_model, split):
    x, y = _pool(svm_model, split[1], 4)
    rows = robust_accuracy(svm_model, x, y, AttackConfig(steps=2), EPSILON_GRID, "fgsm")
    head = robust_markdown(rows).splitlines()[0]
    assert head.endswith("| 4/255 | 8/255 | 16/255 | 32/255 | 64/255 | 255/255 |")


def test_robust_accuracy_empty_pool():
    with pytest.raises(EmptyPoolError):
        robust_accuracy(LinearSvmModel(), np.zeros((2, 40, 50)), [1, 1], AttackConfig(steps=2))


def test_direction_guard():
    with pytest.raises(ValueError, match="direction"):
        fgsm(LinearSvmModel(), np.zeros((40, 50)), 0, AttackConfig(direction="over"))


def test_mim_flat_on_masked_samples(saturated_cnn, probe_set):
    cfg = AttackConfig(steps=10, precision="f32")
    x, y = probe_set.pixels, probe_set.labels.astype(np.int64)
    probe = mim(saturated_cnn, x, y, cfg.with_(epsilon=1.0))
    stuck = np.array([all(st.grad_max == 0.0 for st in r.trace) for r in probe])
    assert stuck.sum() >= 50
    masked = probe_set.subset(np.flatnonzero(stuck))
    rows = robust_accuracy(saturated_cnn, masked, None, cfg, EPSILON_GRID, "mim")
    assert [r.robust_acc for r in rows if r.direction == "all"] == [1.0] * len(EPSILON_GRID)
    whole = robust_accuracy(saturated_cnn, probe_set, None, cfg, EPSILON_GRID[-2:], "mim")
    top = [r.robust_acc for r in whole if r.direction == "all"]
    assert top[0] == top[1] > 0

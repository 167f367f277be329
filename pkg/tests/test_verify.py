import json
import math

import numpy as np
import pytest
import torch

from apga.build_apga import build_apga
from apga.errors import NumericError, UsageError
from apga.objective import bce, class_loss, policy_loss
from apga.verify import (
    MAX_ENUM_PIXELS,
    TinyInstance,
    action_probabilities,
    enumerate_actions,
    estimator_variance,
    exact_expected_reward,
    exact_policy_gradient,
    fd_check,
    module_fd_check,
    reinforce_estimate,
    run_verification,
)


def _erase_reward(p):
    # R(erase) = 1, R(keep) = 0
    return TinyInstance(np.asarray(p), np.zeros(len(p)), lambda z: z.sum(axis=-1), reward_fn=lambda a: a[..., 0])


def test_enumeration_covers_every_action():
    A = enumerate_actions(3)
    assert A.shape == (8, 3)
    assert len({tuple(r) for r in A.tolist()}) == 8
    assert A.dtype == np.uint8


def test_enumeration_guard():
    enumerate_actions(MAX_ENUM_PIXELS)
    with pytest.raises(ValueError):
        enumerate_actions(MAX_ENUM_PIXELS + 1)
    with pytest.raises(ValueError):
        exact_expected_reward(TinyInstance.random(13, np.random.default_rng(0)))


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(1)
    for n in (1, 4, 9):
        p = rng.uniform(0, 1, size=n)
        assert action_probabilities(p, enumerate_actions(n)).sum() == pytest.approx(1.0, abs=1e-12)


def test_zero_probabilities_mean_no_erasure():
    inst = TinyInstance.random(5, np.random.default_rng(2)).with_p(np.zeros(5))
    assert exact_expected_reward(inst) == 0.0


def test_single_pixel_two_outcomes():
    inst = _erase_reward([0.5])
    assert exact_expected_reward(inst) == pytest.approx(0.5)
    assert exact_policy_gradient(inst) == pytest.approx([1.0])


def test_constant_reward_has_zero_gradient():
    inst = TinyInstance.constant_reward(np.array([0.2, 0.7, 0.4, 0.9]), 3.0)
    assert exact_expected_reward(inst) == pytest.approx(3.0)
    np.testing.assert_allclose(exact_policy_gradient(inst), 0.0, atol=1e-12)


def test_expected_reward_matches_monte_carlo():
    rng = np.random.default_rng(3)
    inst = TinyInstance.random(3, rng)
    actions = (rng.random((1_000_000, 3)) < inst.p).astype(np.float64)
    R = inst.rewards(actions)
    se = R.std(ddof=1) / math.sqrt(len(R))
    assert abs(R.mean() - exact_expected_reward(inst)) < 3 * se


def test_exact_gradient_matches_central_differences():
    inst = TinyInstance.random(6, np.random.default_rng(4))
    g = exact_policy_gradient(inst)
    h = 1e-6
    for k in range(inst.n):
        up, down = inst.p.copy(), inst.p.copy()
        up[k] += h
        down[k] -= h
        num = (exact_expected_reward(inst.with_p(up)) - exact_expected_reward(inst.with_p(down))) / (2 * h)
        assert abs(num - g[k]) < 1e-8


def test_relabeling_pixels_keeps_expected_reward():
    rng = np.random.default_rng(5)
    inst = TinyInstance.random(7, rng)
    perm = rng.permutation(7)
    moved = inst.permuted(perm)
    assert exact_expected_reward(moved) == pytest.approx(exact_expected_reward(inst), abs=1e-12)
    np.testing.assert_allclose(exact_policy_gradient(moved), exact_policy_gradient(inst)[perm], atol=1e-12)


def test_instance_validation():
    with pytest.raises(ValueError):
        TinyInstance(np.array([0.5, 0.5]), np.array([1.0]), lambda z: z.sum(axis=-1))
    with pytest.raises(ValueError):
        TinyInstance(np.array([1.5]), np.array([1.0]), lambda z: z.sum(axis=-1))


def test_reinforce_estimate_is_close_to_exact():
    rng = np.random.default_rng(6)
    inst = TinyInstance.random(6, rng)
    exact = exact_policy_gradient(inst)
    est = reinforce_estimate(inst, 100_000, rng)
    assert np.linalg.norm(est - exact) / np.linalg.norm(exact) < 0.05


def test_reinforce_with_baseline_stays_unbiased():
    rng = np.random.default_rng(7)
    inst = TinyInstance.random(6, rng)
    exact = exact_policy_gradient(inst)
    est = reinforce_estimate(inst, 100_000, rng, use_baseline=True)
    assert np.linalg.norm(est - exact) / np.linalg.norm(exact) < 0.05


def test_constant_reward_estimate_shrinks():
    inst = TinyInstance.constant_reward(np.full(4, 0.3), 2.0)
    small = np.abs(reinforce_estimate(inst, 100, np.random.default_rng(8))).max()
    large = np.abs(reinforce_estimate(inst, 200_000, np.random.default_rng(8))).max()
    assert large < small
    assert large < 0.05


def test_variance_is_reported_for_both_modes():
    inst = TinyInstance.random(6, np.random.default_rng(9))
    plain = estimator_variance(inst, 5000, np.random.default_rng(10))
    with_b = estimator_variance(inst, 5000, np.random.default_rng(10), use_baseline=True)
    assert math.isfinite(plain) and math.isfinite(with_b)
    assert plain > 0 and with_b > 0


def test_reinforce_needs_samples_and_interior_probabilities():
    inst = TinyInstance.random(3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        reinforce_estimate(inst, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        reinforce_estimate(inst.with_p(np.array([0.0, 0.5, 0.5])), 10, np.random.default_rng(0))


def test_fd_linear_function():
    w = torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)
    rep = fd_check(lambda t: (w * t["x"]).sum(), {"x": torch.tensor([1.0, 2.0, 3.0])})
    assert rep.max_rel_error < 1e-8
    assert rep.checked == 3


def test_fd_policy_loss_pipeline():
    g = torch.Generator().manual_seed(0)
    P = 0.05 + 0.9 * torch.rand(1, 1, 5, 5, generator=g, dtype=torch.float64)
    A_adv = (P < 0.5).to(torch.float64)
    rep = fd_check(lambda t: policy_loss(t["P"], A_adv, 0.9, 0.3, 0.1).total, {"P": P})
    assert rep.max_rel_error < 1e-6


def test_fd_detects_corrupted_gradient():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(3, 4, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 3, 1])
    fn = lambda t: class_loss(t["logits"], labels)  # noqa: E731
    x = logits.clone().requires_grad_(True)
    (true_grad,) = torch.autograd.grad(fn({"logits": x}), x)
    rep = fd_check(fn, {"logits": logits}, analytic={"logits": true_grad * 1.01})
    assert rep.max_rel_error > 0.009
    assert rep.worst_name == "logits"


def test_fd_refuses_fp32_and_bad_steps():
    inputs = {"x": torch.ones(2)}
    with pytest.raises(UsageError):
        fd_check(lambda t: t["x"].sum(), inputs, precision="fp32")
    with pytest.raises(ValueError):
        fd_check(lambda t: t["x"].sum(), inputs, h=1e-2)
    with pytest.raises(ValueError):
        fd_check(lambda t: t["x"].sum(), inputs, h=1e-9)


def test_fd_non_finite_value():
    with pytest.raises(NumericError):
        fd_check(lambda t: torch.log(t["x"]).sum(), {"x": torch.tensor([-1.0, 1.0])})


def test_fd_subset_is_seeded():
    x = torch.rand(50, dtype=torch.float64)
    a = fd_check(lambda t: (t["x"] ** 3).sum(), {"x": x}, max_entries=7, seed=3)
    b = fd_check(lambda t: (t["x"] ** 3).sum(), {"x": x}, max_entries=7, seed=3)
    assert a.checked == 7
    assert a == b


def test_network_gradients_match_finite_differences():
    clf, pol = build_apga(seed=3, precision="fp64")
    g = torch.Generator().manual_seed(2)
    x = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    target = (torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64) > 0.5).to(torch.float64)
    rep_c = module_fd_check(clf, lambda out: class_loss(out, torch.tensor([0, 1])), x, max_entries=20)
    rep_p = module_fd_check(pol, lambda out: bce(out, target), x, max_entries=20)
    assert rep_c.max_rel_error < 1e-5
    assert rep_p.max_rel_error < 1e-5


def test_quick_verification_passes(tmp_path):
    report = run_verification(["enumeration", "gradients", "reward"], seed=0, quick=True)
    assert report.passed, report.to_text()
    path = report.write(tmp_path)
    data = json.loads(path.read_text())
    assert data["passed"] is True
    assert {r["group"] for r in data["results"]} == {"enumeration", "gradients", "reward"}
    assert "checks passed" in (tmp_path / "verify.txt").read_text()


def test_unknown_group():
    with pytest.raises(ValueError, match="unknown verification groups"):
        run_verification(["bogus"])

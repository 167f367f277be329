import math

import pytest
import torch

from apga.errors import ConfigError, InputShapeError, NumericError
from apga.masking import adversarial_mask
from apga.objective import (
    RewardBaseline,
    adversarial_reward,
    bce,
    class_loss,
    policy_loss,
    update_baseline,
)


def test_bce_values():
    assert float(bce(torch.tensor([0.5]), torch.tensor([1.0]))) == pytest.approx(math.log(2))
    assert float(bce(torch.tensor([0.9, 0.1]), torch.tensor([1.0, 0.0]))) == pytest.approx(0.10536, abs=1e-5)


def test_bce_is_finite_at_the_edges():
    value = bce(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))
    assert math.isfinite(float(value))
    assert float(value) == pytest.approx(-math.log(1e-7), rel=2e-2)


def test_bce_symmetry_and_monotonicity():
    p = torch.tensor([0.2, 0.65], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert float(bce(p, y)) == pytest.approx(float(bce(1 - p, 1 - y)))
    losses = [float(bce(torch.tensor([q]), torch.tensor([1.0]))) for q in (0.1, 0.4, 0.7, 0.95)]
    assert losses == sorted(losses, reverse=True)


def test_bce_shape_mismatch():
    with pytest.raises(InputShapeError):
        bce(torch.rand(3), torch.rand(4))


def test_class_loss_values():
    assert float(class_loss(torch.tensor([[2.0, 0.0]]), torch.tensor([0]))) == pytest.approx(0.12693, abs=1e-5)
    uniform = class_loss(torch.zeros(4, 3), torch.tensor([0, 1, 2, 0]))
    assert float(uniform) == pytest.approx(math.log(3))


def test_class_loss_rejects_bad_labels_and_shapes():
    with pytest.raises(ValueError):
        class_loss(torch.zeros(2, 2), torch.tensor([0, 2]))
    with pytest.raises(InputShapeError):
        class_loss(torch.zeros(2, 2), torch.tensor([0]))
    with pytest.raises(InputShapeError):
        class_loss(torch.zeros(2, 1), torch.tensor([0, 0]))


def test_adversarial_reward():
    assert adversarial_reward(1.2, 0.9) == pytest.approx(0.3)
    assert adversarial_reward(torch.tensor(0.4), torch.tensor(0.4)) == 0.0
    assert isinstance(adversarial_reward(torch.tensor(1.0), 0.5), float)


def test_baseline_first_update_takes_reward():
    b = update_baseline(RewardBaseline(decay=0.5), 0.8)
    assert b.initialized and b.value == pytest.approx(0.8)


def test_baseline_moving_average():
    b = RewardBaseline(decay=0.5, value=0.4, initialized=True)
    assert update_baseline(b, 0.8).value == pytest.approx(0.6)
    assert b.value == 0.4  # frozen; update returns a new state


def test_baseline_replays_sequence():
    rewards = [1.0, 0.0, 0.5, -0.25]
    state = RewardBaseline(decay=0.5)
    expected = None
    for r in rewards:
        state = update_baseline(state, r)
        expected = r if expected is None else 0.5 * expected + 0.5 * r
        assert state.value == pytest.approx(expected)


def test_baseline_validation():
    with pytest.raises(ConfigError):
        RewardBaseline(decay=1.0)
    with pytest.raises(NumericError):
        update_baseline(RewardBaseline(), float("nan"))


def test_policy_loss_reference_value():
    P = torch.full((1, 1, 4, 4), 0.6, requires_grad=True)
    terms = policy_loss(P, adversarial_mask(P), R_t=1.5, b_t=0.5, lambda_zeros=0.1)
    assert float(terms.total) == pytest.approx(1.1 * -math.log(0.4), abs=1e-5)
    assert float(terms.total) == pytest.approx(1.0079, abs=1e-4)
    assert torch.equal(terms.total, terms.recompute_total())


def test_policy_loss_near_zero_probabilities():
    P = torch.full((1, 1, 3, 3), 1e-6, requires_grad=True)
    terms = policy_loss(P, adversarial_mask(P), R_t=1.0, b_t=0.0, lambda_zeros=0.1)
    assert float(terms.L_prob) > 10
    assert float(terms.L_extreme) < 1e-5


def test_policy_loss_zero_advantage_leaves_only_regularizer():
    P = torch.full((1, 1, 2, 2), 0.7, requires_grad=True)
    terms = policy_loss(P, adversarial_mask(P), R_t=0.3, b_t=0.3, lambda_zeros=0.1)
    assert float(terms.total) == pytest.approx(0.1 * -math.log(0.3), rel=1e-5)


def test_extreme_term_pushes_probabilities_down():
    P = torch.full((1, 1, 2, 2), 0.7, requires_grad=True)
    terms = policy_loss(P, adversarial_mask(P), R_t=0.0, b_t=0.0, lambda_zeros=1.0)
    (grad,) = torch.autograd.grad(terms.total, P)
    assert (grad > 0).all()


def test_policy_loss_mask_is_not_differentiated():
    P = torch.full((1, 1, 2, 2), 0.3, requires_grad=True)
    target = (P < 0.5).float()
    terms = policy_loss(P, target, R_t=1.0, b_t=0.0, lambda_zeros=0.0)
    (grad,) = torch.autograd.grad(terms.total, P)
    # d/dp of -log(p) / n
    assert torch.allclose(grad, torch.full_like(P, -1.0 / (0.3 * 4)))


def test_policy_loss_validation():
    P = torch.full((1, 1, 2, 2), 0.7, requires_grad=True)
    with pytest.raises(ConfigError):
        policy_loss(P, adversarial_mask(P), 0.0, 0.0, lambda_zeros=-0.1)
    with pytest.raises(NumericError):
        policy_loss(P, adversarial_mask(P), float("inf"), 0.0, lambda_zeros=0.1)

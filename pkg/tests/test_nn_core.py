import pytest
import torch

from apga.build_apga import build_apga, build_classifier
from apga.errors import InputShapeError, NumericError, UsageError
from apga.modeling import (
    AdamState,
    MaskPolicy,
    ReferenceClassifier,
    adam_step,
    backward,
    forward_classifier,
    forward_policy,
    named_params,
)


def test_classifier_output_shape():
    clf = ReferenceClassifier(num_classes=2, seed=0)
    logits = forward_classifier(clf, torch.rand(25, 1, 32, 32))
    assert logits.shape == (25, 2)
    assert torch.isfinite(logits).all()


def test_zero_weight_classifier_returns_output_bias():
    clf = ReferenceClassifier(num_classes=3, seed=0)
    with torch.no_grad():
        for name, p in clf.named_parameters():
            if name != "fc.bias":
                p.zero_()
        clf.fc.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
    logits = clf(torch.rand(5, 1, 12, 12))
    assert torch.equal(logits, clf.fc.bias.detach().expand(5, 3))


def test_same_seed_gives_bit_identical_outputs():
    x = torch.rand(3, 1, 16, 16, generator=torch.Generator().manual_seed(1))
    a, b = ReferenceClassifier(seed=5), ReferenceClassifier(seed=5)
    assert torch.equal(a(x), b(x))
    pa, pb = MaskPolicy(seed=5), MaskPolicy(seed=5)
    assert torch.equal(pa(x), pb(x))


def test_classifier_layers_descriptor():
    assert ReferenceClassifier(num_classes=2).layers == [
        "conv3x3(16)+relu+maxpool",
        "conv3x3(16)+relu+maxpool",
        "conv3x3(32)+relu",
        "global_avg_pool",
        "dense(2)",
    ]


@pytest.mark.parametrize("shape", [(1, 16, 16), (2, 3, 16, 16), (2, 1, 2, 2)])
def test_classifier_rejects_bad_shapes(shape):
    with pytest.raises(InputShapeError):
        ReferenceClassifier()(torch.rand(*shape))


def test_policy_probabilities_in_open_interval():
    pol = MaskPolicy(seed=2)
    P = forward_policy(pol, torch.rand(1, 1, 8, 8))
    assert P.shape == (1, 1, 8, 8)
    assert P.min() > 0 and P.max() < 1


def test_policy_odd_sizes_and_shape_errors():
    pol = MaskPolicy(seed=2)
    assert pol(torch.rand(2, 1, 9, 7)).shape == (2, 1, 9, 7)
    with pytest.raises(InputShapeError):
        pol(torch.rand(2, 2, 8, 8))


def test_policy_large_output_bias_saturates_high():
    pol = MaskPolicy(seed=2)
    with torch.no_grad():
        pol.out.weight.zero_()
        pol.out.bias.fill_(20.0)
    P = pol(torch.rand(2, 1, 8, 8))
    assert (P > 0.99).all()
    assert (P < 1).all()


def test_backward_sum_of_parameters_gives_ones(models):
    clf, _ = models
    params = named_params(clf)
    loss = sum(p.sum() for p in params.values())
    grads = backward(loss, params)
    for name, g in grads.items():
        assert g.shape == params[name].shape
        assert torch.equal(g, torch.ones_like(g))


def test_backward_unused_parameter_gets_zero(models):
    clf, _ = models
    params = named_params(clf)
    grads = backward(params["fc.bias"].sum() * 2.0, params)
    assert torch.equal(grads["fc.bias"], torch.full_like(params["fc.bias"], 2.0))
    assert torch.count_nonzero(grads["block1.0.0.weight"]) == 0


def test_backward_without_graph_is_usage_error(models):
    clf, _ = models
    with pytest.raises(UsageError):
        backward(torch.tensor(1.0), named_params(clf))
    params = named_params(clf)
    with pytest.raises(UsageError):
        backward(params["fc.bias"] * 1.0, params)


def test_adam_first_step_moves_by_learning_rate():
    w = torch.nn.Parameter(torch.tensor([0.3]))
    state = AdamState.create({"w": w}, lr=1e-4)
    adam_step({"w": w}, {"w": torch.tensor([1.0])}, state)
    assert state.step == 1
    assert float(w) == pytest.approx(0.3 - 1e-4, abs=1e-9)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    w = torch.nn.Parameter(torch.tensor([0.3]))
    state = AdamState.create({"w": w}, lr=1e-4)
    adam_step({"w": w}, {"w": torch.zeros(1)}, state)
    assert float(w) == pytest.approx(0.3, abs=0.0)
    adam_step({"w": w}, {"w": torch.ones(1)}, state)
    m_before, _ = state.moments("w")
    m_before = m_before.clone()
    adam_step({"w": w}, {"w": torch.zeros(1)}, state)
    m_after, _ = state.moments("w")
    assert float(m_after) == pytest.approx(0.9 * float(m_before))
    assert state.step == 3


def test_adam_moments_accumulate_across_identical_calls():
    w = torch.nn.Parameter(torch.tensor([0.0, 1.0]))
    state = AdamState.create({"w": w}, lr=1e-3)
    g = {"w": torch.tensor([1.0, -2.0])}
    adam_step({"w": w}, g, state)
    m1 = state.moments("w")[0].clone()
    adam_step({"w": w}, g, state)
    m2 = state.moments("w")[0]
    assert torch.allclose(m1, torch.tensor([0.1, -0.2]))
    assert torch.allclose(m2, torch.tensor([0.19, -0.38]))
    assert state.step == 2


def test_adam_nan_gradient_names_parameter():
    w = torch.nn.Parameter(torch.zeros(2))
    state = AdamState.create({"w": w}, lr=1e-3)
    with pytest.raises(NumericError) as err:
        adam_step({"w": w}, {"w": torch.tensor([0.0, float("nan")])}, state)
    assert err.value.name == "w"
    assert state.step == 0


def test_adam_shape_mismatch():
    w = torch.nn.Parameter(torch.zeros(2))
    state = AdamState.create({"w": w}, lr=1e-3)
    with pytest.raises(ValueError):
        adam_step({"w": w}, {"w": torch.zeros(3)}, state)


def test_build_apga_overrides_and_precision():
    clf, pol = build_apga(num_classes=3, seed=4, precision="fp64")
    assert clf.fc.out_features == 3
    assert next(clf.parameters()).dtype == torch.float64
    assert next(pol.parameters()).dtype == torch.float64
    # different seeds, different weights
    clf2, _ = build_apga(num_classes=3, seed=5, precision="fp64")
    assert not torch.equal(clf.fc.weight, clf2.fc.weight)


def test_build_wide_model_config():
    clf, pol = build_apga("configs/models/wide.yaml", seed=0)
    assert clf.fc.in_features == 64
    assert pol.enc1[0][0].out_channels == 32


def test_build_classifier_is_eval_mode():
    assert not build_classifier(seed=1).training

"""Analytic gradients of the full model loss against central finite differences."""

import numpy as np
import pytest
import torch

from acmil.decoder import BRANCHES, risk_loss

from conftest import make_batch, numerical_grad, relative_error


@pytest.fixture
def setup(tiny_model_double, toy_rooms, pre):
    model = tiny_model_double.train()
    batch = make_batch(toy_rooms, pre).to(dtype=torch.float64)

    def loss_fn():
        return risk_loss(model(batch).logits, batch.labels)

    model.zero_grad()
    loss_fn().backward()
    return model, loss_fn


def test_relation_weights(setup):
    model, loss_fn = setup
    gamma = model.reasoner.gamma
    for z in range(gamma.numel()):
        numeric = numerical_grad(loss_fn, gamma, (z,), 1e-3)
        assert relative_error(gamma.grad[z].item(), numeric, floor=1e-6) < 1e-3


def test_streamer_bias(setup):
    model, loss_fn = setup
    bias = model.user_view.streamer_bias
    numeric = numerical_grad(loss_fn, bias, (), 1e-4)
    assert relative_error(bias.grad.item(), numeric, floor=1e-6) < 1e-3


def test_gate_output_biases(setup):
    model, loss_fn = setup
    for name in BRANCHES:
        bias = model.decoder.gates[name].fc2.bias
        numeric = numerical_grad(loss_fn, bias, (0,), 1e-4)
        assert relative_error(bias.grad[0].item(), numeric, floor=1e-6) < 1e-3, name


def test_random_deep_parameters(setup):
    model, loss_fn = setup
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(0)
    for _ in range(10):
        name, p = named[int(rng.integers(len(named)))]
        index = tuple(int(rng.integers(s)) for s in p.shape)
        numeric = numerical_grad(loss_fn, p, index, 1e-6)
        assert relative_error(p.grad[index].item(), numeric, floor=1e-6) < 1e-2, name

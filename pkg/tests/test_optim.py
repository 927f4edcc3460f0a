import math

import numpy as np
import pytest
import torch

from glassbox.model import init_parameters
from glassbox.trainer import (
    NonFiniteError,
    OptimizerState,
    TrainPlan,
    adamw_step,
    clip_gradients,
)


def plan(**kw):
    defaults = dict(total_steps=100, warmup_steps=10)
    defaults.update(kw)
    return TrainPlan(**defaults)


# ---------------------------------------------------------------------------
# gradient clipping
# ---------------------------------------------------------------------------


def test_clip_below_threshold_unchanged():
    g = {"a": torch.tensor([0.3, 0.4])}  # norm 0.5
    before = g["a"].clone()
    norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5, abs=1e-9)
    assert torch.equal(g["a"], before)


def test_clip_above_threshold_scales_to_cap():
    g = {"a": torch.tensor([2.0, 0.0]), "b": torch.tensor([0.0, 0.0])}
    norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(2.0, abs=1e-12)
    assert torch.allclose(g["a"], torch.tensor([1.0, 0.0]))


def test_clip_random_post_norm_property():
    rng = np.random.default_rng(1)
    for trial in range(25):
        g = {
            f"p{i}": torch.tensor(rng.normal(scale=rng.uniform(0.1, 3), size=rng.integers(1, 20)))
            for i in range(rng.integers(1, 5))
        }
        pre = math.sqrt(sum(float(t.pow(2).sum()) for t in g.values()))
        reported = clip_gradients(g, 1.0)
        post = math.sqrt(sum(float(t.pow(2).sum()) for t in g.values()))
        assert reported == pytest.approx(pre, rel=1e-9)
        assert post <= min(pre, 1.0) + 1e-9
        assert post == pytest.approx(min(pre, 1.0), rel=1e-6)


def test_clip_nonfinite_norm_signals_policy():
    g = {"a": torch.tensor([float("nan")])}
    with pytest.raises(NonFiniteError):
        clip_gradients(g, 1.0)


# ---------------------------------------------------------------------------
# adamw
# ---------------------------------------------------------------------------


def tiny_model():
    from glassbox.model import ModelConfig

    cfg = ModelConfig(hidden_size=8, n_layers=1, n_heads=2, intermediate_size=12, max_seq_len=8)
    return init_parameters(cfg, seed=0)


def zero_grads(model):
    return {n: torch.zeros_like(p) for n, p in model.named_parameters()}


def test_zero_grad_zero_decay_fixed_point():
    model = tiny_model()
    before = {n: p.clone() for n, p in model.named_parameters()}
    state = OptimizerState.zeros_like(model)
    adamw_step(model, zero_grads(model), state, lr=1e-3, plan=plan(weight_decay=0.0))
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n])
    assert state.t == 1


def test_decoupled_decay_shrinks_params():
    model = tiny_model()
    before = {n: p.clone() for n, p in model.named_parameters()}
    state = OptimizerState.zeros_like(model)
    lr, wd = 1e-2, 0.1
    adamw_step(model, zero_grads(model), state, lr=lr, plan=plan(weight_decay=wd))
    for n, p in model.named_parameters():
        assert torch.allclose(p, before[n] * (1 - lr * wd), atol=1e-9)


def test_first_step_is_signed_unit_update():
    # with constant g and eps -> 0: bias-corrected m/sqrt(v) = sign(g)
    model = tiny_model()
    before = {n: p.clone() for n, p in model.named_parameters()}
    grads = {n: torch.full_like(p, 0.37) for n, p in model.named_parameters()}
    state = OptimizerState.zeros_like(model)
    lr = 1e-3
    adamw_step(model, grads, state, lr=lr, plan=plan(weight_decay=0.0, eps=1e-12))
    for n, p in model.named_parameters():
        delta = p - before[n]
        # fp32 params at unit magnitude round the update at ~1e-8
        assert torch.allclose(delta, torch.full_like(delta, -lr), rtol=1e-5, atol=1e-7)


def test_moments_follow_recurrence():
    model = tiny_model()
    state = OptimizerState.zeros_like(model)
    p = plan(weight_decay=0.0)
    g1 = {n: torch.randn_like(t) for n, t in model.named_parameters()}
    g2 = {n: torch.randn_like(t) for n, t in model.named_parameters()}
    adamw_step(model, g1, state, lr=1e-3, plan=p)
    adamw_step(model, g2, state, lr=1e-3, plan=p)
    name = "embed.weight"
    expected_m = (1 - p.beta1) * (p.beta1 * g1[name] + g2[name])
    expected_v = (1 - p.beta2) * (p.beta2 * g1[name] ** 2 + g2[name] ** 2)
    assert torch.allclose(state.m[name], expected_m, atol=1e-6)
    assert torch.allclose(state.v[name], expected_v, atol=1e-6)
    assert state.t == 2


def test_nonfinite_grad_rejected():
    model = tiny_model()
    grads = zero_grads(model)
    grads["embed.weight"][0, 0] = float("inf")
    with pytest.raises(NonFiniteError):
        adamw_step(model, grads, OptimizerState.zeros_like(model), lr=1e-3, plan=plan())

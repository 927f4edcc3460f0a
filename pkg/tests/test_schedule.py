import math

import pytest

from glassbox.trainer import TrainPlan, TrainerError, lr_at


def paper_plan(total=10_000, warmup=2000):
    return TrainPlan(total_steps=total, peak_lr=3e-4, final_lr=3e-5, warmup_steps=warmup)


def test_peak_at_warmup_end():
    plan = paper_plan()
    assert lr_at(plan.warmup_steps, plan) == pytest.approx(3e-4, rel=1e-12)


def test_final_at_total():
    plan = paper_plan()
    assert lr_at(plan.total_steps, plan) == pytest.approx(3e-5, rel=1e-12)


def test_mid_decay_closed_form():
    # cos(pi/2) = 0 -> final + (peak - final)/2
    plan = paper_plan()
    mid = plan.warmup_steps + (plan.total_steps - plan.warmup_steps) // 2
    assert lr_at(mid, plan) == pytest.approx(1.65e-4, rel=1e-12)


def test_warmup_is_linear_from_zero():
    plan = paper_plan()
    assert lr_at(0, plan) == 0.0
    assert lr_at(500, plan) == pytest.approx(3e-4 * 500 / 2000, rel=1e-12)
    assert lr_at(1000, plan) == pytest.approx(1.5e-4, rel=1e-12)


def test_continuous_at_warmup_boundary():
    plan = paper_plan()
    before = lr_at(plan.warmup_steps - 1, plan)
    at = lr_at(plan.warmup_steps, plan)
    after = lr_at(plan.warmup_steps + 1, plan)
    assert abs(at - before) < 2 * (3e-4 / 2000)
    assert abs(after - at) < 2 * (3e-4 / 2000)
    assert after <= at


def test_nonincreasing_after_peak():
    plan = paper_plan(total=3000, warmup=300)
    values = [lr_at(s, plan) for s in range(300, 3001)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert max(values) == values[0]


def test_clamped_beyond_total():
    plan = paper_plan()
    assert lr_at(plan.total_steps + 500, plan) == pytest.approx(3e-5, rel=1e-12)


def test_zero_warmup_supported():
    plan = TrainPlan(total_steps=100, peak_lr=1e-3, final_lr=1e-4, warmup_steps=0)
    assert lr_at(0, plan) == pytest.approx(1e-3)
    assert lr_at(100, plan) == pytest.approx(1e-4, rel=1e-12)


def test_plan_invariants():
    with pytest.raises(TrainerError):
        TrainPlan(total_steps=100, warmup_steps=100).validate()
    with pytest.raises(TrainerError):
        TrainPlan(total_steps=100, warmup_steps=10, peak_lr=1e-4, final_lr=2e-4).validate()
    with pytest.raises(TrainerError):
        TrainPlan(total_steps=100, warmup_steps=10, clip_norm=0.0).validate()


def test_plan_round_trips_through_dict():
    plan = TrainPlan(total_steps=123, warmup_steps=7, heldout_chunks=[5], inject_nan_chunks=[2])
    clone = TrainPlan.from_dict(plan.to_dict())
    assert clone == plan

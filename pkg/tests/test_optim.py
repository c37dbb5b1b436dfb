"""AdamW and schedule contracts."""

import math

import numpy as np
import pytest

import oracles
from divemoe import tensor as T
from divemoe.errors import ParameterError, StateError
from divemoe.optim import AdamW, constant_lr, cosine_warmup_lr


def test_decay_only_step():
    w = T.Tensor([1.0], requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.01)
    opt.step()
    assert abs(w.data[0] - 0.999) < 1e-7


def test_descent_direction():
    w = T.Tensor([0.5], requires_grad=True)
    opt = AdamW({"w": w}, lr=0.01, weight_decay=0.0)
    w.grad[:] = 2.0
    opt.step()
    assert w.data[0] < 0.5

    w2 = T.Tensor([0.5], requires_grad=True)
    opt2 = AdamW({"w": w2}, lr=0.01, weight_decay=0.0)
    w2.grad[:] = -2.0
    opt2.step()
    assert w2.data[0] > 0.5


def test_two_steps_match_reference_trace():
    g = 0.37
    w = T.Tensor([1.25], requires_grad=True)
    opt = AdamW({"w": w}, lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    seen = []
    for _ in range(2):
        w.grad[:] = g
        opt.step()
        seen.append(float(w.data[0]))
    ref = oracles.ref_adamw_trace(1.25, [g, g], lr=1e-2)
    assert all(abs(a - b) < 1e-6 for a, b in zip(seen, ref))


def test_grads_zeroed_after_step():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1)
    w.grad[:] = 5.0
    opt.step()
    assert np.array_equal(w.grad, [0.0, 0.0])


def test_missing_grad_is_state_error():
    w = T.Tensor([1.0], requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1)
    w.grad = None
    with pytest.raises(StateError):
        opt.step()


def test_bad_hyperparams_rejected():
    w = T.Tensor([1.0], requires_grad=True)
    with pytest.raises(ParameterError):
        AdamW({"w": w}, lr=0.0)
    with pytest.raises(ParameterError):
        AdamW({"w": w}, lr=0.1, betas=(1.0, 0.999))


def test_constant_schedule():
    sched = constant_lr(1e-4)
    assert sched(1) == sched(500) == 1e-4


def test_cosine_warmup_schedule_shape():
    total = 200
    sched = cosine_warmup_lr(1e-4, 1e-5, total, warmup_ratio=0.03)
    warm = max(1, round(total * 0.03))
    # warmup rises linearly to base
    assert sched(warm) == pytest.approx(1e-4)
    assert sched(1) < sched(warm)
    # cosine lands on the floor at the end
    assert sched(total) == pytest.approx(1e-5, rel=1e-6)
    # monotone decay after warmup
    vals = [sched(s) for s in range(warm, total + 1)]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    # halfway point of the cosine segment sits at the midpoint of the range
    mid = warm + (total - warm) / 2
    assert sched(int(mid)) == pytest.approx((1e-4 + 1e-5) / 2, rel=0.05)


def test_cosine_schedule_bad_args():
    with pytest.raises(ParameterError):
        cosine_warmup_lr(1e-4, 1e-5, 0)
    with pytest.raises(ParameterError):
        cosine_warmup_lr(1e-4, 1e-5, 10, warmup_ratio=1.0)


def test_step_counter_and_bias_correction_vs_reference():
    rng = np.random.default_rng(2)
    grads = rng.standard_normal(5)
    w = T.Tensor([0.8], requires_grad=True)
    opt = AdamW({"w": w}, lr=3e-3, weight_decay=0.02)
    seen = []
    for g in grads:
        w.grad[:] = g
        opt.step()
        seen.append(float(w.data[0]))
    ref = oracles.ref_adamw_trace(0.8, grads.tolist(), lr=3e-3, wd=0.02)
    assert opt.step_count == 5
    assert all(abs(a - b) < 1e-6 for a, b in zip(seen, ref))

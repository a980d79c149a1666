import math

import numpy as np
import pytest

from augment_reduce.schedule import StepState, alpha_schedule, global_step_size


def test_first_step_reference():
    # g = 1: s = 0.1, rho = 0.02 / (1 + sqrt(0.1))
    steps = global_step_size(StepState(), {"w": np.array([1.0])})
    assert steps["w"][0] == pytest.approx(0.015194938532959157, rel=1e-14)


def test_recursion_by_hand():
    state = StepState(rho0=0.5)
    grads = [2.0, -1.0, 3.0]
    s = 0.0
    for t, g in enumerate(grads, start=1):
        s = 0.1 * g * g + 0.9 * s
        expected = 0.5 * t ** (-0.5 + 1e-16) / (1 + math.sqrt(s))
        assert global_step_size(state, {"b": np.array(g)})["b"] == pytest.approx(expected, rel=1e-12)


def test_decay_boundary():
    state = StepState(period=3)
    assert [state.base_rate(t) for t in (1, 3, 4, 6, 7)] == pytest.approx([0.02, 0.02, 0.018, 0.018, 0.0162])


def test_arrays_tracked_separately():
    state = StepState()
    out = global_step_size(state, {"a": np.zeros(2), "b": np.full(2, 10.0)})
    assert out["a"] == pytest.approx([0.02, 0.02])
    assert np.all(out["b"] < out["a"])
    assert state.t == 1


def test_alpha_schedule():
    assert alpha_schedule(1) == pytest.approx(0.5358867312681466, rel=1e-14)
    assert alpha_schedule(1, "probit") == pytest.approx(0.005358867312681466, rel=1e-14)
    np.testing.assert_allclose(alpha_schedule(np.array([0, 9])), [1.0, 10**-0.9])

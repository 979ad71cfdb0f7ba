import math

import numpy as np
import pytest
import torch

from hcpc.numerics import GradCheckError, RngStreams, grad_check


def sum_sq(x):
    return (x**2).sum()


def test_sum_of_squares_passes_tightly():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    report = grad_check(sum_sq, [x], tol=1e-8, step=1e-5)
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_wrong_gradient_is_caught():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    report = grad_check(sum_sq, [x], tol=1e-4, analytic=lambda p: [4 * p])
    assert not report.passed
    assert report.max_rel_err == pytest.approx(0.5, abs=1e-6)


def test_stochastic_loss_is_rejected():
    x = torch.ones(3, dtype=torch.float64)
    with pytest.raises(GradCheckError, match="stochastic loss, freeze sampling first"):
        grad_check(lambda p: (p * torch.rand(3, dtype=torch.float64)).sum(), [x])


def test_nonfinite_loss_is_rejected():
    x = torch.ones(3, dtype=torch.float64)
    with pytest.raises(GradCheckError, match="loss diverged"):
        grad_check(lambda p: (p / 0.0).sum(), [x])


def test_report_names_each_parameter():
    a = torch.randn(2, 3, dtype=torch.float64)
    b = torch.randn(3, dtype=torch.float64)
    report = grad_check(lambda a, b: torch.tanh(a @ b).sum(), [a, b], names=["a", "b"])
    assert set(report.per_param) == {"a", "b"}
    assert report.passed


def test_streams_are_reproducible_and_independent():
    r1, r2 = RngStreams(7), RngStreams(7)
    x1 = torch.rand(5, generator=r1["policy"])
    x2 = torch.rand(5, generator=r2["policy"])
    assert torch.equal(x1, x2)
    assert not torch.equal(torch.rand(5, generator=r1["windows"]), torch.rand(5, generator=r1["policy"]))
    assert not torch.equal(torch.rand(5, generator=RngStreams(8)["policy"]), x1)


def test_stream_state_round_trip():
    r = RngStreams(3)
    torch.rand(10, generator=r["negatives"])
    r.np["data"].random(4)
    state = r.state_dict()
    expect_t = torch.rand(4, generator=r["negatives"])
    expect_n = r.np["data"].random(4)
    fresh = RngStreams(99)
    fresh.load_state_dict(state)
    assert torch.equal(torch.rand(4, generator=fresh["negatives"]), expect_t)
    np.testing.assert_array_equal(fresh.np["data"].random(4), expect_n)

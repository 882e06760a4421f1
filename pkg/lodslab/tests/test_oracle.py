import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

import json
import math

import numpy as np
import pytest

from lodslab import gradcore as gc
from lodslab.gradcore import Tensor
from lodslab.oracle import (
    GaussianSandbox,
    OracleReport,
    cfg_fixed_point,
    expected_grad_mc,
    finite_diff_check,
    mc_fixed_point,
    median_bandwidth,
    mmd,
    run_oracle_preset,
    sandbox_grad_fn,
    write_reports,
)
from lodslab.schedule import TimestepPolicy, make_schedule
from lodslab.utils import OracleError, keyed_rng


@pytest.fixture
def equal():
    return GaussianSandbox([1.0], 1.0, [0.0], 1.0)


@pytest.fixture
def unequal():
    return GaussianSandbox([1.0], 0.25, [0.0], 1.0)


@pytest.mark.parametrize("w", [1.0, 7.5, 100.0])
def test_equal_variance_fixed_point(equal, w):
    np.testing.assert_allclose(cfg_fixed_point(equal, w), [w])


def test_fixed_point_displacement_is_monotone_in_w(equal):
    points = [cfg_fixed_point(equal, w)[0] for w in (1.0, 2.0, 7.5, 30.0, 100.0)]
    assert all(a < b for a, b in zip(points, points[1:]))


def test_unequal_variance_fixed_point(unequal):
    t = 300
    a, s = unequal.schedule.alphas[t], unequal.schedule.sigmas[t]
    d_y, d_null = a**2 * 0.25 + s**2, a**2 + s**2
    w = 7.5
    expected = (w / d_y) / (w / d_y + (1 - w) / d_null)
    np.testing.assert_allclose(cfg_fixed_point(unequal, w, t), [expected], rtol=1e-12)
    np.testing.assert_allclose(cfg_fixed_point(unequal, 1.0, t), [1.0], rtol=1e-12)


def test_fixed_point_errors(equal, unequal):
    with pytest.raises(OracleError):
        cfg_fixed_point(equal, math.inf)
    with pytest.raises(OracleError):
        cfg_fixed_point(unequal, 7.5)
    with pytest.raises(OracleError):
        GaussianSandbox([1.0], -1.0, [0.0], 1.0)
    with pytest.raises(OracleError):
        GaussianSandbox([1.0, 2.0], 1.0, [0.0], 1.0)


def test_reference_gradient_vanishes_at_the_conditional_mean(equal):
    est = expected_grad_mc(sandbox_grad_fn(equal, "reference_sds"), equal.mu_y, 10_000, 0, equal.schedule)
    assert est.within(0.0)
    assert est.n == 10_000


def test_sds_gradient_vanishes_at_the_fixed_point(equal):
    grad_fn = sandbox_grad_fn(equal, "sds", 7.5)
    est = expected_grad_mc(grad_fn, cfg_fixed_point(equal, 7.5), 10_000, 1, equal.schedule)
    assert est.within(0.0)


def test_sds_gradient_points_back_to_the_fixed_point(equal):
    grad_fn = sandbox_grad_fn(equal, "sds", 7.5)
    above = expected_grad_mc(grad_fn, [8.5], 10_000, 2, equal.schedule)
    below = expected_grad_mc(grad_fn, [6.5], 10_000, 2, equal.schedule)
    assert above.mean[0] > 0 > below.mean[0]


def test_mc_fixed_point_matches_closed_form(equal):
    root = mc_fixed_point(sandbox_grad_fn(equal, "sds", 7.5), -5.0, 20.0, 100_000, 0, equal.schedule)
    assert abs(root - 7.5) < 0.05


def test_mc_fixed_point_unequal_variance(unequal):
    policy = TimestepPolicy(0.3, 0.3)
    t = policy.bounds(1000)[0]
    analytic = float(cfg_fixed_point(unequal, 7.5, t)[0])
    root = mc_fixed_point(sandbox_grad_fn(unequal, "sds", 7.5), analytic - 10, analytic + 10, 100_000, 0,
                          unequal.schedule, policy)
    assert abs(root - analytic) < 0.05


def test_mc_fixed_point_on_a_deterministic_field(equal):
    def cubic(x, t, eps):
        return x**3 - 2.0

    root = mc_fixed_point(cubic, 0.0, 5.0, 100, 0, equal.schedule, tol=1e-10)
    assert root == pytest.approx(2.0 ** (1 / 3), abs=1e-9)
    with pytest.raises(OracleError, match="iterations"):
        mc_fixed_point(cubic, 0.0, 5.0, 100, 0, equal.schedule, tol=1e-14, max_iter=2)


def test_mc_errors(equal):
    grad_fn = sandbox_grad_fn(equal, "sds", 7.5)
    with pytest.raises(OracleError):
        expected_grad_mc(grad_fn, [0.0], 1, 0, equal.schedule)
    with pytest.raises(OracleError):
        mc_fixed_point(grad_fn, 10.0, 20.0, 1000, 0, equal.schedule)
    with pytest.raises(OracleError):
        sandbox_grad_fn(equal, "vsd")


def test_finite_diff_on_a_quadratic():
    c = np.array([[1.0, 2.0], [0.5, -3.0]])
    theta = np.array([[0.3, -0.7], [1.1, 0.4]])
    with gc.precision("float64"):
        err = finite_diff_check(lambda t: gc.reduce_sum(gc.square(t) * Tensor(c)) + gc.reduce_sum(t), theta)
    assert err < 1e-8


def test_finite_diff_needs_64_bit():
    with pytest.raises(OracleError):
        finite_diff_check(lambda t: gc.reduce_sum(t), np.zeros(2))


def test_mmd_properties():
    rng = keyed_rng(0, 60)
    a = rng.standard_normal((300, 2))
    b = rng.standard_normal((200, 2)) + 0.5
    assert mmd(a, a, 1.0) == 0.0
    assert mmd(a, b, 1.0) == mmd(b, a, 1.0)
    assert mmd(a, b, 1.0) >= 0.0
    assert mmd(a[::-1], b, 1.0) == pytest.approx(mmd(a, b, 1.0), abs=1e-15)


def test_mmd_separates_distant_distributions():
    rng = keyed_rng(0, 61)
    a = rng.standard_normal(500)
    b = rng.standard_normal(500) + 10.0
    assert mmd(a, b, 1.0) > 0.5


def test_mmd_errors():
    with pytest.raises(OracleError):
        mmd(np.zeros((3, 2)), np.zeros((3, 2)), 0.0)
    with pytest.raises(OracleError):
        mmd(np.zeros((3, 2)), np.zeros((3, 3)), 1.0)
    with pytest.raises(OracleError):
        mmd(np.zeros((0, 2)), np.zeros((3, 2)), 1.0)


def test_median_bandwidth():
    assert median_bandwidth([0.0, 1.0], [3.0]) == 2.0
    assert median_bandwidth(np.zeros(4), np.zeros(4)) == 1.0


@pytest.mark.parametrize("preset", ["equal-variance", "unequal-variance"])
def test_presets_pass(preset):
    reports = run_oracle_preset(preset, 7.5, n=100_000, seed=0)
    assert [r.verdict for r in reports] == ["pass", "pass"]
    if preset == "equal-variance":
        assert reports[0].analytic == 7.5


def test_unknown_preset():
    with pytest.raises(OracleError):
        run_oracle_preset("banana", 7.5)


def test_write_reports(tmp_path):
    path = tmp_path / "oracle.json"
    write_reports([OracleReport("q", 1.0, 1.01, 0.02, "pass")], path)
    assert json.loads(path.read_text()) == [
        {"quantity": "q", "analytic": 1.0, "estimate": 1.01, "stderr": 0.02, "verdict": "pass"}
    ]

import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

import math

import numpy as np
import pytest
from scipy import stats

from lodslab import gradcore as gc
from lodslab.gradcore import Tensor
from lodslab.schedule import TimestepPolicy, add_noise, make_schedule, sample_timestep
from lodslab.utils import ScheduleError, ShapeError, keyed_rng


@pytest.fixture
def schedule():
    return make_schedule()


def test_cosine_alpha_at_half():
    s = make_schedule("cosine", T=3)
    assert abs(float(s.alphas[1]) - math.cos(math.pi / 4)) < 1e-12
    assert abs(float(s.sigmas[1]) - math.sin(math.pi / 4)) < 1e-12


@pytest.mark.parametrize("kind", ["linear-beta", "cosine"])
def test_variance_preserving_and_monotone(kind):
    s = make_schedule(kind)
    np.testing.assert_allclose(s.alphas**2 + s.sigmas**2, 1.0, atol=1e-6)
    assert np.all(np.diff(s.sigmas) > 0)
    assert np.all(np.diff(s.alphas) < 0)
    assert s.alphas[0] >= 0.999
    assert s.sigmas[-1] >= 0.99


def test_two_step_schedule_is_valid():
    s = make_schedule(T=2)
    assert s.sigmas[0] == 0.0
    assert s.sigmas[1] > 0.99


@pytest.mark.parametrize(
    "kwargs",
    [
        {"T": 1},
        {"beta_min": 0.0},
        {"beta_min": 0.05, "beta_max": 0.01},
        {"beta_max": 1e-3},
        {"kind": "sqrt"},
        {"loss_weight": np.ones(10)},
    ],
)
def test_invalid_schedules_rejected(kwargs):
    with pytest.raises(ScheduleError):
        make_schedule(**kwargs)


def test_tables_are_read_only(schedule):
    with pytest.raises(ValueError):
        schedule.alphas[0] = 0.5


def test_add_noise_at_t0_is_identity(schedule):
    x = Tensor([0.3, -1.2, 2.0])
    eps = np.array([1.0, -1.0, 0.5])
    np.testing.assert_allclose(add_noise(schedule, x, 0, eps).data, x.data, atol=1e-3)


def test_add_noise_with_zero_noise_scales_exactly(schedule):
    x = Tensor([0.3, -1.2, 2.0])
    t = 400
    z = add_noise(schedule, x, t, np.zeros(3))
    np.testing.assert_array_equal(z.data, x.data * np.float32(schedule.alphas[t]))


def test_add_noise_is_linear_in_x_and_eps(schedule):
    rng = keyed_rng(0, 3)
    x, eps = rng.standard_normal(5), rng.standard_normal(5)
    with gc.precision("float64"):
        lhs = add_noise(schedule, Tensor(2.5 * x), 250, 2.5 * eps).data
        rhs = 2.5 * add_noise(schedule, Tensor(x), 250, eps).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_add_noise_second_moment_matches_sigma(schedule):
    t, n, dim = 700, 10_000, 4
    rng = keyed_rng(5, 0)
    eps = rng.standard_normal((n, dim))
    with gc.precision("float64"):
        z = add_noise(schedule, Tensor(np.zeros((n, dim))), t, eps).data
    sq = np.sum(z**2, axis=1)
    expected = dim * schedule.sigmas[t] ** 2
    band = 3.0 * sq.std(ddof=1) / math.sqrt(n)
    assert abs(sq.mean() - expected) <= band


def test_add_noise_per_sample_timesteps(schedule):
    t = np.array([0, 500, 999])
    x = Tensor(np.ones((3, 2)))
    z = add_noise(schedule, x, t, np.zeros((3, 2)))
    np.testing.assert_allclose(z.data[:, 0], schedule.alphas[t].astype(np.float32))
    with pytest.raises(ShapeError):
        add_noise(schedule, Tensor(np.ones((2, 2))), t, np.zeros((2, 2)))


def test_add_noise_shape_and_range_errors(schedule):
    with pytest.raises(ShapeError):
        add_noise(schedule, Tensor([1.0, 2.0]), 10, np.zeros(3))
    with pytest.raises(ScheduleError):
        add_noise(schedule, Tensor([1.0]), 1000, np.zeros(1))
    with pytest.raises(ScheduleError):
        add_noise(schedule, Tensor([1.0]), 0.5, np.zeros(1))


def test_policy_bounds():
    assert TimestepPolicy().bounds(1000) == (20, 980)
    assert TimestepPolicy(0.0, 1.0).bounds(1000) == (0, 999)
    with pytest.raises(ScheduleError):
        TimestepPolicy(0.9, 0.1).bounds(1000)
    with pytest.raises(ScheduleError):
        TimestepPolicy(0.9995, 1.0).bounds(1000)


def test_degenerate_policy_always_returns_midpoint():
    rng = keyed_rng(0, 0)
    draws = sample_timestep(TimestepPolicy(0.5, 0.5), rng, 1000, size=200)
    assert np.all(draws == 500)
    assert sample_timestep(TimestepPolicy(0.5, 0.5), rng, 1000) == 500


def test_sample_timestep_is_reproducible():
    a = sample_timestep(TimestepPolicy(), keyed_rng(9, 4), 1000, size=50)
    b = sample_timestep(TimestepPolicy(), keyed_rng(9, 4), 1000, size=50)
    assert np.array_equal(a, b)


def test_sample_timestep_is_uniform_over_the_range():
    draws = sample_timestep(TimestepPolicy(), keyed_rng(1, 0), 1000, size=100_000)
    assert draws.min() >= 20 and draws.max() <= 980
    counts = np.bincount(draws - 20, minlength=961)
    assert len(counts) == 961
    assert stats.chisquare(counts).pvalue > 0.001

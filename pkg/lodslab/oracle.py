"""
Ground truth for the distillation priors: closed-form fixed points of the
Gaussian sandbox, Monte-Carlo expected gradients, finite differences and MMD.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist, pdist

from lodslab import gradcore as gc
from lodslab.denoiser import AnalyticDenoiser, Condition, make_analytic
from lodslab.gradcore import Tensor
from lodslab.priors import reference_sds_grad, sds_grad
from lodslab.schedule import NoiseSchedule, TimestepPolicy, make_schedule, sample_timestep
from lodslab.utils import OracleError, keyed_rng

logger = logging.getLogger(__name__)

ORACLE_PRESETS = ("equal-variance", "unequal-variance")
MC_CHUNK = 10_000

# grad_fn(x_batch (n, D), t (n,), eps (n, D)) -> per-sample gradients (n, D)
GradFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class GaussianSandbox:
    mu_y: np.ndarray
    var_y: float
    mu_null: np.ndarray
    var_null: float
    schedule: NoiseSchedule = field(default_factory=make_schedule)

    def __post_init__(self):
        self.mu_y = np.atleast_1d(np.asarray(self.mu_y, dtype=np.float64))
        self.mu_null = np.atleast_1d(np.asarray(self.mu_null, dtype=np.float64))
        if self.var_y < 0 or self.var_null < 0:
            raise OracleError(f"Sandbox variances must be >= 0, got {self.var_y}, {self.var_null}")
        if self.mu_y.shape != self.mu_null.shape:
            raise OracleError(f"Mean shapes differ: {self.mu_y.shape} vs {self.mu_null.shape}")

    condition = Condition(0)

    @property
    def dim(self) -> int:
        return self.mu_y.shape[0]

    @property
    def equal_variance(self) -> bool:
        return self.var_y == self.var_null

    def denoiser(self) -> AnalyticDenoiser:
        return make_analytic({0: self.mu_y}, {0: self.var_y}, self.mu_null, self.var_null, self.schedule)


def cfg_fixed_point(sb: GaussianSandbox, w: float, t: Optional[int] = None) -> np.ndarray:
    """
    Root of the expected SDS gradient. With equal variances it is
    ``w mu_y + (1 - w) mu_null`` for every t; otherwise it depends on t.
    """
    if not math.isfinite(w):
        raise OracleError(f"Fixed point needs a finite w, got {w}")
    if sb.equal_variance:
        return w * sb.mu_y + (1.0 - w) * sb.mu_null
    if t is None:
        raise OracleError("Unequal variances: the fixed point depends on t, pass one")
    alpha, sigma = (float(v) for v in sb.schedule.coefficients(t, 0))
    d_y = alpha**2 * sb.var_y + sigma**2
    d_null = alpha**2 * sb.var_null + sigma**2
    denom = w / d_y + (1.0 - w) / d_null
    if abs(denom) < 1e-12:
        raise OracleError(f"No fixed point: w={w} balances the two precisions exactly at t={t}")
    return (w * sb.mu_y / d_y + (1.0 - w) * sb.mu_null / d_null) / denom


@dataclass
class MCEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n: int

    def within(self, target, k: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.mean - target) <= k * self.stderr))


def sandbox_grad_fn(sb: GaussianSandbox, variant: str = "sds", w: float = 1.0) -> GradFn:
    d = sb.denoiser()
    if variant == "sds":
        return lambda x, t, eps: sds_grad(d, x, sb.condition, w, t, eps)
    if variant == "reference_sds":
        return lambda x, t, eps: reference_sds_grad(d, x, sb.condition, t, eps)
    raise OracleError(f"No sandbox gradient for variant '{variant}'")


def _draws(seed: int, n: int, dim: int, policy: TimestepPolicy, T: int):
    for chunk, start in enumerate(range(0, n, MC_CHUNK)):
        m = min(MC_CHUNK, n - start)
        rng = keyed_rng(seed, chunk)
        t = sample_timestep(policy, rng, T, size=m)
        yield t, rng.standard_normal((m, dim))


def expected_grad_mc(
    grad_fn: GradFn,
    x,
    n: int,
    seed: int,
    schedule: NoiseSchedule,
    policy: Optional[TimestepPolicy] = None,
) -> MCEstimate:
    """Mean of ``grad_fn`` at fixed ``x`` over n independent (t, eps) draws."""
    if n < 2:
        raise OracleError(f"Monte-Carlo estimate needs n >= 2, got {n}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    policy = policy or TimestepPolicy()
    samples = [
        grad_fn(np.broadcast_to(x, eps.shape), t, eps)
        for t, eps in _draws(seed, n, x.shape[0], policy, schedule.T)
    ]
    g = np.concatenate(samples, axis=0)
    return MCEstimate(g.mean(axis=0), g.std(axis=0, ddof=1) / math.sqrt(n), n)


def mc_fixed_point(
    grad_fn: GradFn,
    lo: float,
    hi: float,
    n: int,
    seed: int,
    schedule: NoiseSchedule,
    policy: Optional[TimestepPolicy] = None,
    tol: float = 1e-4,
    max_iter: int = 100,
) -> float:
    """
    Root of a 1-D expected gradient. Every evaluation uses the same draws, so
    the estimated field is a fixed function of x.
    """

    def f(x):
        return float(expected_grad_mc(grad_fn, [x], n, seed, schedule, policy).mean[0])

    try:
        return float(optimize.brentq(f, lo, hi, xtol=tol, maxiter=max_iter))
    except ValueError as e:
        raise OracleError(f"Bracket [{lo}, {hi}] does not contain a root: {e}") from e
    except RuntimeError as e:
        raise OracleError(f"No root within {max_iter} iterations on [{lo}, {hi}]: {e}") from e


def finite_diff_check(fn: Callable[[Tensor], Tensor], theta, h: float = 1e-5) -> float:
    """Worst relative error between the tape gradient and central differences."""
    theta = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    if gc.get_default_dtype() != np.float64:
        raise OracleError("finite_diff_check needs 64-bit mode; wrap it in gradcore.precision('float64')")
    leaf = Tensor(theta, requires_grad=True, dtype=np.float64)
    gc.backward(fn(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(theta)

    numeric = np.zeros_like(theta)
    flat = numeric.reshape(-1)
    for i in range(theta.size):
        step = np.zeros(theta.size)
        step[i] = h
        step = step.reshape(theta.shape)
        up = fn(Tensor(theta + step, dtype=np.float64)).item()
        down = fn(Tensor(theta - step, dtype=np.float64)).item()
        flat[i] = (up - down) / (2 * h)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    floor = 1e-6 * scale + 1e-12
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(err.max(initial=0.0))


def _as_samples(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def mmd(samples_a, samples_b, bandwidth: float) -> float:
    """Squared MMD, V-statistic with a Gaussian kernel exp(-|a - b|^2 / 2h^2)."""
    a, b = _as_samples(samples_a), _as_samples(samples_b)
    if bandwidth <= 0:
        raise OracleError(f"MMD bandwidth must be positive, got {bandwidth}")
    if len(a) == 0 or len(b) == 0 or a.shape[1] != b.shape[1]:
        raise OracleError(f"MMD needs nonempty sets of equal dimension, got {a.shape} and {b.shape}")
    gamma = 1.0 / (2.0 * bandwidth**2)

    def kernel_mean(u, v):
        k = np.exp(-gamma * cdist(u, v, "sqeuclidean"))
        return math.fsum(k.ravel()) / k.size

    value = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b)
    return max(value, 0.0)


def median_bandwidth(samples_a, samples_b) -> float:
    pooled = np.concatenate([_as_samples(samples_a), _as_samples(samples_b)], axis=0)
    dists = pdist(pooled)
    dists = dists[dists > 0]
    if dists.size == 0:
        logger.warning("All samples coincide; falling back to bandwidth 1.0")
        return 1.0
    return float(np.median(dists))


@dataclass
class OracleReport:
    quantity: str
    analytic: float
    estimate: float
    stderr: float
    verdict: str

    def to_dict(self) -> dict:
        return asdict(self)


def write_reports(reports: List[OracleReport], path: Union[str, Path]):
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")


def _root_report(quantity, grad_fn, analytic, n, seed, schedule, policy) -> OracleReport:
    half = 10.0 + abs(analytic)
    root = mc_fixed_point(grad_fn, analytic - half, analytic + half, n, seed, schedule, policy)
    # stderr of the root: field noise at the root over the field slope
    at_root = expected_grad_mc(grad_fn, [root], n, seed, schedule, policy)
    lo = expected_grad_mc(grad_fn, [root - 1.0], n, seed, schedule, policy).mean[0]
    hi = expected_grad_mc(grad_fn, [root + 1.0], n, seed, schedule, policy).mean[0]
    slope = (hi - lo) / 2.0
    stderr = float(at_root.stderr[0] / abs(slope)) if slope else math.inf
    ok = abs(root - analytic) <= max(0.05, 3.0 * stderr)
    return OracleReport(quantity, float(analytic), float(root), stderr, "pass" if ok else "fail")


def run_oracle_preset(name: str, w: float, n: int = 100_000, seed: int = 0,
                      schedule: Optional[NoiseSchedule] = None) -> List[OracleReport]:
    """Analytic versus Monte-Carlo checks on a 1-D sandbox."""
    schedule = schedule or make_schedule()
    if name == "equal-variance":
        sb = GaussianSandbox([1.0], 1.0, [0.0], 1.0, schedule)
        policy = TimestepPolicy()
    elif name == "unequal-variance":
        sb = GaussianSandbox([1.0], 0.25, [0.0], 1.0, schedule)
        policy = TimestepPolicy(0.5, 0.5)
    else:
        raise OracleError(f"Unknown oracle preset '{name}', expected one of {ORACLE_PRESETS}")

    t_fixed = policy.bounds(schedule.T)[0]
    analytic = float(cfg_fixed_point(sb, w, t_fixed)[0])
    reports = [
        _root_report(f"sds_fixed_point(w={w})", sandbox_grad_fn(sb, "sds", w), analytic, n, seed, schedule, policy)
    ]
    ref = expected_grad_mc(sandbox_grad_fn(sb, "reference_sds"), sb.mu_y, n, seed, schedule, policy)
    reports.append(
        OracleReport(
            "reference_sds_grad_at_mu_y",
            0.0,
            float(ref.mean[0]),
            float(ref.stderr[0]),
            "pass" if ref.within(0.0) else "fail",
        )
    )
    for r in reports:
        logger.info(f"{name}: {r.quantity} analytic={r.analytic:.5g} mc={r.estimate:.5g} +- {r.stderr:.2g} [{r.verdict}]")
    return reports

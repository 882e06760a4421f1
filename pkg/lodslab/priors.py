"""
Score-distillation priors and the two-loop LODS driver.

Every gradient function returns d(loss)/dx as a float64 array shaped like
``x``: the denoiser outputs are treated as constants and the residual is
routed through dz_t/dx = alpha_t, times the schedule's loss weight w(t).
``t`` may be a scalar shared by the whole batch or one timestep per row.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from lodslab import gradcore as gc
from lodslab.denoiser import (
    AdapterSet,
    Condition,
    Denoiser,
    LearnableEmbedding,
    NetworkDenoiser,
    attach_adapter,
    backward_through,
)
from lodslab.gradcore import Tensor
from lodslab.optim import make_optimizer
from lodslab.schedule import TimestepPolicy, sample_timestep
from lodslab.utils import DivergenceError, PriorConfigError, ShapeError, grad_norm, keyed_rng

logger = logging.getLogger(__name__)

VARIANTS = ("sds", "reference_sds", "normalized_sds", "dds", "vsd", "lods_embedding", "lods_adapter")
LODS_VARIANTS = ("lods_embedding", "lods_adapter")
# variants whose gradient has a w -> inf limit
LIMIT_VARIANTS = ("normalized_sds",) + LODS_VARIANTS
NOISE_POLICIES = ("fresh", "reuse")

DIVERGENCE_NORM = 1e6

State = Union[LearnableEmbedding, AdapterSet]


# ------------------------------------------------------------------ helpers


def _values(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _shape(x) -> Tuple[int, ...]:
    return tuple(x.shape) if hasattr(x, "shape") else np.shape(x)


def _batch(d: Denoiser, x, eps) -> Tuple[np.ndarray, np.ndarray]:
    x = _values(x)
    eps = _values(eps)
    if eps.shape != x.shape:
        raise ShapeError(f"Noise shape {eps.shape} does not match x shape {x.shape}")
    if x.size == 0 or x.size % d.data_dim:
        raise ShapeError(f"x shape {x.shape} cannot be split into rows of {d.data_dim}")
    return x.reshape(-1, d.data_dim), eps.reshape(-1, d.data_dim)


def _noised(d: Denoiser, x: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    alpha, sigma = d.schedule.coefficients(t, 2)
    return alpha * x + sigma * eps


def _predict(d: Denoiser, z: np.ndarray, t, c, adapter: Optional[AdapterSet] = None) -> np.ndarray:
    return np.asarray(d.predict_noise(Tensor(z, dtype=np.float64), t, c, adapter=adapter).data, dtype=np.float64)


def _route(d: Denoiser, t, residual: np.ndarray, shape) -> np.ndarray:
    alpha, _ = d.schedule.coefficients(t, 2)
    return (residual * alpha * d.schedule.weight(t, 2)).reshape(shape)


def _unconditional(d: Denoiser, z: np.ndarray, t, state: Optional[State]) -> np.ndarray:
    """u = eps(z; alpha), eps_psi(z; null) or, without state, eps(z; null)."""
    if isinstance(state, AdapterSet):
        return _predict(d, z, t, Condition.null(), adapter=state)
    if isinstance(state, LearnableEmbedding):
        return _predict(d, z, t, state)
    return _predict(d, z, t, Condition.null())


def _check_finite_w(w: float, variant: str):
    if not math.isfinite(w):
        raise PriorConfigError(f"Guidance w={w} is not allowed for {variant}")


@contextmanager
def _no_grad(params: Sequence[Tensor]):
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def frozen(state: Optional[State]):
    """Temporarily stop gradients into a learnable state."""
    return _no_grad(state.parameters() if state is not None else [])


def base_frozen(d: Denoiser):
    """Graphs recorded inside never reach the base weights phi."""
    return _no_grad(d.parameters() if isinstance(d, NetworkDenoiser) else [])


# ---------------------------------------------------------------- gradients


def cfg_combine(eps_y, eps_null, w: float) -> np.ndarray:
    """Classifier-free guidance: w * eps_y + (1 - w) * eps_null."""
    eps_y = _values(eps_y)
    eps_null = _values(eps_null)
    if eps_y.shape != eps_null.shape:
        raise ShapeError(f"cfg_combine: {eps_y.shape} vs {eps_null.shape}")
    _check_finite_w(w, "cfg_combine")
    return w * eps_y + (1.0 - w) * eps_null


def sds_grad(d: Denoiser, x, y: Condition, w: float, t, eps) -> np.ndarray:
    _check_finite_w(w, "sds")
    xb, eb = _batch(d, x, eps)
    z = _noised(d, xb, t, eb)
    guided = cfg_combine(_predict(d, z, t, y), _predict(d, z, t, Condition.null()), w)
    return _route(d, t, guided - eb, _shape(x))


def reference_sds_grad(d: Denoiser, x, y: Condition, t, eps) -> np.ndarray:
    xb, eb = _batch(d, x, eps)
    z = _noised(d, xb, t, eb)
    return _route(d, t, _predict(d, z, t, y) - eb, _shape(x))


def dds_grad(d: Denoiser, x, y: Condition, x_src, y_src: Condition, w: float, t, eps) -> np.ndarray:
    """Delta denoising score; target and source share ``t`` and ``eps``."""
    _check_finite_w(w, "dds")
    if _shape(x_src) != _shape(x):
        raise ShapeError(f"Source shape {_shape(x_src)} does not match target shape {_shape(x)}")
    xb, eb = _batch(d, x, eps)
    sb, _ = _batch(d, x_src, eps)
    z = _noised(d, xb, t, eb)
    z_src = _noised(d, sb, t, eb)
    target = cfg_combine(_predict(d, z, t, y), _predict(d, z, t, Condition.null()), w)
    source = cfg_combine(_predict(d, z_src, t, y_src), _predict(d, z_src, t, Condition.null()), w)
    return _route(d, t, target - source, _shape(x))


def vsd_grad(d: Denoiser, adapter: Optional[AdapterSet], x, y: Condition, w: float, t, eps) -> np.ndarray:
    """Guided base prediction minus the adapted conditional prediction."""
    if adapter is None:
        raise PriorConfigError("vsd needs an adapter")
    _check_finite_w(w, "vsd")
    xb, eb = _batch(d, x, eps)
    z = _noised(d, xb, t, eb)
    guided = cfg_combine(_predict(d, z, t, y), _predict(d, z, t, Condition.null()), w)
    with frozen(adapter):
        particle = _predict(d, z, t, y, adapter=adapter)
    return _route(d, t, guided - particle, _shape(x))


def limit_grad(d: Denoiser, x, y: Condition, state: Optional[State], t, eps) -> np.ndarray:
    xb, eb = _batch(d, x, eps)
    z = _noised(d, xb, t, eb)
    with frozen(state):
        u = _unconditional(d, z, t, state)
    return _route(d, t, _predict(d, z, t, y) - u, _shape(x))


def _normalized(eps_y: np.ndarray, u: np.ndarray, eps: np.ndarray, w: float) -> np.ndarray:
    if math.isinf(w):
        return eps_y - u
    return eps_y + ((1.0 - w) / w) * u - eps / w


def normalized_sds_grad(d: Denoiser, x, y: Condition, state: Optional[State], w: float, t, eps) -> np.ndarray:
    """
    SDS divided by w, with the unconditional branch replaced by the learnable
    state. ``w = inf`` yields :func:`limit_grad`.
    """
    if math.isinf(w):
        return limit_grad(d, x, y, state, t, eps)
    if w <= 0:
        raise PriorConfigError(f"Normalized SDS needs w > 0, got {w}")
    xb, eb = _batch(d, x, eps)
    z = _noised(d, xb, t, eb)
    eps_y = _predict(d, z, t, y)
    with frozen(state):
        u = _unconditional(d, z, t, state)
    return _route(d, t, _normalized(eps_y, u, eb, w), _shape(x))


def _state_prediction(d: Denoiser, z: np.ndarray, t, state: State, condition: Condition) -> Tensor:
    z = Tensor(z, dtype=np.float64)
    if isinstance(state, AdapterSet):
        return d.predict_noise(z, t, condition, adapter=state)
    return d.predict_noise(z, t, state)


def alignment_loss(d: Denoiser, x, state: State, t, eps) -> Tensor:
    """
    ||eps(z_t; alpha) - eps||^2 or ||eps_psi(z_t; null) - eps||^2, mean over
    elements. The render and the base model are constants; the graph reaches
    only the learnable state.
    """
    if state is None:
        raise PriorConfigError("alignment_loss needs a learnable state")
    xb, eb = _batch(d, x, eps)
    z = _noised(d, xb, t, eb)
    with base_frozen(d):
        pred = _state_prediction(d, z, t, state, Condition.null())
    return gc.mse(pred, Tensor(eb, dtype=np.float64))


def _descend(d: Denoiser, state: State, loss: Tensor) -> float:
    if state.optimizer is None:
        raise PriorConfigError("Learnable state has no optimizer configured")
    state.optimizer.zero_grad()
    backward_through(d, loss)
    state.optimizer.step()
    return loss.item()


def alignment_step(d: Denoiser, x, state: State, t, eps) -> float:
    """One optimizer step on the alignment loss; returns the pre-step value."""
    return _descend(d, state, alignment_loss(d, x, state, t, eps))


def adapter_fit_step(d: Denoiser, adapter: AdapterSet, x, y: Condition, t, eps) -> float:
    """VSD particle model update on ||eps_psi(z_t; y) - eps||^2."""
    xb, eb = _batch(d, x, eps)
    z = _noised(d, xb, t, eb)
    with base_frozen(d):
        pred = _state_prediction(d, z, t, adapter, y)
    loss = gc.mse(pred, Tensor(eb, dtype=np.float64))
    return _descend(d, adapter, loss)


# ------------------------------------------------------------------- config


@dataclass
class PriorConfig:
    variant: str
    w: float = 1000.0
    condition: Condition = field(default_factory=lambda: Condition(0))
    state: Optional[State] = None
    policy: TimestepPolicy = field(default_factory=TimestepPolicy)
    noise_policy: str = "fresh"
    seed: int = 0
    # optimizer of the learnable state (alpha or psi)
    state_lr: float = 1e-5
    state_optimizer: str = "adam"
    # optimizer of the generator parameters theta
    theta_lr: float = 3e-2
    theta_optimizer: str = "sgd"
    theta_momentum: float = 0.0
    # editing: fixed source render and its condition for dds
    source: Optional[np.ndarray] = None
    source_condition: Optional[Condition] = None

    def validate(self):
        if self.variant not in VARIANTS:
            raise PriorConfigError(f"Unknown variant '{self.variant}', expected one of {VARIANTS}")
        if math.isnan(self.w) or self.w < 0:
            raise PriorConfigError(f"Guidance w must be >= 0 or inf, got {self.w}")
        if math.isinf(self.w) and self.variant not in LIMIT_VARIANTS:
            raise PriorConfigError(f"w=inf is only defined for {LIMIT_VARIANTS}, not {self.variant}")
        if self.w == 0 and self.variant in LIMIT_VARIANTS:
            raise PriorConfigError(f"{self.variant} divides by w; w=0 is not allowed")
        if self.variant == "lods_embedding" and not isinstance(self.state, LearnableEmbedding):
            raise PriorConfigError("lods_embedding needs a LearnableEmbedding state")
        if self.variant in ("lods_adapter", "vsd") and not isinstance(self.state, AdapterSet):
            raise PriorConfigError(f"{self.variant} needs an AdapterSet state")
        if self.variant == "dds" and self.source is None:
            raise PriorConfigError("dds needs a source render")
        if self.noise_policy not in NOISE_POLICIES:
            raise PriorConfigError(f"Unknown noise policy '{self.noise_policy}', expected {NOISE_POLICIES}")
        if self.condition.is_null:
            raise PriorConfigError("Distillation needs a non-null target condition")
        return self

    @property
    def is_lods(self) -> bool:
        return self.variant in LODS_VARIANTS


def make_state(
    d: Denoiser,
    variant: str,
    rank: int = 4,
    scale: float = 0.5,
    init_condition: Optional[Condition] = None,
    seed: int = 0,
) -> Optional[State]:
    """Learnable state a variant needs: alpha for lods_embedding, psi for adapter variants."""
    if variant == "lods_embedding":
        if init_condition is not None:
            return LearnableEmbedding.from_condition(d, init_condition)
        return LearnableEmbedding.from_null(d)
    if variant in ("lods_adapter", "vsd"):
        return attach_adapter(d, rank, scale, seed=seed)
    return None


class LODSPrior:
    """Binds a denoiser to a validated :class:`PriorConfig`."""

    def __init__(self, d: Denoiser, cfg: PriorConfig):
        self.d = d
        self.cfg = cfg.validate()
        if isinstance(d, NetworkDenoiser):
            d.freeze()
        if cfg.state is not None and cfg.state.optimizer is None:
            cfg.state.configure_optimizer(cfg.state_optimizer, cfg.state_lr)

    @property
    def state(self) -> Optional[State]:
        return self.cfg.state

    def distill_grad(self, x, t, eps) -> np.ndarray:
        cfg, d = self.cfg, self.d
        if cfg.variant == "sds":
            return sds_grad(d, x, cfg.condition, cfg.w, t, eps)
        if cfg.variant == "reference_sds":
            return reference_sds_grad(d, x, cfg.condition, t, eps)
        if cfg.variant == "dds":
            source_condition = cfg.source_condition or cfg.condition
            return dds_grad(d, x, cfg.condition, cfg.source, source_condition, cfg.w, t, eps)
        if cfg.variant == "vsd":
            return vsd_grad(d, cfg.state, x, cfg.condition, cfg.w, t, eps)
        return normalized_sds_grad(d, x, cfg.condition, cfg.state, cfg.w, t, eps)

    def alignment_loss(self, x, t, eps) -> Tensor:
        return alignment_loss(self.d, x, self.state, t, eps)

    def alignment_step(self, x, t, eps) -> float:
        return alignment_step(self.d, x, self.state, t, eps)

    def merged_step(self, x, t, eps) -> Tuple[np.ndarray, float]:
        """
        Distill gradient and alignment step on one (t, eps) with a shared
        unconditional forward: 2 forwards and 1 backward.
        """
        d, cfg = self.d, self.cfg
        xb, eb = _batch(d, x, eps)
        z = _noised(d, xb, t, eb)
        eps_y = _predict(d, z, t, cfg.condition)
        u = _state_prediction(d, z, t, self.state, Condition.null())
        grad = _route(d, t, _normalized(eps_y, np.asarray(u.data, dtype=np.float64), eb, cfg.w), _shape(x))
        loss = gc.mse(u, Tensor(eb, dtype=np.float64))
        return grad, _descend(d, self.state, loss)


# --------------------------------------------------------------------- runs


@dataclass
class DistillStepRecord:
    step: int
    distill_grad_norm: float
    alignment_loss: Optional[float]
    t: int
    forwards: int
    backwards: int


@dataclass
class DistillRun:
    variant: str
    w: float
    records: List[DistillStepRecord] = field(default_factory=list)
    theta: Optional[np.ndarray] = None
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def forwards(self) -> int:
        return sum(r.forwards for r in self.records)

    @property
    def backwards(self) -> int:
        return sum(r.backwards for r in self.records)

    def to_rows(self) -> List[dict]:
        return [asdict(r) for r in self.records]

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "variant": self.variant,
            "w": "inf" if math.isinf(self.w) else self.w,
            "steps": len(self.records),
            "forwards": self.forwards,
            "backwards": self.backwards,
            "final_grad_norm": last.distill_grad_norm if last else None,
            "final_alignment_loss": last.alignment_loss if last else None,
        }


def lods_run(
    cfg: PriorConfig,
    gen,
    theta0: np.ndarray,
    d: Denoiser,
    steps: int,
    snapshot_every: int = 0,
    progress: bool = False,
    log_every: Optional[int] = None,
) -> DistillRun:
    """
    Distil ``d`` into generator parameters theta.

    Step A moves theta along the variant's distill gradient with the
    learnable state frozen. For LODS variants Step B takes one alignment step
    on the state; for vsd it fits the adapter to the renders instead. All
    randomness comes from ``keyed_rng(seed, step, draw)`` with draw 0 for
    Step A and draw 1 for Step B.
    """
    prior = LODSPrior(d, cfg)
    theta = Tensor(np.array(theta0, dtype=np.float64), requires_grad=True, dtype=np.float64)
    opt = make_optimizer(cfg.theta_optimizer, [theta], cfg.theta_lr, momentum=cfg.theta_momentum)
    T = d.schedule.T
    merged = cfg.is_lods and cfg.noise_policy == "reuse"
    run = DistillRun(cfg.variant, cfg.w)
    log_every = log_every or max(steps // 10, 1)

    for step in tqdm(range(steps), desc=cfg.variant, disable=not progress):
        before = d.tracker.snapshot()
        rng = keyed_rng(cfg.seed, step, 0)
        x = gen.render(theta)
        t = sample_timestep(cfg.policy, rng, T)
        eps = rng.standard_normal(x.shape)

        align = None
        if merged:
            grad, align = prior.merged_step(x, t, eps)
        else:
            grad = prior.distill_grad(x, t, eps)
        norm = grad_norm(grad)
        if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(
                f"{cfg.variant} step {step}: gradient norm {norm:.3e} exceeds {DIVERGENCE_NORM:.0e} (t={t}, w={cfg.w})"
            )
        opt.zero_grad()
        gc.backward(gc.dot_constant(x, grad))
        opt.step()

        if (cfg.is_lods and not merged) or cfg.variant == "vsd":
            rng_b = keyed_rng(cfg.seed, step, 1)
            x_new = gen.render(Tensor(theta.data, dtype=np.float64))
            t_b = sample_timestep(cfg.policy, rng_b, T)
            eps_b = rng_b.standard_normal(x_new.shape)
            if cfg.variant == "vsd":
                align = adapter_fit_step(d, cfg.state, x_new, cfg.condition, t_b, eps_b)
            else:
                align = prior.alignment_step(x_new, t_b, eps_b)

        counts = d.tracker.since(before)
        run.records.append(DistillStepRecord(step, norm, align, t, counts["forwards"], counts["backwards"]))
        if snapshot_every and (step % snapshot_every == 0 or step == steps - 1):
            run.snapshots[step] = theta.data.copy()
        if (step + 1) % log_every == 0:
            logger.info(
                f"{cfg.variant} step {step + 1}/{steps} |grad|={norm:.4g}"
                + (f" align={align:.5f}" if align is not None else "")
            )

    run.theta = theta.data.copy()
    logger.info(f"{cfg.variant} done: {d.tracker.summary()}")
    return run

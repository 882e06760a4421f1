"""
Conditional noise-prediction models eps(z_t; y, t).

Two families share one interface:

- :class:`NetworkDenoiser`: an MLP on ``[z_t, sinusoidal time features,
  condition embedding]`` trained by denoising score matching, with optional
  low-rank adapters on its hidden layers.
- :class:`AnalyticDenoiser`: the exact optimal denoiser for isotropic
  Gaussian data per condition, used as an oracle.

Every prediction bumps the model's :class:`OpTracker` forward counter;
:func:`backward_through` is the only place backward passes are counted.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from lodslab import gradcore as gc
from lodslab.gradcore import Tensor
from lodslab.op_tracker import OpTracker
from lodslab.optim import Optimizer, make_optimizer
from lodslab.schedule import NoiseSchedule, add_noise, make_schedule, SCHEDULE_KINDS
from lodslab.utils import ConditionError, DenoiserError, ShapeError, keyed_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Condition:
    """Class index, or ``None`` for the null condition."""

    id: Optional[int] = None

    @classmethod
    def null(cls) -> "Condition":
        return cls(None)

    @property
    def is_null(self) -> bool:
        return self.id is None


class LearnableEmbedding:
    """
    Learnable unconditional state alpha.

    For a network denoiser this is a condition-embedding vector; for the
    analytic family it is the unconditional mean in data space.
    """

    def __init__(self, vector: np.ndarray):
        vector = np.array(vector, copy=True)
        self.vector = Tensor(vector, requires_grad=True, dtype=vector.dtype)
        self.optimizer: Optional[Optimizer] = None

    @classmethod
    def from_null(cls, d: "Denoiser") -> "LearnableEmbedding":
        return cls(d.state_vector(Condition.null()))

    @classmethod
    def from_condition(cls, d: "Denoiser", condition: Condition) -> "LearnableEmbedding":
        return cls(d.state_vector(condition))

    def configure_optimizer(self, kind: str, lr: float, momentum: float = 0.0):
        self.optimizer = make_optimizer(kind, [self.vector], lr, momentum=momentum)
        return self.optimizer

    def parameters(self) -> List[Tensor]:
        return [self.vector]

    def __len__(self):
        return self.vector.size

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {"embedding": self.vector.data}

    @classmethod
    def from_state_dict(cls, state: Mapping[str, np.ndarray]) -> "LearnableEmbedding":
        if "embedding" not in state:
            raise DenoiserError("State has no 'embedding' entry")
        return cls(state["embedding"])


class Denoiser:
    variant = "base"

    def __init__(self, schedule: NoiseSchedule, data_dim: int, name: str):
        self.schedule = schedule
        self.data_dim = int(data_dim)
        self.tracker = OpTracker(name)

    @property
    def forward_count(self):
        return self.tracker.forward_count

    @property
    def backward_count(self):
        return self.tracker.backward_count

    def _as_batch(self, z_t) -> Tensor:
        z_t = gc.as_tensor(z_t)
        if z_t.ndim == 0 or z_t.shape[-1] != self.data_dim:
            raise ShapeError(
                f"z_t shape {z_t.shape} does not end in the model data dimension {self.data_dim}"
            )
        return z_t.reshape(-1, self.data_dim)

    def _timesteps(self, t, n: int) -> np.ndarray:
        arr = self.schedule.check_timestep(t)
        if arr.ndim == 0:
            return np.full(n, int(arr), dtype=np.int64)
        arr = arr.reshape(-1)
        if arr.shape[0] != n:
            raise ShapeError(f"Got {arr.shape[0]} timesteps for a batch of {n}")
        return arr

    def state_vector(self, condition: Condition) -> np.ndarray:
        raise NotImplementedError

    def predict_noise(self, z_t, t, c, adapter: Optional["AdapterSet"] = None) -> Tensor:
        raise NotImplementedError


# ---------------------------------------------------------------- network


def sinusoidal_table(T: int, features: int) -> np.ndarray:
    half = features // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = np.arange(T, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class NetworkDenoiser(Denoiser):
    variant = "network"

    def __init__(
        self,
        schedule: NoiseSchedule,
        data_dim: int,
        num_classes: int,
        hidden_width: int = 128,
        depth: int = 3,
        embedding_dim: int = 16,
        time_features: int = 16,
        seed: int = 0,
    ):
        super().__init__(schedule, data_dim, "network")
        if num_classes < 1 or hidden_width < 1 or depth < 1:
            raise DenoiserError(
                f"Invalid architecture: classes={num_classes} width={hidden_width} depth={depth}"
            )
        if time_features % 2:
            raise DenoiserError(f"time_features must be even, got {time_features}")
        self.num_classes = int(num_classes)
        self.hidden_width = int(hidden_width)
        self.depth = int(depth)
        self.embedding_dim = int(embedding_dim)
        self.time_features = int(time_features)
        self.frozen = False

        rng = keyed_rng(seed, 0)
        self.time_table = sinusoidal_table(schedule.T, time_features)
        self.params: Dict[str, Tensor] = {
            "cond_table": Tensor(rng.standard_normal((num_classes + 1, embedding_dim)), requires_grad=True)
        }
        for i, (fan_in, fan_out) in enumerate(self.layer_shapes()):
            self.params[f"layers.{i}.weight"] = Tensor(
                rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in), requires_grad=True
            )
            self.params[f"layers.{i}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)

    @property
    def null_index(self) -> int:
        return self.num_classes

    def layer_shapes(self):
        widths = [self.data_dim + self.time_features + self.embedding_dim]
        widths += [self.hidden_width] * self.depth + [self.data_dim]
        return list(zip(widths[:-1], widths[1:]))

    def hidden_layers(self) -> range:
        return range(self.depth)

    def max_adapter_rank(self) -> int:
        shapes = self.layer_shapes()
        return min(min(shapes[i]) for i in self.hidden_layers())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True

    def condition_index(self, condition: Condition) -> int:
        if condition.is_null:
            return self.null_index
        if not 0 <= int(condition.id) < self.num_classes:
            raise ConditionError(
                f"Unknown condition id {condition.id}; model has classes 0..{self.num_classes - 1}"
            )
        return int(condition.id)

    def state_vector(self, condition: Condition) -> np.ndarray:
        return self.params["cond_table"].data[self.condition_index(condition)].copy()

    def _embedding(self, c, n: int) -> Tensor:
        if isinstance(c, LearnableEmbedding):
            if c.vector.shape != (self.embedding_dim,):
                raise ShapeError(
                    f"Learnable embedding shape {c.vector.shape} != ({self.embedding_dim},)"
                )
            return gc.broadcast_to(c.vector.reshape(1, self.embedding_dim), (n, self.embedding_dim))
        rows = np.full(n, self.condition_index(c), dtype=np.int64)
        return gc.take_rows(self.params["cond_table"], rows)

    def _forward(self, z: Tensor, t: np.ndarray, emb: Tensor, adapter: Optional["AdapterSet"]) -> Tensor:
        if adapter is not None and adapter.base is not self:
            raise DenoiserError("Adapter belongs to a different denoiser")
        tfeat = Tensor(self.time_table[t], dtype=z.dtype)
        h = gc.concat([z, tfeat, emb], axis=1)
        for i in self.hidden_layers():
            pre = h @ self.params[f"layers.{i}.weight"] + self.params[f"layers.{i}.bias"]
            if adapter is not None:
                pre = pre + adapter.delta(i, h)
            h = gc.silu(pre)
        last = self.depth
        self.tracker.add_forward()
        return h @ self.params[f"layers.{last}.weight"] + self.params[f"layers.{last}.bias"]

    def predict_noise(self, z_t, t, c, adapter: Optional["AdapterSet"] = None) -> Tensor:
        z_t = gc.as_tensor(z_t)
        z = self._as_batch(z_t)
        n = z.shape[0]
        out = self._forward(z, self._timesteps(t, n), self._embedding(c, n), adapter)
        return out.reshape(z_t.shape)

    def predict_batch(self, z: Tensor, t: np.ndarray, labels: np.ndarray, adapter=None) -> Tensor:
        """Forward with per-sample class indices (null index allowed)."""
        z = self._as_batch(z)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() > self.null_index:
            raise ConditionError(f"Labels outside 0..{self.null_index}")
        emb = gc.take_rows(self.params["cond_table"], labels)
        return self._forward(z, self._timesteps(t, z.shape[0]), emb, adapter)

    def architecture(self) -> Dict[str, int]:
        return {
            "data_dim": self.data_dim,
            "num_classes": self.num_classes,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "embedding_dim": self.embedding_dim,
            "time_features": self.time_features,
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.params.items()}
        arch = self.architecture()
        state["meta.architecture"] = np.array([arch[k] for k in _ARCH_KEYS], dtype=np.float64)
        state["schedule.params"] = np.array(
            [
                self.schedule.T,
                SCHEDULE_KINDS.index(self.schedule.kind),
                self.schedule.beta_min,
                self.schedule.beta_max,
            ],
            dtype=np.float64,
        )
        state["schedule.loss_weight"] = np.asarray(self.schedule.loss_weight)
        return state

    @classmethod
    def from_state_dict(cls, state: Mapping[str, np.ndarray]) -> "NetworkDenoiser":
        try:
            arch = dict(zip(_ARCH_KEYS, (int(v) for v in state["meta.architecture"])))
            T, kind_code, beta_min, beta_max = state["schedule.params"]
            schedule = make_schedule(
                SCHEDULE_KINDS[int(kind_code)],
                int(T),
                float(beta_min),
                float(beta_max),
                loss_weight=state["schedule.loss_weight"],
            )
        except KeyError as e:
            raise DenoiserError(f"Checkpoint is missing entry {e}") from None
        model = cls(schedule, **arch)
        for name, p in model.params.items():
            if name not in state:
                raise DenoiserError(f"Checkpoint is missing parameter '{name}'")
            if state[name].shape != p.shape:
                raise DenoiserError(f"Parameter '{name}' has shape {state[name].shape}, expected {p.shape}")
            p.data = np.array(state[name], copy=True)
        return model


_ARCH_KEYS = ("data_dim", "num_classes", "hidden_width", "depth", "embedding_dim", "time_features")


class AdapterSet:
    """Low-rank deltas ``scale * (h @ down) @ up`` on every hidden layer."""

    def __init__(self, base: NetworkDenoiser, rank: int, scale: float, seed: int = 0):
        limit = base.max_adapter_rank()
        if not 1 <= rank <= limit:
            raise DenoiserError(f"Adapter rank must lie in [1, {limit}] (narrowest adapted layer), got {rank}")
        self.base = base
        self.rank = int(rank)
        self.scale = float(scale)
        self.optimizer: Optional[Optimizer] = None
        rng = keyed_rng(seed, 1)
        self.down: List[Tensor] = []
        self.up: List[Tensor] = []
        for i in base.hidden_layers():
            fan_in, fan_out = base.layer_shapes()[i]
            self.down.append(Tensor(rng.standard_normal((fan_in, self.rank)) / math.sqrt(fan_in), requires_grad=True))
            self.up.append(Tensor(np.zeros((self.rank, fan_out)), requires_grad=True))

    def delta(self, layer: int, h: Tensor) -> Tensor:
        return gc.scale((h @ self.down[layer]) @ self.up[layer], self.scale)

    def parameters(self) -> List[Tensor]:
        return [p for pair in zip(self.down, self.up) for p in pair]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def configure_optimizer(self, kind: str, lr: float, momentum: float = 0.0):
        self.optimizer = make_optimizer(kind, self.parameters(), lr, momentum=momentum)
        return self.optimizer

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for i, (down, up) in enumerate(zip(self.down, self.up)):
            state[f"adapter.{i}.down"] = down.data
            state[f"adapter.{i}.up"] = up.data
        state["adapter.meta"] = np.array([self.rank, self.scale], dtype=np.float64)
        return state

    @classmethod
    def from_state_dict(cls, base: NetworkDenoiser, state: Mapping[str, np.ndarray]) -> "AdapterSet":
        if "adapter.meta" not in state:
            raise DenoiserError("State has no 'adapter.meta' entry")
        rank, scale = state["adapter.meta"]
        adapter = cls(base, int(rank), float(scale))
        for i in base.hidden_layers():
            for name, param in ((f"adapter.{i}.down", adapter.down[i]), (f"adapter.{i}.up", adapter.up[i])):
                if name not in state:
                    raise DenoiserError(f"State is missing '{name}'")
                value = np.asarray(state[name])
                if value.shape != param.shape:
                    raise DenoiserError(f"'{name}' has shape {value.shape}, expected {param.shape}")
                param.data = value.astype(param.data.dtype)
        return adapter


# --------------------------------------------------------------- analytic


class AnalyticDenoiser(Denoiser):
    """
    Optimal denoiser for N(mu_c, var_c I) data under each condition:
    ``sigma_t (z_t - alpha_t mu_c) / (alpha_t^2 var_c + sigma_t^2)``.
    """

    variant = "analytic"

    def __init__(
        self,
        schedule: NoiseSchedule,
        means: Mapping[int, np.ndarray],
        variances: Mapping[int, float],
        null_mean: np.ndarray,
        null_var: float,
    ):
        null_mean = np.atleast_1d(np.asarray(null_mean, dtype=np.float64))
        super().__init__(schedule, null_mean.shape[0], "analytic")
        if set(means) != set(variances):
            raise DenoiserError("Analytic means and variances must name the same conditions")
        self.means = {int(k): np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in means.items()}
        self.variances = {int(k): float(v) for k, v in variances.items()}
        self.null_mean = null_mean
        self.null_var = float(null_var)
        for k, mu in self.means.items():
            if mu.shape != null_mean.shape:
                raise ShapeError(f"Mean of condition {k} has shape {mu.shape}, expected {null_mean.shape}")
        for k, var in list(self.variances.items()) + [("null", self.null_var)]:
            if var < 0:
                raise DenoiserError(f"Variance of condition {k} is negative ({var})")

    def gaussian(self, condition: Condition):
        if condition.is_null:
            return self.null_mean, self.null_var
        if condition.id not in self.means:
            raise ConditionError(f"Unknown condition id {condition.id}; known {sorted(self.means)}")
        return self.means[condition.id], self.variances[condition.id]

    def state_vector(self, condition: Condition) -> np.ndarray:
        return self.gaussian(condition)[0].copy()

    def predict_noise(self, z_t, t, c, adapter=None) -> Tensor:
        if adapter is not None:
            raise DenoiserError("Analytic denoisers do not take adapters")
        z_t = gc.as_tensor(z_t)
        z = self._as_batch(z_t)
        if isinstance(c, LearnableEmbedding):
            if c.vector.shape != (self.data_dim,):
                raise ShapeError(f"Learnable mean shape {c.vector.shape} != ({self.data_dim},)")
            mean, var = c.vector, self.null_var
        else:
            mu, var = self.gaussian(c)
            mean = Tensor(mu, dtype=z.dtype)
        steps = self._timesteps(t, z.shape[0])
        alpha, sigma = self.schedule.coefficients(steps, 2, dtype=np.float64)
        denom = alpha**2 * var + sigma**2
        # sigma_t = 0 with a point mass leaves no noise to predict
        gain = np.divide(sigma, denom, out=np.zeros_like(denom), where=denom > 0)
        out = (z - mean * alpha.astype(z.dtype)) * gain.astype(z.dtype)
        self.tracker.add_forward()
        return out.reshape(z_t.shape)


# ------------------------------------------------------------- operations


Conditioning = Union[Condition, LearnableEmbedding]


def predict_noise(d: Denoiser, z_t, t, c: Conditioning, adapter: Optional[AdapterSet] = None) -> Tensor:
    return d.predict_noise(z_t, t, c, adapter=adapter)


def backward_through(d: Denoiser, loss: Tensor):
    """Backward pass whose graph runs through denoiser ``d``."""
    gc.backward(loss)
    d.tracker.add_backward()


def make_analytic(
    means: Mapping[int, Sequence[float]],
    variances: Mapping[int, float],
    null_mean: Sequence[float],
    null_var: float,
    schedule: Optional[NoiseSchedule] = None,
) -> AnalyticDenoiser:
    return AnalyticDenoiser(schedule or make_schedule(), means, variances, null_mean, null_var)


def attach_adapter(d: Denoiser, rank: int, scale: float = 0.5, seed: int = 0) -> AdapterSet:
    if not isinstance(d, NetworkDenoiser):
        raise DenoiserError(f"Adapters need a network denoiser, got the {d.variant} variant")
    adapter = AdapterSet(d, rank, scale, seed=seed)
    d.freeze()
    logger.info(f"Attached rank-{rank} adapters ({adapter.parameter_count()} parameters), base frozen")
    return adapter


def train_denoiser(
    d: Denoiser,
    data: np.ndarray,
    labels: np.ndarray,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 256,
    drop_prob: float = 0.1,
    seed: int = 0,
    optimizer: str = "adam",
    progress: bool = False,
    log_every: Optional[int] = None,
) -> List[float]:
    """
    Denoising score matching: minimise ||eps_phi(z_t; y, t) - eps||^2 with
    the label replaced by the null condition with probability ``drop_prob``.

    Returns the per-step loss curve.
    """
    if not isinstance(d, NetworkDenoiser):
        raise DenoiserError(f"Nothing to train on the {d.variant} variant")
    data = np.asarray(data)
    labels = np.asarray(labels, dtype=np.int64)
    if data.ndim != 2 or data.shape[1] != d.data_dim or len(data) == 0:
        raise ShapeError(f"Training data must be (N, {d.data_dim}) with N > 0, got {data.shape}")
    if labels.shape != (len(data),):
        raise ShapeError(f"Labels shape {labels.shape} does not match {len(data)} samples")
    if not 0.0 <= drop_prob < 1.0:
        raise DenoiserError(f"drop_prob must lie in [0, 1), got {drop_prob}")

    d.unfreeze()
    opt = make_optimizer(optimizer, d.parameters(), lr)
    log_every = log_every or max(steps // 10, 1)
    losses: List[float] = []
    for step in tqdm(range(steps), desc="train", disable=not progress):
        rng = keyed_rng(seed, 2, step)
        idx = rng.integers(0, len(data), size=batch_size)
        y = labels[idx].copy()
        y[rng.random(batch_size) < drop_prob] = d.null_index
        t = rng.integers(0, d.schedule.T, size=batch_size)
        eps = Tensor(rng.standard_normal((batch_size, d.data_dim)))
        z = add_noise(d.schedule, Tensor(data[idx]), t, eps)
        loss = gc.mse(d.predict_batch(z, t, y), eps)
        opt.zero_grad()
        backward_through(d, loss)
        opt.step()
        losses.append(loss.item())
        if (step + 1) % log_every == 0:
            logger.info(f"train step {step + 1}/{steps} loss={np.mean(losses[-log_every:]):.5f}")
    return losses

import math
from typing import Optional, Union

import numpy as np


class LodsError(Exception):
    """Base class for every error raised by lodslab."""


class ShapeError(LodsError, ValueError):
    pass


class ScheduleError(LodsError, ValueError):
    pass


class ConditionError(LodsError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the diagnostic readable
        return str(self.args[0]) if self.args else ""


class DenoiserError(LodsError, ValueError):
    pass


class PriorConfigError(LodsError, ValueError):
    pass


class DivergenceError(LodsError, RuntimeError):
    pass


class GeneratorError(LodsError, ValueError):
    pass


class OracleError(LodsError, ValueError):
    pass


class CheckpointError(LodsError, IOError):
    pass


class ConfigError(LodsError, ValueError):
    pass


class RecipeError(LodsError, RuntimeError):
    pass


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Counter-based random stream keyed by (run seed, step, draw index, ...).

    The same key always yields the same stream, independent of how many
    other streams were consumed before it.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ValueError(f"RNG keys must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def parse_guidance(value: Union[str, float, int, None]) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, str):
        text = value.strip().lower()
        if text in {"inf", "+inf", "infinity"}:
            return math.inf
        return float(text)
    return float(value)


def format_float(value: Optional[float]) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


def grad_norm(grad: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(grad, dtype=np.float64)))))


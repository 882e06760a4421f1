import logging
from typing import Tuple

import numpy as np

from lodslab.utils import ConfigError, keyed_rng

logger = logging.getLogger(__name__)

DATASET_KINDS = ("mixture2d", "shapes")
SHAPE_SIZE = 8


def mixture_modes(spread: float = 2.0) -> np.ndarray:
    """(class, mode, xy): class 0 on the main diagonal, class 1 on the anti-diagonal."""
    s = float(spread)
    return np.array([[[-s, -s], [s, s]], [[-s, s], [s, -s]]])


def mixture2d(n: int, seed: int = 0, spread: float = 2.0, mode_std: float = 0.3) -> Tuple[np.ndarray, np.ndarray]:
    rng = keyed_rng(seed, 10)
    labels = np.arange(n) % 2
    modes = rng.integers(0, 2, size=n)
    centers = mixture_modes(spread)[labels, modes]
    return centers + mode_std * rng.standard_normal((n, 2)), labels


def class_samples(label: int, n: int, seed: int = 0, spread: float = 2.0, mode_std: float = 0.3) -> np.ndarray:
    if label not in (0, 1):
        raise ConfigError(f"mixture2d has classes 0 and 1, got {label}")
    rng = keyed_rng(seed, 11, label)
    centers = mixture_modes(spread)[label, rng.integers(0, 2, size=n)]
    return centers + mode_std * rng.standard_normal((n, 2))


def _square(rng) -> np.ndarray:
    img = np.zeros((SHAPE_SIZE, SHAPE_SIZE))
    size = int(rng.integers(2, 5))
    r, c = rng.integers(0, SHAPE_SIZE - size + 1, size=2)
    img[r:r + size, c:c + size] = 1.0
    return img


def _cross(rng) -> np.ndarray:
    img = np.zeros((SHAPE_SIZE, SHAPE_SIZE))
    arm = int(rng.integers(1, 3))
    r, c = rng.integers(arm, SHAPE_SIZE - arm, size=2)
    img[r - arm:r + arm + 1, c] = 1.0
    img[r, c - arm:c + arm + 1] = 1.0
    return img


def shapes(n: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Flattened 8x8 images in [0, 1]: label 0 filled squares, label 1 crosses."""
    rng = keyed_rng(seed, 12)
    labels = np.arange(n) % 2
    images = np.stack([(_cross if y else _square)(rng).reshape(-1) for y in labels])
    return images, labels


def load_dataset(kind: str, n: int, seed: int = 0, spread: float = 2.0, mode_std: float = 0.3):
    if n < 1:
        raise ConfigError(f"Dataset needs at least one sample, got {n}")
    if kind == "mixture2d":
        data, labels = mixture2d(n, seed, spread, mode_std)
    elif kind == "shapes":
        data, labels = shapes(n, seed)
    else:
        raise ConfigError(f"Unknown dataset '{kind}', expected one of {DATASET_KINDS}")
    logger.info(f"Loaded {kind}: {data.shape[0]} samples of dimension {data.shape[1]}")
    return data, labels

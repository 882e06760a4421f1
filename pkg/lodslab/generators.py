"""Differentiable parameterizations x = g(theta): identity and a 2-D splat rasterizer."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from PIL import Image

from lodslab import gradcore as gc
from lodslab.gradcore import Tensor
from lodslab.utils import GeneratorError

logger = logging.getLogger(__name__)

GENERATOR_KINDS = ("identity", "splats")


class Generator:
    kind = "base"

    @property
    def theta_shape(self) -> Tuple[int, ...]:
        raise NotImplementedError

    @property
    def output_shape(self) -> Tuple[int, ...]:
        raise NotImplementedError

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.output_shape))

    def _check(self, theta) -> Tensor:
        if not isinstance(theta, Tensor):
            theta = Tensor(theta, dtype=np.float64)
        if theta.shape != self.theta_shape:
            raise GeneratorError(
                f"{self.kind}: theta shape {theta.shape} does not match layout {self.theta_shape}"
            )
        if not np.all(np.isfinite(theta.data)):
            raise GeneratorError(f"{self.kind}: theta contains non-finite values")
        return theta

    def render(self, theta) -> Tensor:
        raise NotImplementedError

    def pullback(self, theta, upstream) -> np.ndarray:
        """Vector-Jacobian product of ``render`` at ``theta``."""
        values = theta.data if isinstance(theta, Tensor) else theta
        theta = Tensor(np.array(values, dtype=np.float64), requires_grad=True, dtype=np.float64)
        x = self.render(theta)
        gc.backward(gc.dot_constant(x, np.asarray(upstream)))
        return theta.grad if theta.grad is not None else np.zeros_like(theta.data)

    def init_theta(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class IdentityGenerator(Generator):
    """x = theta; a batch of particles when ``shape`` is (P, D)."""

    kind = "identity"

    def __init__(self, shape: Sequence[int], init_scale: float = 1.0):
        self.shape = tuple(int(n) for n in shape)
        self.init_scale = float(init_scale)

    @property
    def theta_shape(self):
        return self.shape

    @property
    def output_shape(self):
        return self.shape

    @property
    def data_dim(self) -> int:
        return self.shape[-1]

    def render(self, theta) -> Tensor:
        return self._check(theta)

    def init_theta(self, rng: np.random.Generator) -> np.ndarray:
        return self.init_scale * rng.standard_normal(self.shape)


@dataclass
class SplatScene:
    centers: np.ndarray  # (K, 2) in image units
    log_scales: np.ndarray  # (K, 2)
    rotations: np.ndarray  # (K,) radians
    colors: np.ndarray  # (K, C) pre-sigmoid
    opacities: np.ndarray  # (K,) logits
    depths: np.ndarray  # (K,) larger is farther

    def __len__(self):
        return len(self.centers)


class SplatGenerator(Generator):
    """
    Anisotropic Gaussian splats alpha-composited back to front over a fixed
    background.

    theta is a (K, 7 + C) matrix, one row per splat::

        [cx, cy, log_sx, log_sy, rotation, color_1..color_C, opacity_logit, depth]

    The depth column only orders the splats; its gradient is always zero.
    """

    kind = "splats"

    def __init__(self, width: int = 16, height: int = 16, channels: int = 1, num_splats: int = 16,
                 background: Union[float, Sequence[float]] = 0.0, init_scale: float = 0.08):
        if channels not in (1, 3):
            raise GeneratorError(f"Splat images need 1 or 3 channels, got {channels}")
        if width < 1 or height < 1 or num_splats < 0:
            raise GeneratorError(f"Invalid splat layout {width}x{height}, K={num_splats}")
        self.width = int(width)
        self.height = int(height)
        self.channels = int(channels)
        self.num_splats = int(num_splats)
        self.init_scale = float(init_scale)
        self.background = np.broadcast_to(np.asarray(background, dtype=np.float64), (channels,)).copy()
        if np.any((self.background < 0) | (self.background > 1)):
            raise GeneratorError(f"Background {self.background} outside [0, 1]")
        ys, xs = np.meshgrid(
            (np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij"
        )
        self._px = xs.reshape(1, -1)
        self._py = ys.reshape(1, -1)

    @property
    def theta_shape(self):
        return (self.num_splats, 7 + self.channels)

    @property
    def output_shape(self):
        return (self.height, self.width, self.channels)

    def render(self, theta) -> Tensor:
        theta = self._check(theta)
        C = self.channels
        n_pix = self.width * self.height
        image = Tensor(np.broadcast_to(self.background, (n_pix, C)).copy(), dtype=theta.dtype)
        if self.num_splats == 0:
            return image.reshape(self.output_shape)

        def col(i):
            return theta[:, i].reshape(-1, 1)

        dx = Tensor(self._px, dtype=theta.dtype) - col(0)
        dy = Tensor(self._py, dtype=theta.dtype) - col(1)
        rot = col(4)
        c, s = gc.cos(rot), gc.sin(rot)
        u = c * dx + s * dy
        v = c * dy - s * dx
        inv_sx2 = gc.exp(gc.scale(col(2), -2.0))
        inv_sy2 = gc.exp(gc.scale(col(3), -2.0))
        falloff = gc.exp(gc.scale(u.square() * inv_sx2 + v.square() * inv_sy2, -0.5))
        alpha = gc.sigmoid(col(5 + C)) * falloff  # (K, P)
        colors = gc.sigmoid(theta[:, 5:5 + C])  # (K, C)

        for k in self.composite_order(theta.data):
            a = alpha[k].reshape(n_pix, 1)
            image = image * (1.0 - a) + a * colors[k].reshape(1, C)
        return image.reshape(self.output_shape)

    def composite_order(self, theta: np.ndarray) -> np.ndarray:
        """Farthest first; ties keep storage order."""
        return np.argsort(-theta[:, 6 + self.channels], kind="stable")

    def init_theta(self, rng: np.random.Generator) -> np.ndarray:
        K, C = self.num_splats, self.channels
        scene = SplatScene(
            centers=rng.uniform(0.0, 1.0, size=(K, 2)),
            log_scales=np.full((K, 2), math.log(self.init_scale)),
            rotations=np.zeros(K),
            colors=np.zeros((K, C)),
            opacities=np.full(K, -1.0),
            depths=rng.permutation(K).astype(np.float64) / max(K, 1),
        )
        return self.theta_from_scene(scene)

    def theta_from_scene(self, scene: SplatScene) -> np.ndarray:
        K = len(scene)
        if K != self.num_splats or scene.colors.shape != (K, self.channels):
            raise GeneratorError(
                f"Scene with {K} splats and colors {scene.colors.shape} does not fit layout {self.theta_shape}"
            )
        return np.concatenate(
            [
                scene.centers,
                scene.log_scales,
                scene.rotations[:, None],
                scene.colors,
                scene.opacities[:, None],
                scene.depths[:, None],
            ],
            axis=1,
        ).astype(np.float64)

    def scene_from_theta(self, theta) -> SplatScene:
        theta = self._check(theta).data
        C = self.channels
        return SplatScene(
            centers=theta[:, 0:2].copy(),
            log_scales=theta[:, 2:4].copy(),
            rotations=theta[:, 4].copy(),
            colors=theta[:, 5:5 + C].copy(),
            opacities=theta[:, 5 + C].copy(),
            depths=theta[:, 6 + C].copy(),
        )


def make_generator(kind: str, **kwargs) -> Generator:
    if kind == "identity":
        return IdentityGenerator(**kwargs)
    if kind == "splats":
        return SplatGenerator(**kwargs)
    raise GeneratorError(f"Unknown generator '{kind}', expected one of {GENERATOR_KINDS}")


def render(g: Generator, theta) -> Tensor:
    return g.render(theta)


def pullback(g: Generator, theta, upstream) -> np.ndarray:
    return g.pullback(theta, upstream)


def save_image(image, path: Union[str, Path]) -> Path:
    """Write an (H, W, C) image in [0, 1] as PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise GeneratorError(f"Cannot export image of shape {image.shape}")
    path = Path(path).with_suffix(".pgm" if image.shape[2] == 1 else ".ppm")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(pixels[..., 0] if image.shape[2] == 1 else pixels).save(path, format="PPM")
    logger.debug(f"Saved {image.shape[1]}x{image.shape[0]} image to {path}")
    return path

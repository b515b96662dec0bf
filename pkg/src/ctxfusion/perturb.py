"""Gaussian blur of the bounding box (or whole image) and the FGSM attack."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Literal, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DimensionError
from .synthgen import LabeledImage
from .tensor import Tensor, backward, softmax_cross_entropy


@dataclass(frozen=True)
class Blur:
    sigma: float
    region: Literal["bbox", "whole"] = "bbox"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"blur sigma must be positive, got {self.sigma}")
        if self.region not in ("bbox", "whole"):
            raise ConfigurationError(f"unknown blur region {self.region!r}")

    @property
    def kind(self) -> str:
        return f"blur_{self.region}"

    @property
    def level(self) -> float:
        return self.sigma


@dataclass(frozen=True)
class Fgsm:
    epsilon: float
    source: Any = None  # model used for the gradient; None means the evaluated model

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError(f"fgsm epsilon must be non-negative, got {self.epsilon}")

    kind = "fgsm"

    @property
    def level(self) -> float:
        return self.epsilon


PerturbationSpec = Union[Blur, Fgsm]


def kernel_radius(sigma: float) -> int:
    return int(math.ceil(3.0 * sigma))


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ConfigurationError("sigma must be positive")
    r = kernel_radius(sigma)
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-d * d / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Square ``(2r+1)x(2r+1)`` kernel, ``r = ceil(3*sigma)``, summing to 1."""
    if not sigma > 0:
        raise ConfigurationError("sigma must be positive")
    r = kernel_radius(sigma)
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_axis(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = (len(k) - 1) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="edge")
    n = x.shape[axis]
    out = np.zeros_like(x)
    for i, w in enumerate(k):
        out += w * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def gaussian_filter(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Blur the last two axes with edge replication, as two 1-D passes.

    The normalized square kernel factorizes into the outer product of two
    normalized 1-D kernels, so this equals a direct 2-D correlation.
    """
    k = gaussian_kernel_1d(sigma)
    return _correlate_axis(_correlate_axis(pixels, k, -1), k, -2)


def blur_pixels(pixels: np.ndarray, sigma: float, region: str = "bbox",
                bbox: tuple[int, int, int, int] | None = None, clamp: bool = True) -> np.ndarray:
    """Blur ``pixels[...,H,W]``; with ``region="bbox"`` only the box is written."""
    blurred = gaussian_filter(pixels, sigma)
    if region == "whole":
        out = blurred
    elif region == "bbox":
        if bbox is None:
            raise ConfigurationError("bbox region needs a bounding box")
        x0, y0, x1, y1 = bbox
        out = pixels.copy()
        out[..., y0:y1, x0:x1] = blurred[..., y0:y1, x0:x1]
    else:
        raise ConfigurationError(f"unknown blur region {region!r}")
    return np.clip(out, 0.0, 1.0) if clamp else out


def blur(image: LabeledImage, sigma: float, region: str = "bbox") -> LabeledImage:
    return image.with_pixels(blur_pixels(image.pixels, sigma, region, image.bbox))


def blur_batch(x: np.ndarray, bboxes: Sequence[tuple[int, int, int, int]], sigma: float,
               region: str = "bbox") -> np.ndarray:
    """Blur a stacked batch ``[N,3,H,W]``; boxes are applied per image."""
    blurred = np.clip(gaussian_filter(x, sigma), 0.0, 1.0)
    if region == "whole":
        return blurred
    out = x.copy()
    for i, (x0, y0, x1, y1) in enumerate(bboxes):
        out[i, :, y0:y1, x0:x1] = blurred[i, :, y0:y1, x0:x1]
    return out


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of each sample's own cross-entropy loss w.r.t. its pixels."""
    xt = Tensor(x, requires_grad=True)
    loss = softmax_cross_entropy(model.forward(xt), y, reduction="none").sum()
    backward(loss)
    return xt.grad


def fgsm_batch(model, x: np.ndarray, y: np.ndarray, epsilon: float, batch_size: int = 128) -> np.ndarray:
    """``clamp(x + eps * sign(grad_x J(theta, x, y)), 0, 1)`` for a stacked batch."""
    if epsilon < 0:
        raise ConfigurationError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"fgsm expects [N,C,H,W] images, got {x.shape}")
    if epsilon == 0:
        return x.copy()
    out = np.empty_like(x)
    for lo in range(0, len(x), batch_size):
        sl = slice(lo, lo + batch_size)
        g = input_gradient(model, x[sl], np.asarray(y)[sl])
        out[sl] = np.clip(x[sl] + epsilon * np.sign(g), 0.0, 1.0)
    return out


def fgsm(model, image: LabeledImage, epsilon: float) -> LabeledImage:
    adv = fgsm_batch(model, image.pixels[None], np.array([image.class_id]), epsilon)
    return image.with_pixels(adv[0])


def apply_batch(spec: PerturbationSpec | None, x: np.ndarray, y: np.ndarray,
                bboxes: Sequence[tuple[int, int, int, int]], model=None) -> np.ndarray:
    if spec is None:
        return x
    if isinstance(spec, Blur):
        return blur_batch(x, bboxes, spec.sigma, spec.region)
    if isinstance(spec, Fgsm):
        source = spec.source if spec.source is not None else model
        if source is None:
            raise ConfigurationError("fgsm needs a source model")
        return fgsm_batch(source, x, y, spec.epsilon)
    raise ConfigurationError(f"unknown perturbation {spec!r}")

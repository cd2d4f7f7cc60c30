"""Stochastic augmentation used for the invariance branch.

The policy is an incremental ladder: level ``k`` uses the first ``k`` ops of
``LADDER``.  Randomness comes only from the ``numpy.random.Generator`` passed
in, so two calls with equally seeded generators give identical views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from essl.groups import get_group

LADDER = (
    "random_resized_crop",
    "horizontal_flip",
    "color_jitter",
    "grayscale",
    "gaussian_blur",
    "random_rotation",
    "vertical_flip",
)
MAX_LEVEL = len(LADDER)

# augmentation-only transformation sets usable in ``prepend``
EXTRA_PREPEND = ("c4v", "rolling_translations", "mirrors")


def _default_probabilities():
    return {
        "horizontal_flip": 0.5,
        "color_jitter": 0.8,
        "grayscale": 0.2,
        "gaussian_blur": 0.2,
        "random_rotation": 1.0,
        "vertical_flip": 0.5,
        "solarize": 0.2,
    }


@dataclass(frozen=True)
class AugmentationPolicy:
    level: int = 4
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    crop_size: int = 32
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    probabilities: dict[str, float] = field(default_factory=_default_probabilities)
    rotation_degrees: float = 30.0
    solarize: bool = False
    # transformation sets applied first, with probability 1, one uniform element each
    prepend: tuple[str, ...] = ()
    s_max: float = 10.0

    def __post_init__(self):
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"augmentation level must be in [0, {MAX_LEVEL}], got {self.level}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"invalid crop_scale {self.crop_scale}")
        unknown = set(self.probabilities) - set(_default_probabilities())
        if unknown:
            raise ValueError(f"unknown augmentation ops in probabilities: {sorted(unknown)}")

    @property
    def ops(self) -> tuple[str, ...]:
        ops = LADDER[: self.level]
        if self.solarize:
            ops = ops + ("solarize",)
        return ops

    def prob(self, op: str) -> float:
        return self.probabilities.get(op, _default_probabilities()[op])


def random_resized_crop_params(h, w, scale, ratio, rng):
    """Same rejection sampler as torchvision's RandomResizedCrop, driven by ``rng``."""
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback to a central crop
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _color_jitter(x, strength, rng):
    b, c, s, hue = strength
    rgb = x.shape[-3] == 3
    fns = []
    if b > 0:
        fns.append(lambda t, f=rng.uniform(max(0.0, 1 - b), 1 + b): TF.adjust_brightness(t, f))
    if c > 0:
        fns.append(lambda t, f=rng.uniform(max(0.0, 1 - c), 1 + c): TF.adjust_contrast(t, f))
    if s > 0 and rgb:
        fns.append(lambda t, f=rng.uniform(max(0.0, 1 - s), 1 + s): TF.adjust_saturation(t, f))
    if hue > 0 and rgb:
        fns.append(lambda t, f=rng.uniform(-hue, hue): TF.adjust_hue(t, f))
    for i in rng.permutation(len(fns)):
        x = fns[i](x)
    return x


def _prepend(x, name, policy, rng):
    if name == "c4v":
        x = torch.rot90(x, int(rng.integers(4)), dims=(-2, -1))
        return torch.flip(x, dims=(-1,)) if rng.random() < 0.5 else x
    if name == "rolling_translations":
        dy, dx = int(rng.integers(x.shape[-2])), int(rng.integers(x.shape[-1]))
        return torch.roll(x, shifts=(dy, dx), dims=(-2, -1))
    if name == "mirrors":
        if rng.random() < 0.5:
            x = torch.flip(x, dims=(-1,))
        if rng.random() < 0.5:
            x = torch.flip(x, dims=(-2,))
        return x
    group = get_group(name)
    g = group.sample(rng, policy.s_max if group.name == "scaling" else None)
    return group.apply(g, x)


def augment(x: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    """One stochastic view of a single (C, H, W) float image in [0, 1]."""
    if x.ndim != 3:
        raise ValueError(f"augment expects a (C, H, W) image, got shape {tuple(x.shape)}")
    for name in policy.prepend:
        x = _prepend(x, name, policy, rng)
    for op in policy.ops:
        if op == "random_resized_crop":
            top, left, ch, cw = random_resized_crop_params(
                x.shape[-2], x.shape[-1], policy.crop_scale, policy.crop_ratio, rng
            )
            x = TF.resized_crop(x, top, left, ch, cw, [policy.crop_size, policy.crop_size], antialias=True)
            continue
        # draw the coin even for ops we then skip so streams stay aligned across levels
        if rng.random() >= policy.prob(op):
            continue
        if op == "horizontal_flip":
            x = TF.horizontal_flip(x)
        elif op == "color_jitter":
            x = _color_jitter(x, policy.jitter_strength, rng)
        elif op == "grayscale":
            if x.shape[-3] == 3:
                x = TF.rgb_to_grayscale(x, num_output_channels=3)
        elif op == "gaussian_blur":
            k = max(3, int(0.1 * x.shape[-1]) // 2 * 2 + 1)
            sigma = float(rng.uniform(0.1, 2.0))
            x = TF.gaussian_blur(x, kernel_size=[k, k], sigma=[sigma, sigma])
        elif op == "random_rotation":
            angle = float(rng.uniform(-policy.rotation_degrees, policy.rotation_degrees))
            x = TF.rotate(x, angle, interpolation=TF.InterpolationMode.BILINEAR)
        elif op == "vertical_flip":
            x = TF.vertical_flip(x)
        elif op == "solarize":
            x = TF.solarize(x, threshold=0.5)
    return x


def augment_batch(x: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    if policy.level == 0 and not policy.prepend and not policy.solarize:
        return x
    return torch.stack([augment(img, policy, rng) for img in x])


def resize_batch(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return TF.resize(x, [size, size], antialias=True)

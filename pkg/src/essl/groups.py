"""Transformation sets acting on image tensors.

Every set is addressed by name (``four_fold_rotations``, ``jigsaw_2x2``, ...)
and exposes composition, inverses and an action on tensors whose last two
dimensions are (H, W).  Finite sets index their elements ``0 .. order-1`` with
index 0 the identity; the scaling group carries a positive real instead.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

INFINITE = math.inf

BLUR_KERNEL_SIZES = (0, 5, 9, 15)
JIGSAW_PERMUTATIONS = tuple(itertools.permutations(range(4)))


class NotAGroupError(ValueError):
    """Raised when group-only operations are requested on a non-group set."""


class UnknownGroupError(KeyError):
    pass


@dataclass(frozen=True)
class GroupElement:
    group_id: str
    index: int | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.index is None and self.scale is None:
            raise ValueError("GroupElement needs an index or a scale")
        if self.scale is not None and not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


class TransformationGroup:
    """A named set of invertible (or, for blurs, merely indexed) transforms."""

    name: str = ""
    order: float = 0
    is_group: bool = True
    tile_based: bool = False

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, order={self.order})"

    @property
    def is_finite(self) -> bool:
        return self.order != INFINITE

    def element(self, index: int) -> GroupElement:
        if not 0 <= index < self.order:
            raise ValueError(f"index {index} out of range for {self.name} (order {self.order})")
        return GroupElement(self.name, index=int(index))

    def elements(self) -> list[GroupElement]:
        if not self.is_finite:
            raise ValueError(f"{self.name} has infinitely many elements")
        return [self.element(i) for i in range(int(self.order))]

    def identity(self) -> GroupElement:
        return self.element(0)

    def _check(self, g: GroupElement):
        if g.group_id != self.name:
            raise ValueError(f"element of {g.group_id!r} used with group {self.name!r}")
        if g.index is None or not 0 <= g.index < self.order:
            raise ValueError(f"invalid element {g} for {self.name}")

    def _check_shape(self, x: torch.Tensor):
        if x.ndim < 3:
            raise ValueError(f"expected (..., C, H, W) tensor, got shape {tuple(x.shape)}")
        if self.tile_based and (x.shape[-1] % 2 or x.shape[-2] % 2):
            raise ValueError(f"{self.name} needs even H and W, got {tuple(x.shape[-2:])}")

    def apply(self, g: GroupElement, x: torch.Tensor) -> torch.Tensor:
        self._check(g)
        self._check_shape(x)
        if g.index == 0:
            return x
        return self._act(g.index, x)

    def _act(self, index: int, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def compose_index(self, i: int, j: int) -> int:
        """Index of the element acting as ``i`` after ``j``."""
        raise NotImplementedError

    def compose(self, g: GroupElement, h: GroupElement) -> GroupElement:
        if not self.is_group:
            raise NotAGroupError(f"{self.name} is not closed under composition")
        self._check(g)
        self._check(h)
        return self.element(self.compose_index(g.index, h.index))

    def inverse(self, g: GroupElement) -> GroupElement:
        if not self.is_group:
            raise NotAGroupError(f"{self.name} has no inverses inside the set")
        self._check(g)
        e = 0
        for k in range(int(self.order)):
            if self.compose_index(g.index, k) == e:
                return self.element(k)
        raise AssertionError("unreachable for a finite group")

    def sample(self, rng: np.random.Generator, s_max: float | None = None) -> GroupElement:
        return self.element(int(rng.integers(self.order)))

    def apply_indices(self, indices, x: torch.Tensor) -> torch.Tensor:
        """Apply element ``indices[i]`` to ``x[i]`` for a batch ``x`` of shape (N, C, H, W)."""
        indices = torch.as_tensor(indices).long()
        if indices.shape[0] != x.shape[0]:
            raise ValueError("one element index per batch row is required")
        self._check_shape(x)
        out = x.clone()
        for k in torch.unique(indices).tolist():
            if k == 0:
                continue
            mask = indices == k
            out[mask] = self._act(int(k), x[mask])
        return out


class FourFoldRotations(TransformationGroup):
    name = "four_fold_rotations"
    order = 4

    def _act(self, index, x):
        # counter-clockwise quarter turns on the (H, W) axes
        return torch.rot90(x, index, dims=(-2, -1))

    def compose_index(self, i, j):
        return (i + j) % 4


class _Flip(TransformationGroup):
    order = 2
    dim = -1

    def _act(self, index, x):
        return torch.flip(x, dims=(self.dim,))

    def compose_index(self, i, j):
        return i ^ j


class HorizontalFlips(_Flip):
    name = "horizontal_flips"
    dim = -1


class VerticalFlips(_Flip):
    name = "vertical_flips"
    dim = -2


class Jigsaw2x2(TransformationGroup):
    """Permutations of the four quadrants, tiles enumerated row-major.

    Element ``p`` places input tile ``p[i]`` at output position ``i``.
    """

    name = "jigsaw_2x2"
    order = 24
    tile_based = True

    def _act(self, index, x):
        perm = JIGSAW_PERMUTATIONS[index]
        h, w = x.shape[-2] // 2, x.shape[-1] // 2
        tiles = [x[..., :h, :w], x[..., :h, w:], x[..., h:, :w], x[..., h:, w:]]
        t = [tiles[perm[i]] for i in range(4)]
        top = torch.cat([t[0], t[1]], dim=-1)
        bottom = torch.cat([t[2], t[3]], dim=-1)
        return torch.cat([top, bottom], dim=-2)

    def compose_index(self, i, j):
        p, q = JIGSAW_PERMUTATIONS[i], JIGSAW_PERMUTATIONS[j]
        return _jigsaw_lookup()[tuple(q[p[k]] for k in range(4))]


@lru_cache(maxsize=None)
def _jigsaw_lookup():
    return {perm: k for k, perm in enumerate(JIGSAW_PERMUTATIONS)}


class FourFoldTranslations(TransformationGroup):
    """Klein four-group {e, h, v, hv} of half-cell rolling translations.

    Bit 0 of the index is the horizontal half shift, bit 1 the vertical one.
    """

    name = "four_fold_translations"
    order = 4
    tile_based = True

    def _act(self, index, x):
        shifts, dims = [], []
        if index & 1:
            shifts.append(x.shape[-1] // 2)
            dims.append(-1)
        if index & 2:
            shifts.append(x.shape[-2] // 2)
            dims.append(-2)
        return torch.roll(x, shifts=shifts, dims=dims)

    def compose_index(self, i, j):
        return i ^ j


class ColorInversions(TransformationGroup):
    name = "color_inversions"
    order = 2

    def __init__(self, max_value: float = 1.0):
        self.max_value = max_value

    def _act(self, index, x):
        return self.max_value - x

    def compose_index(self, i, j):
        return i ^ j


class GaussianBlurLevels(TransformationGroup):
    """Four blur strengths; level 0 is the identity.  Not closed under composition."""

    name = "gaussian_blur_levels"
    order = 4
    is_group = False

    def _act(self, index, x):
        k = BLUR_KERNEL_SIZES[index]
        # torchvision's default sigma for a given kernel size
        return TF.gaussian_blur(x, kernel_size=[k, k])


class GrayscaleSet(TransformationGroup):
    """{identity, grayscale}; grayscale is not invertible so this is not a group."""

    name = "grayscale"
    order = 2
    is_group = False

    def _act(self, index, x):
        if x.shape[-3] == 1:
            return x
        return TF.rgb_to_grayscale(x, num_output_channels=x.shape[-3])


class Scaling(TransformationGroup):
    """Positive reals acting multiplicatively on raw pixel values."""

    name = "scaling"
    order = INFINITE

    def element(self, scale: float) -> GroupElement:
        return GroupElement(self.name, scale=float(scale))

    def identity(self):
        return self.element(1.0)

    def _check(self, g):
        if g.group_id != self.name or g.scale is None:
            raise ValueError(f"invalid element {g} for {self.name}")

    def apply(self, g, x):
        self._check(g)
        self._check_shape(x)
        if g.scale == 1.0:
            return x
        return x * g.scale

    def compose(self, g, h):
        self._check(g)
        self._check(h)
        return self.element(g.scale * h.scale)

    def inverse(self, g):
        self._check(g)
        return self.element(1.0 / g.scale)

    def sample(self, rng, s_max=None):
        if s_max is None or not s_max > 1:
            raise ValueError(f"scaling needs s_max > 1, got {s_max}")
        # 1 - U[0,1) lies in (0, 1], so s lies in (1, s_max]
        s = 1.0 + (1.0 - rng.random()) * (s_max - 1.0)
        if rng.random() < 0.5:
            s = 1.0 / s
        return self.element(s)

    def apply_scales(self, scales, x):
        scales = torch.as_tensor(scales, dtype=x.dtype)
        return x * scales.view(-1, *([1] * (x.ndim - 1)))


_REGISTRY: dict[str, TransformationGroup] = {
    g.name: g
    for g in (
        FourFoldRotations(),
        HorizontalFlips(),
        VerticalFlips(),
        Jigsaw2x2(),
        FourFoldTranslations(),
        ColorInversions(),
        GaussianBlurLevels(),
        GrayscaleSet(),
        Scaling(),
    )
}

GROUP_NAMES = tuple(_REGISTRY)


def get_group(name: str | TransformationGroup) -> TransformationGroup:
    if isinstance(name, TransformationGroup):
        return name
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownGroupError(f"unknown transformation group {name!r}; known: {', '.join(GROUP_NAMES)}")


def apply(g: GroupElement, x: torch.Tensor) -> torch.Tensor:
    return get_group(g.group_id).apply(g, x)


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    if g.group_id != h.group_id:
        raise ValueError(f"cannot compose elements of {g.group_id!r} and {h.group_id!r}")
    return get_group(g.group_id).compose(g, h)


def inverse(g: GroupElement) -> GroupElement:
    return get_group(g.group_id).inverse(g)


def sample(group, rng: np.random.Generator, s_max: float | None = None) -> GroupElement:
    return get_group(group).sample(rng, s_max)


def gpm_rotation_class(g: GroupElement) -> int:
    """Binary class of a quarter turn: 1 for +-pi/2 (breaks a horizontal mirror), 0 for 0 and pi."""
    if g.group_id != FourFoldRotations.name:
        raise ValueError(f"gpm_rotation_class needs a four_fold_rotations element, got {g.group_id!r}")
    return int(g.index % 2)

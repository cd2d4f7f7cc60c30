import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from essl.augment import LADDER, MAX_LEVEL, AugmentationPolicy, augment, augment_batch, random_resized_crop_params


def _img(seed=0, size=32):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


def test_ladder_order():
    assert LADDER == ("random_resized_crop", "horizontal_flip", "color_jitter", "grayscale", "gaussian_blur",
                      "random_rotation", "vertical_flip")
    assert MAX_LEVEL == 7


def test_levels_are_incremental():
    for k in range(1, MAX_LEVEL + 1):
        prev, cur = AugmentationPolicy(level=k - 1).ops, AugmentationPolicy(level=k).ops
        assert cur[:-1] == prev and len(cur) == len(prev) + 1


def test_default_probabilities():
    p = AugmentationPolicy()
    assert (p.prob("horizontal_flip"), p.prob("color_jitter"), p.prob("grayscale"), p.prob("gaussian_blur"),
            p.prob("vertical_flip")) == (0.5, 0.8, 0.2, 0.2, 0.5)
    assert p.rotation_degrees == 30.0 and p.crop_scale == (0.2, 1.0)
    assert p.jitter_strength == (0.4, 0.4, 0.4, 0.1)


def test_level_zero_is_identity(rng):
    x = _img()
    assert torch.equal(augment(x, AugmentationPolicy(level=0), rng), x)


def test_solarize_is_optional_extra():
    assert "solarize" not in AugmentationPolicy(level=7).ops
    assert AugmentationPolicy(level=7, solarize=True).ops[-1] == "solarize"


def test_invalid_level():
    with pytest.raises(ValueError):
        AugmentationPolicy(level=8)
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_scale=(0.5, 0.2))


def test_level4_two_views_differ():
    x = _img()
    rng = np.random.default_rng(3)
    pol = AugmentationPolicy(level=4)
    sums = [augment(x, pol, rng).sum().item() for _ in range(20)]
    assert len(set(sums)) == 20


def test_output_shape_and_range(rng):
    x = _img()
    for level in range(MAX_LEVEL + 1):
        out = augment(x, AugmentationPolicy(level=level, crop_size=16), rng)
        expected = 16 if level >= 1 else 32
        assert out.shape == (3, expected, expected)
        assert out.min() >= -1e-6 and out.max() <= 1 + 1e-6


def test_prepend_applies_group_always():
    x = _img()
    pol = AugmentationPolicy(level=0, prepend=("color_inversions",))
    outs = [augment(x, pol, np.random.default_rng(s)) for s in range(30)]
    assert any(torch.equal(o, 1 - x) for o in outs) and any(torch.equal(o, x) for o in outs)
    assert all(torch.equal(o, x) or torch.equal(o, 1 - x) for o in outs)


def test_crop_params_within_bounds(rng):
    for _ in range(200):
        top, left, h, w = random_resized_crop_params(32, 32, (0.2, 1.0), (3 / 4, 4 / 3), rng)
        assert 0 <= top and 0 <= left and top + h <= 32 and left + w <= 32 and h > 0 and w > 0


@given(st.integers(0, MAX_LEVEL), st.integers(0, 2**31))
def test_augment_deterministic_given_seed(level, seed):
    x = _img(1, 16)
    pol = AugmentationPolicy(level=level, crop_size=16)
    a = augment(x, pol, np.random.default_rng(seed))
    b = augment(x, pol, np.random.default_rng(seed))
    assert torch.equal(a, b)


def test_batch_augmentation_single_channel(rng):
    cells = torch.rand(4, 1, 32, 32)
    out = augment_batch(cells, AugmentationPolicy(level=7), rng)
    assert out.shape == (4, 1, 32, 32)


def test_augment_rejects_batch():
    with pytest.raises(ValueError):
        augment(torch.rand(2, 3, 8, 8), AugmentationPolicy(), np.random.default_rng(0))


def test_policy_is_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        AugmentationPolicy().level = 3

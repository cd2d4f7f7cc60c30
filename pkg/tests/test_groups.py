import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from essl import groups as G
from essl.groups import GROUP_NAMES, NotAGroupError, UnknownGroupError, get_group

FINITE_GROUPS = [n for n in GROUP_NAMES if get_group(n).is_finite and get_group(n).is_group]


def _img(seed=0, shape=(2, 3, 8, 8)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_six_finite_groups_registered():
    assert sorted(FINITE_GROUPS) == sorted([
        "four_fold_rotations", "horizontal_flips", "vertical_flips", "jigsaw_2x2", "four_fold_translations",
        "color_inversions",
    ])


@pytest.mark.parametrize("name", FINITE_GROUPS)
def test_group_axioms_exhaustive(name):
    g = get_group(name)
    n = int(g.order)
    idx = range(n)
    table = [[g.compose_index(i, j) for j in idx] for i in idx]
    # closure
    assert all(0 <= table[i][j] < n for i in idx for j in idx)
    # identity
    assert all(table[0][j] == j and table[j][0] == j for j in idx)
    # inverses
    for i in idx:
        inv = g.inverse(g.element(i)).index
        assert table[i][inv] == 0 and table[inv][i] == 0
    # associativity
    for a, b, c in itertools.product(idx, repeat=3):
        assert table[table[a][b]][c] == table[a][table[b][c]]


@pytest.mark.parametrize("name", FINITE_GROUPS)
def test_action_is_homomorphism(name):
    g = get_group(name)
    x = _img()
    for i, j in itertools.product(range(int(g.order)), repeat=2):
        gi, gj = g.element(i), g.element(j)
        assert torch.equal(g.apply(g.compose(gi, gj), x), g.apply(gi, g.apply(gj, x)))


@pytest.mark.parametrize("name", FINITE_GROUPS)
def test_elements_act_distinctly(name):
    g = get_group(name)
    x = _img()
    outs = [g.apply(e, x) for e in g.elements()]
    for a, b in itertools.combinations(outs, 2):
        assert not torch.equal(a, b)


def test_rotation_is_counter_clockwise():
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    out = get_group("four_fold_rotations").apply(G.FourFoldRotations().element(1), x)
    assert out.tolist() == [[[2.0, 4.0], [1.0, 3.0]]]


def test_jigsaw_element_layout():
    g = get_group("jigsaw_2x2")
    x = torch.arange(16.0).reshape(1, 4, 4)
    p = G.JIGSAW_PERMUTATIONS.index((3, 2, 1, 0))
    out = g.apply(g.element(p), x)
    # tile order reversed: bottom-right quadrant moves to top-left
    assert out[0, :2, :2].tolist() == x[0, 2:, 2:].tolist()
    assert out[0, 2:, 2:].tolist() == x[0, :2, :2].tolist()


def test_klein_translations_are_half_rolls():
    g = get_group("four_fold_translations")
    x = _img()
    assert torch.equal(g.apply(g.element(1), x), torch.roll(x, 4, dims=-1))
    assert torch.equal(g.apply(g.element(2), x), torch.roll(x, 4, dims=-2))
    assert all(g.compose_index(i, i) == 0 for i in range(4))


def test_tile_groups_reject_odd_sizes():
    for name in ("jigsaw_2x2", "four_fold_translations"):
        g = get_group(name)
        with pytest.raises(ValueError):
            g.apply(g.element(1), torch.rand(1, 3, 7, 8))


def test_blur_levels_rejected_as_group():
    blur = get_group("gaussian_blur_levels")
    assert not blur.is_group
    with pytest.raises(NotAGroupError):
        blur.compose(blur.element(1), blur.element(2))
    with pytest.raises(NotAGroupError):
        blur.inverse(blur.element(1))
    # two weak blurs are not any single level of the set
    x = _img(shape=(1, 3, 32, 32)).float()
    twice = blur.apply(blur.element(1), blur.apply(blur.element(1), x))
    assert not any(torch.allclose(twice, blur.apply(e, x), atol=1e-6) for e in blur.elements())


def test_blur_level_zero_is_identity():
    blur = get_group("gaussian_blur_levels")
    x = _img()
    assert torch.equal(blur.apply(blur.element(0), x), x)


def test_unknown_group():
    with pytest.raises(UnknownGroupError):
        get_group("shear")


def test_elements_of_other_group_rejected():
    with pytest.raises(ValueError):
        get_group("four_fold_rotations").apply(get_group("horizontal_flips").element(1), _img())
    with pytest.raises(ValueError):
        G.compose(get_group("four_fold_rotations").element(1), get_group("horizontal_flips").element(1))


def test_gpm_rotation_class():
    rot = get_group("four_fold_rotations")
    assert [G.gpm_rotation_class(rot.element(i)) for i in range(4)] == [0, 1, 0, 1]
    with pytest.raises(ValueError):
        G.gpm_rotation_class(get_group("horizontal_flips").element(1))


def test_apply_indices_matches_per_row():
    g = get_group("jigsaw_2x2")
    x = _img(shape=(24, 3, 8, 8))
    idx = torch.arange(24)
    out = g.apply_indices(idx, x)
    for i in range(24):
        assert torch.equal(out[i], g.apply(g.element(i), x[i]))


# scaling --------------------------------------------------------------------


def test_scaling_sample_range(rng):
    s = get_group("scaling")
    vals = np.array([s.sample(rng, 10.0).scale for _ in range(4000)])
    assert vals.min() > 0.1 - 1e-12 and vals.max() <= 10.0
    up = vals[vals > 1]
    assert 0.45 < len(up) / len(vals) < 0.55
    assert np.all(vals != 1.0)


def test_scaling_needs_s_max(rng):
    with pytest.raises(ValueError):
        get_group("scaling").sample(rng, None)


@given(st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_scaling_group_laws(a, b):
    s = get_group("scaling")
    ga, gb = s.element(a), s.element(b)
    assert s.compose(ga, gb).scale == pytest.approx(a * b, rel=1e-12)
    assert s.compose(ga, s.inverse(ga)).scale == pytest.approx(1.0, rel=1e-12)
    x = _img(shape=(1, 1, 4, 4))
    torch.testing.assert_close(s.apply(s.compose(ga, gb), x), s.apply(ga, s.apply(gb, x)), rtol=1e-12, atol=0)


def test_scaling_rejects_nonpositive():
    with pytest.raises(ValueError):
        get_group("scaling").element(0.0)


# properties -------------------------------------------------------------------


@given(st.sampled_from(FINITE_GROUPS), st.data())
def test_inverse_undoes_action(name, data):
    g = get_group(name)
    i = data.draw(st.integers(0, int(g.order) - 1))
    seed = data.draw(st.integers(0, 2**16))
    x = _img(seed, (1, 3, 6, 6))
    e = g.element(i)
    assert torch.equal(g.apply(g.inverse(e), g.apply(e, x)), x)


@given(st.sampled_from(FINITE_GROUPS), st.data())
def test_sampling_is_uniform_and_seeded(name, data):
    g = get_group(name)
    seed = data.draw(st.integers(0, 2**32 - 1))
    a = [g.sample(np.random.default_rng(seed)).index for _ in range(3)]
    b = [g.sample(np.random.default_rng(seed)).index for _ in range(3)]
    assert a == b
    assert all(0 <= k < g.order for k in a)


def test_rotation_sampling_frequencies():
    g = get_group("four_fold_rotations")
    rng = np.random.default_rng(7)
    counts = np.bincount([g.sample(rng).index for _ in range(100_000)], minlength=4) / 100_000
    assert np.all(np.abs(counts - 0.25) < 0.01)


def test_jigsaw_sampling_chi_square():
    g = get_group("jigsaw_2x2")
    rng = np.random.default_rng(11)
    n = 24_000
    counts = np.bincount([g.sample(rng).index for _ in range(n)], minlength=24)
    chi2 = ((counts - n / 24) ** 2 / (n / 24)).sum()
    # 99.9% quantile of chi-square with 23 degrees of freedom
    assert chi2 < 49.73


def test_identity_is_bitwise_noop():
    x = _img()
    for name in GROUP_NAMES:
        g = get_group(name)
        assert g.apply(g.identity(), x) is x or torch.equal(g.apply(g.identity(), x), x)


def test_inverse_examples():
    rot = get_group("four_fold_rotations")
    assert rot.inverse(rot.element(1)).index == 3
    flip = get_group("horizontal_flips")
    assert flip.inverse(flip.element(1)).index == 1
    assert get_group("scaling").inverse(get_group("scaling").element(4.0)).scale == 0.25


def test_blur_kernel_sizes():
    blur = get_group("gaussian_blur_levels")
    import torchvision.transforms.v2.functional as TF

    x = _img(shape=(1, 3, 32, 32)).float()
    for level, k in zip(range(1, 4), (5, 9, 15)):
        assert torch.equal(blur.apply(blur.element(level), x), TF.gaussian_blur(x, kernel_size=[k, k]))

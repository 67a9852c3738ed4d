"""Pyramid composition and differentiable augmentation contracts."""

import warnings

import numpy as np
import pytest

from statflow.errors import ValidationError
from statflow.synthesis import (AugmentParams, PyramidImage, apply_transform,
                                apply_transform_vjp, augment,
                                default_base_resolution, sample_transform)

RNG = np.random.default_rng(21)


def make_pyramid(base=8, target=32, channels=3, dtype=np.float32, std=0.1,
                 seed=0):
    rng = np.random.default_rng(seed)
    return PyramidImage.create(channels, base, target, rng, std, dtype=dtype)


# -- composition ------------------------------------------------------------


def test_zero_raw_composes_to_half():
    p = PyramidImage([np.zeros((3, 16, 16), np.float32)], 16)
    img = p.compose()
    np.testing.assert_allclose(img, 0.5, atol=1e-7)


def test_composed_always_in_unit_range():
    for scale in (0.1, 10.0, 1000.0):
        p = make_pyramid(std=scale, seed=3)
        p.add_level()
        p.levels[-1] += RNG.normal(0, scale, size=p.levels[-1].shape).astype(np.float32)
        img = p.compose()
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_append_zero_level_keeps_composition():
    p = make_pyramid()
    before = p.compose()
    p.add_level()
    after = p.compose()
    np.testing.assert_allclose(before, after, atol=1e-6)


def test_add_level_doubles_and_caps():
    p = make_pyramid(base=8, target=32)
    assert p.top_resolution == 8
    p.add_level()
    assert p.top_resolution == 16
    p.add_level()
    assert p.top_resolution == 32
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        p.add_level()
    assert len(rec) == 1
    assert [lv.shape[-1] for lv in p.levels] == [8, 16, 32]


def test_parameter_count_for_full_pyramid():
    p = make_pyramid(base=8, target=32)
    p.add_level()
    p.add_level()
    assert p.num_parameters() == 3 * (8 * 8 + 16 * 16 + 32 * 32)  # 4032


def test_compose_gradient_matches_finite_differences():
    p = make_pyramid(dtype=np.float64, seed=5)
    p.add_level()
    img, vjp = p.compose_vjp()
    g = np.random.default_rng(6).normal(size=img.shape)
    grads = vjp(g)
    h = 1e-7
    for li, idx in [(0, (0, 2, 3)), (0, (2, 7, 1)), (1, (1, 10, 12))]:
        orig = p.levels[li][idx]
        p.levels[li][idx] = orig + h
        up = (p.compose() * g).sum()
        p.levels[li][idx] = orig - h
        dn = (p.compose() * g).sum()
        p.levels[li][idx] = orig
        fd = (up - dn) / (2 * h)
        assert abs(fd - grads[li][idx]) <= 1e-3 * max(abs(fd), 1e-10)


def test_level_validation():
    with pytest.raises(ValidationError):
        PyramidImage([], 32)
    with pytest.raises(ValidationError):
        PyramidImage([np.zeros((3, 16, 16)), np.zeros((3, 8, 8))], 32)
    with pytest.raises(ValidationError):
        PyramidImage([np.zeros((3, 64, 64))], 32)


def test_default_base_resolution():
    assert default_base_resolution(32) == 8
    assert default_base_resolution(16) == 4
    assert default_base_resolution(4) == 4
    assert default_base_resolution(1) == 1


# -- augmentation -------------------------------------------------------------


def test_zero_magnitudes_identity():
    x = RNG.uniform(0.0, 1.0, size=(4, 3, 16, 16)).astype(np.float32)
    params = AugmentParams(seed=0).disabled()
    out = augment(x, params)
    np.testing.assert_allclose(out, x, atol=1e-7)


def test_same_seed_bitwise_identical():
    x = RNG.uniform(0.0, 1.0, size=(2, 3, 16, 16)).astype(np.float32)
    params = AugmentParams(seed=42)
    np.testing.assert_array_equal(augment(x, params), augment(x, params))


def test_different_seeds_differ():
    x = RNG.uniform(0.2, 0.8, size=(2, 3, 16, 16)).astype(np.float32)
    a = augment(x, AugmentParams(seed=1))
    b = augment(x, AugmentParams(seed=2))
    assert not np.array_equal(a, b)


def test_shape_and_range_preserved_all_ops():
    x = RNG.uniform(0.0, 1.0, size=(3, 3, 16, 16)).astype(np.float32)
    for seed in range(8):
        out = augment(x, AugmentParams(seed=seed, brightness=0.5, saturation=1.0,
                                       contrast=0.5, translate=0.25, cutout=0.5))
        assert out.shape == x.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_brightness_gradient_matches_finite_differences():
    rng = np.random.default_rng(31)
    x = rng.uniform(0.3, 0.7, size=(2, 3, 8, 8))
    params = AugmentParams(seed=3, brightness=0.1, saturation=0.0, contrast=0.0,
                           translate=0.0, cutout=0.0, flip=False)
    t = sample_transform(params, 8)
    out, vjp = apply_transform_vjp(x, t)
    g = rng.normal(size=out.shape)
    gx = vjp(g)
    h = 1e-7
    for idx in [(0, 0, 1, 2), (1, 2, 5, 5)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = ((apply_transform(xp, t) * g).sum()
              - (apply_transform(xm, t) * g).sum()) / (2 * h)
        assert abs(fd - gx[idx]) <= 1e-3 * max(abs(fd), 1e-10)


def test_full_transform_vjp_is_correct():
    rng = np.random.default_rng(32)
    x = rng.uniform(0.35, 0.65, size=(2, 3, 16, 16))
    params = AugmentParams(seed=5)  # defaults: all ops on
    t = sample_transform(params, 16)
    out, vjp = apply_transform_vjp(x, t)
    g = rng.normal(size=out.shape)
    gx = vjp(g)
    h = 1e-7
    checked = 0
    for _ in range(12):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = ((apply_transform(xp, t) * g).sum()
              - (apply_transform(xm, t) * g).sum()) / (2 * h)
        if abs(fd) < 1e-9:  # clipped or cut-out pixel
            assert abs(gx[idx]) < 1e-6
            continue
        assert abs(fd - gx[idx]) <= 1e-3 * abs(fd)
        checked += 1
    assert checked >= 4


def test_magnitude_bounds_validated():
    with pytest.raises(ValidationError):
        AugmentParams(seed=0, brightness=0.9)
    with pytest.raises(ValidationError):
        AugmentParams(seed=0, translate=-0.1)
    with pytest.raises(ValidationError):
        AugmentParams(seed=0, cutout=0.7)


def test_transform_sampling_spans_ops():
    params = AugmentParams(seed=11)
    seen_flip = set()
    for step in range(20):
        t = sample_transform(params, 32, step=step)
        seen_flip.add(t.do_flip)
        assert abs(t.brightness_shift) <= params.brightness
        assert abs(t.saturation_scale - 1.0) <= params.saturation
        assert abs(t.shift_x) <= int(params.translate * 32)
    assert seen_flip == {True, False}

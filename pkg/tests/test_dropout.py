import math

import numpy as np
import pytest

from pairsplat.dropout import DropoutMask, compensation_factor, mask_rng, rate_at, sample_mask
from pairsplat.errors import InvalidRateError
from pairsplat.render import render
from pairsplat.scene import generate_synthetic_scene, make_orbit_cameras, make_rng


def test_rate_extremes():
    rng = make_rng(0)
    assert sample_mask(100, 0.0, rng).keep.all()
    assert not sample_mask(100, 1.0, rng).keep.any()


@pytest.mark.parametrize("rate", [-0.01, 1.5, float("nan")])
def test_invalid_rate(rate):
    with pytest.raises(InvalidRateError):
        sample_mask(10, rate, make_rng(0))


def test_binomial_bound():
    n = 100_000
    m = sample_mask(n, 0.1, make_rng(42))
    assert abs(m.keep.mean() - 0.9) <= 3 * math.sqrt(0.09 / n)


def test_reseed_reproduces():
    a = [sample_mask(500, 0.3, make_rng(5)).keep for _ in range(2)]
    assert a[0].tobytes() == a[1].tobytes()
    rng = make_rng(5)
    first, second = sample_mask(500, 0.3, rng), sample_mask(500, 0.3, rng)
    assert first.keep.tobytes() == a[0].tobytes()
    assert first.keep.tobytes() != second.keep.tobytes()


def test_branch_masks_differ_each_iteration():
    for t in range(100):
        rng = mask_rng(0, t)
        a, b = sample_mask(100, 0.1, rng), sample_mask(100, 0.1, rng)
        assert not np.array_equal(a.keep, b.keep)


def test_iteration_streams_independent():
    a = sample_mask(200, 0.5, mask_rng(3, 10)).keep
    b = sample_mask(200, 0.5, mask_rng(3, 11)).keep
    assert not np.array_equal(a, b)
    assert np.array_equal(a, sample_mask(200, 0.5, mask_rng(3, 10)).keep)


class TestCompensation:
    def test_values(self):
        assert compensation_factor(0.0) == 1.0
        assert compensation_factor(0.7, enabled=False) == 1.0
        assert compensation_factor(0.5) == 2.0

    def test_rate_one(self):
        with pytest.raises(InvalidRateError):
            compensation_factor(1.0)

    def test_disabled_rate_zero_bit_identical(self):
        f = generate_synthetic_scene(0, 80)
        cam = make_orbit_cameras(1, 4.0, width=24, height=24)[0]
        mask = sample_mask(80, 0.0, make_rng(0))
        a = render(f, mask, cam, opacity_scale=compensation_factor(0.0, enabled=False))
        assert a.tobytes() == render(f, None, cam).tobytes()


def test_rate_decay():
    assert rate_at(500, 0.2, 1000) == 0.2
    assert rate_at(0, 0.2, 1000, decay=True) == 0.2
    assert rate_at(500, 0.2, 1000, decay=True) == pytest.approx(0.1)
    assert rate_at(1000, 0.2, 1000, decay=True) == 0.0


def test_mask_len():
    assert len(DropoutMask.ones(7)) == 7

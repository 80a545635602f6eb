import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pxdepth.depth_norm import (
    DepthMap,
    NormConfig,
    NormStats,
    denormalize,
    normalize,
    normalize_depth,
    to_disparity,
    to_log,
)
from pxdepth.exceptions import ConfigError, DegenerateRange, EmptyValidSet, ShapeMismatch


def test_to_log_examples():
    d = DepthMap(np.array([0.0, math.e - 1, 9.0]), np.array([True, True, True]))
    np.testing.assert_allclose(to_log(d, 1.0), [0.0, 1.0, 2.302585], atol=1e-6)


def test_to_disparity_examples():
    np.testing.assert_allclose(to_disparity(np.array([1.0, 4.0]), 1e-300), [1.0, 0.25])
    np.testing.assert_allclose(to_disparity(np.array([0.5]), 0.01), [1.960784], atol=1e-6)


def test_default_mask_and_shape_check():
    d = DepthMap(np.array([1.0, 0.0, np.nan, -1.0]))
    assert d.valid.tolist() == [True, False, False, False]
    with pytest.raises(ShapeMismatch):
        DepthMap(np.ones(3), np.ones(2, bool))


def test_normalize_examples():
    cfg = NormConfig(p_lo=0, p_hi=100)
    x, stats = normalize(np.array([0.0, 1.0, 2.0, 3.0, 4.0]), cfg=cfg)
    assert x[0] == -0.5 and x[-1] == 0.5
    assert x[1] == -0.25
    assert (stats.d_min, stats.d_max) == (0.0, 4.0)


def test_normalize_degenerate():
    with pytest.raises(DegenerateRange):
        normalize(np.full((4, 4), 2.0))
    with pytest.raises(DegenerateRange):
        NormStats(1.0, 1.0)
    with pytest.raises(EmptyValidSet):
        normalize(np.ones(3), np.zeros(3, bool))


def test_normalize_clips_and_zeroes_invalid():
    v = np.arange(100, dtype=float)
    valid = np.ones(100, bool)
    valid[5] = False
    x, _ = normalize(v, valid, NormConfig())
    assert x.min() == -0.5 and x.max() == 0.5
    assert x[5] == 0.0


def test_denormalize_examples():
    cfg = NormConfig(epsilon=1.0)
    d = denormalize(np.array([-0.5]), NormStats(0.0, 1.0), cfg)
    assert abs(d.values[0]) < 1e-15
    d = denormalize(np.array([0.5]), NormStats(0.0, math.log(10)), cfg)
    np.testing.assert_allclose(d.values, [9.0])


def test_denormalize_disparity_nonpositive_invalid():
    cfg = NormConfig.for_video()
    d = denormalize(np.array([-0.5, 0.5]), NormStats(-1.0, 1.0), cfg)
    assert d.valid.tolist() == [False, True]


def test_config_validation():
    with pytest.raises(ConfigError):
        NormConfig(epsilon=0)
    with pytest.raises(ConfigError):
        NormConfig(p_lo=50, p_hi=10)
    with pytest.raises(ConfigError):
        NormConfig(representation="inverse")
    assert NormConfig.for_video().epsilon == 1e-3


@pytest.mark.parametrize("cfg", [NormConfig(), NormConfig.for_video()])
def test_roundtrip_inside_band(cfg, rng):
    d = DepthMap(rng.uniform(0.5, 8.0, size=(32, 32)))
    x, stats = normalize_depth(d, cfg)
    back = denormalize(x, stats, cfg)
    inside = (np.abs(x) < 0.5) & d.valid
    rel = np.abs(back.values[inside] - d.values[inside]) / d.values[inside]
    assert rel.max() < 1e-5


def test_per_clip_stats_shared(rng):
    clip = rng.uniform(1, 5, size=(3, 8, 8))
    x, stats = normalize_depth(DepthMap(clip), NormConfig.for_video())
    assert x.shape == clip.shape
    single = [normalize_depth(DepthMap(c), NormConfig.for_video())[1] for c in clip]
    assert any(s != stats for s in single)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=4, max_size=40, unique=True))
def test_monotone_and_bounded(vals):
    v = np.array(vals)
    if np.ptp(np.log(v + 1)) < 1e-6:
        return
    x, _ = normalize_depth(DepthMap(v), NormConfig(p_lo=0, p_hi=100))
    assert x.min() >= -0.5 and x.max() <= 0.5
    order = np.argsort(v)
    assert np.all(np.diff(x[order]) >= 0)

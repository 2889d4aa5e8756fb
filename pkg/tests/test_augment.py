import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abt.augment import (AugmentConfig, MixupQueue, add_noise, make_batch_views, make_views,
                         mask_patches, masking_ratio_at, mixup, n_masked, normalize,
                         pre_post_norm, resized_crop, rlf, rrc)
from abt.data import DatasetStats

RNG = np.random.default_rng


def spec(seed=0, shape=(64, 96)):
    return RNG(seed).normal(size=shape)


# -- normalisation ----------------------------------------------------------------

def test_normalize_cases():
    st_ = DatasetStats(1.0, 1.0, 1)
    np.testing.assert_array_equal(normalize(np.array([[0.0, 2.0]]), st_), [[-1.0, 1.0]])
    s = spec()
    np.testing.assert_array_equal(normalize(s, DatasetStats(0.0, 1.0, 1)), s)
    np.testing.assert_array_equal(normalize(np.full((4, 4), 3.5), DatasetStats(3.5, 2.0, 1)), 0.0)


def test_normalize_per_bin():
    s = np.array([[1.0, 3.0], [10.0, 20.0]])
    out = normalize(s, DatasetStats(np.array([2.0, 15.0]), np.array([1.0, 5.0]), 4))
    np.testing.assert_allclose(out, [[-1, 1], [-1, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_pre_post_norm_standardises_and_is_idempotent(B, seed):
    rng = RNG(seed)
    batch = [rng.normal(rng.uniform(-10, 10), rng.uniform(0.5, 5), size=(8, 12)) for _ in range(B)]
    out = np.stack(pre_post_norm(batch))
    assert abs(out.mean()) < 1e-6 and abs(out.std() - 1) < 1e-6
    again = np.stack(pre_post_norm(list(out)))
    np.testing.assert_allclose(again, out, atol=1e-6)


def test_pre_post_norm_degenerate():
    with pytest.raises(ValueError, match="degenerate batch"):
        pre_post_norm([np.full((4, 4), 2.0)])


# -- mixup ----------------------------------------------------------------------

def test_mixup_lambda_zero_identity():
    q = MixupQueue(4)
    q.push(spec(1))
    s = spec(2)
    np.testing.assert_array_equal(mixup(s, q, RNG(0), lam=0.0), s)


def test_mixup_constant_case_ln_2_5():
    q = MixupQueue(4)
    q.push(np.full((64, 96), math.log(1.0)))
    out = mixup(np.full((64, 96), math.log(4.0)), q, RNG(0), lam=0.5)
    np.testing.assert_allclose(out, math.log(2.5), rtol=0, atol=1e-12)


def test_mixup_empty_queue():
    q = MixupQueue(4)
    s = spec()
    np.testing.assert_array_equal(mixup(s, q, RNG(0)), s)
    assert len(q) == 1


def test_mixup_shape_mismatch_and_fifo():
    q = MixupQueue(2)
    q.push(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        q.push(np.zeros((3, 2)))
    q.push(np.ones((2, 2)))
    q.push(np.full((2, 2), 2.0))
    assert len(q) == 2
    np.testing.assert_array_equal(q.to_array()[:, 0, 0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 10_000))
def test_mixup_incoming_clip_dominates(alpha, seed):
    # with s = 0 and m = -inf-ish, exp(out) = (1 - lam) so the weight is read back exactly
    q = MixupQueue(2)
    q.push(np.full((2, 2), -50.0))
    out = mixup(np.zeros((2, 2)), q, RNG(seed), alpha=alpha, push=False)
    weight = float(np.exp(out[0, 0]))
    assert weight >= 0.5 - 1e-12


def test_mixup_alpha_validation():
    with pytest.raises(ValueError):
        AugmentConfig(mixup_alpha=0.6)


# -- rrc ------------------------------------------------------------------------

def test_rrc_identity_crop():
    cfg = AugmentConfig(rrc_freq_scale=(1.0, 1.0), rrc_time_scale=(1.0, 1.0))
    s = spec()
    np.testing.assert_allclose(rrc(s, cfg, RNG(0)), s, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rrc_shape_and_finite(seed):
    out = rrc(spec(seed), AugmentConfig(), RNG(seed))
    assert out.shape == (64, 96) and np.all(np.isfinite(out))


def test_rrc_lower_half_crop_doubles_ridge_index():
    F, T = 64, 96
    for k in (3, 10, 20, 30):
        s = np.zeros((F, T))
        s[k] = 1.0
        out = resized_crop(s, 0, 0, F // 2, T, (F, T))
        ridge = np.argmax(out, axis=0)
        # independent oracle: corner-aligned map row o <- o * (h - 1) / (F - 1)
        expected = int(round(k * (F - 1) / (F // 2 - 1)))
        assert np.all(ridge == expected)
        assert abs(expected - 2 * k) <= 1


def test_resized_crop_full_window_is_copy():
    s = spec(3, (8, 10))
    np.testing.assert_array_equal(resized_crop(s, 0, 0, 8, 10), s)


# -- rlf and noise ----------------------------------------------------------------

def test_rlf_cases():
    cfg = AugmentConfig()
    s = spec()
    np.testing.assert_array_equal(rlf(s, cfg, RNG(0), gain=0.0), s)
    out = rlf(s, cfg, RNG(0), gain=1.0)
    np.testing.assert_array_equal(out[:, 0], s[:, 0])
    np.testing.assert_allclose(out[:, 95] - s[:, 95], 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(2, 50))
def test_rlf_rank_one_ramp(gain, T):
    s = RNG(0).normal(size=(5, T))
    d = rlf(s, AugmentConfig(), RNG(0), gain=gain) - s
    np.testing.assert_allclose(d, np.broadcast_to(d[0], d.shape), atol=1e-12)
    np.testing.assert_allclose(d[0], gain * np.arange(T) / (T - 1), atol=1e-12)


def test_noise_cases():
    s = spec()
    np.testing.assert_array_equal(add_noise(s, AugmentConfig(noise_alpha=0.0), RNG(0)), s)
    d = add_noise(s, AugmentConfig(), RNG(5), variance=0.04) - s
    assert abs(d.var() - 0.04) <= 0.2 * 0.04
    a = add_noise(s, AugmentConfig(), RNG(9))
    b = add_noise(s, AugmentConfig(), RNG(9))
    np.testing.assert_array_equal(a, b)


# -- views ----------------------------------------------------------------------

def test_views_disabled_are_normalised_input():
    stats = DatasetStats(-2.0, 3.0, 1)
    s = spec()
    v1, v2 = make_views(s, AugmentConfig.disabled(), MixupQueue(4), 0, stats)
    np.testing.assert_array_equal(v1, normalize(s, stats))
    np.testing.assert_array_equal(v2, v1)


def test_views_reproducible_and_independent():
    stats = DatasetStats(0.0, 1.0, 1)
    cfg = AugmentConfig(use_noise=True)
    q1, q2 = MixupQueue(8), MixupQueue(8)
    for q in (q1, q2):
        q.push(spec(7))
    a = make_views(spec(), cfg, q1, 11, stats)
    b = make_views(spec(), cfg, q2, 11, stats)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[0], a[1])
    assert a[0].shape == a[1].shape == (64, 96)
    assert len(q1) == 2


def test_batch_views_pre_post_mode():
    cfg = AugmentConfig(norm_mode="pre_post")
    specs = [spec(i, (16, 20)) * 4 + 7 for i in range(4)]
    v1, v2 = make_batch_views(specs, cfg, MixupQueue(8), [1, 2, 3, 4])
    for v in (v1, v2):
        assert abs(v.mean()) < 1e-6 and abs(v.std() - 1) < 1e-6


# -- masking --------------------------------------------------------------------

def test_mask_counts():
    assert len(mask_patches(48, 0.2, RNG(0)).masked_indices) == 10
    assert len(mask_patches(48, 0.5, RNG(0)).masked_indices) == 24
    plan = mask_patches(48, 0.0, RNG(0))
    assert len(plan.masked_indices) == 0
    assert sorted(plan.kept_indices) == list(range(48))


@pytest.mark.parametrize("r", [-0.1, 1.0, 1.5])
def test_mask_ratio_validation(r):
    with pytest.raises(ValueError):
        mask_patches(10, r, RNG(0))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.floats(0.0, 0.999), st.integers(0, 2**32 - 1))
def test_mask_partition(N, r, seed):
    plan = mask_patches(N, r, RNG(seed))
    kept, masked = set(plan.kept_indices.tolist()), set(plan.masked_indices.tolist())
    assert not kept & masked
    assert kept | masked == set(range(N))
    assert len(masked) == n_masked(N, r)
    assert len(masked) == int(math.floor(r * N + 0.5))


def test_masking_schedule_points():
    assert masking_ratio_at(0, 0.3, 100, 10) == 0.0
    assert masking_ratio_at(100, 0.3, 100, 10) == pytest.approx(0.3)
    assert masking_ratio_at(55, 0.3, 100, 10) == pytest.approx(0.3 * math.sqrt(2) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.floats(0.0, 0.9), st.data())
def test_masking_schedule_monotone(total, beta, data):
    warm = data.draw(st.integers(0, total))
    vals = [masking_ratio_at(e, beta, total, warm) for e in range(total + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))

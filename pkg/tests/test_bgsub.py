from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irmrf.bgsub import KdeModel, foreground_mask, fuse_and, kde_background_prob, update_model
from irmrf.core import rasterize_boxes
from irmrf.synth import moving_sequence


def _model(frames, T=50, sigma=5.0) -> KdeModel:
    m = KdeModel(T, sigma)
    for f in frames:
        update_model(m, f)
    return m


def test_identical_history_scores_one():
    frame = np.random.default_rng(0).normal(100, 10, (4, 5))
    m = _model([frame] * 3)
    np.testing.assert_array_equal(np.asarray(kde_background_prob(m, frame)), 1.0)


def test_far_value_scores_near_zero():
    m = _model([np.zeros((2, 2)), np.ones((2, 2))])
    assert np.all(np.asarray(kde_background_prob(m, np.full((2, 2), 100.0))) < 1e-50)


def test_two_frame_hand_value():
    m = _model([np.full((1, 1), 100.0), np.full((1, 1), 104.0)], T=2, sigma=2.0)
    p = float(np.asarray(kde_background_prob(m, np.full((1, 1), 100.0)))[0, 0])
    assert p == pytest.approx(0.5 * (1 + math.exp(-2.0)), rel=1e-14)
    assert p == pytest.approx(0.5677, abs=1e-4)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_permutation_invariant_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    frames = [rng.normal(0, 20, (3, 4)) for _ in range(n)]
    cur = rng.normal(0, 20, (3, 4))
    a = np.asarray(kde_background_prob(_model(frames), cur))
    b = np.asarray(kde_background_prob(_model(frames[::-1]), cur))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)
    assert np.all((a >= 0) & (a <= 1))


def test_ring_buffer_keeps_last_T():
    frames = [np.full((2, 2), float(k)) for k in range(6)]
    m = _model(frames, T=4)
    assert len(m) == 4
    np.testing.assert_array_equal(m.history()[:, 0, 0], [2, 3, 4, 5])


def test_single_frame_history():
    m = _model([np.full((2, 3), 7.0)], T=10, sigma=1.0)
    assert len(m) == 1
    p = np.asarray(kde_background_prob(m, np.full((2, 3), 8.0)))
    np.testing.assert_allclose(p, math.exp(-0.5))


def test_model_errors():
    with pytest.raises(ValueError):
        KdeModel(0)
    with pytest.raises(ValueError):
        KdeModel(5, 0.0)
    m = KdeModel()
    with pytest.raises(ValueError):
        kde_background_prob(m, np.zeros((2, 2)))
    m.update(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        m.update(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        kde_background_prob(m, np.zeros((2, 3)))


def test_update_copies_frame():
    frame = np.zeros((2, 2))
    m = _model([frame])
    frame[:] = 50.0
    assert np.all(m.history() == 0.0)


def test_foreground_threshold_extremes():
    prob = np.array([[0.0, 0.3], [0.99, 1.0]])
    assert np.all(np.asarray(foreground_mask(prob, 0.0)) == 0)
    np.testing.assert_array_equal(np.asarray(foreground_mask(prob, 1.0)), [[1, 1], [1, 0]])


def test_moving_blob_mask():
    frames = moving_sequence(10, seed=0, distractor=False)
    m = _model([f.image for f in frames[:-1]])
    fg = np.asarray(foreground_mask(kde_background_prob(m, frames[-1].image), 0.05)).astype(bool)
    blob = np.asarray(rasterize_boxes(frames[-1].truth, fg.shape[1], fg.shape[0])).astype(bool)
    assert fg[blob].mean() >= 0.95
    assert fg[~blob].mean() <= 0.01


def test_fuse_examples():
    labels = (np.random.default_rng(1).random((5, 6)) < 0.4).astype(np.uint8)
    np.testing.assert_array_equal(np.asarray(fuse_and(labels, np.ones_like(labels))), labels)
    assert np.all(np.asarray(fuse_and(labels, np.zeros_like(labels))) == 0)
    with pytest.raises(ValueError):
        fuse_and(labels, np.ones((5, 5), dtype=np.uint8))


@given(st.integers(0, 2**32 - 1))
def test_fuse_never_adds_foreground(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((6, 7)) < 0.5).astype(np.uint8)
    b = (rng.random((6, 7)) < 0.5).astype(np.uint8)
    out = np.asarray(fuse_and(a, b))
    assert out.sum() <= min(a.sum(), b.sum())
    np.testing.assert_array_equal(out, a & b)

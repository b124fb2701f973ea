import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zscount import tensor as T
from zscount.similarity import AffineTransform, affine_counting_map, lat_stats, similarity_map
from zscount.tensor import ShapeError


def test_parallel_and_orthogonal():
    t = np.array([[1.0, 2.0, 0.5]])
    v = T.tensor(np.repeat(t[:, None] * 3.0, 4, axis=1))
    assert np.allclose(similarity_map(v, t, (2, 2)).data, 1.0)
    ortho = T.tensor(np.tile([[[2.0, -1.0, 0.0]]], (1, 4, 1)))
    assert np.allclose(similarity_map(ortho, t, (2, 2)).data, 0.0)


def test_hand_value():
    v = T.tensor(np.array([[[1.0, 1.0]]]) / math.sqrt(2))
    s = similarity_map(v, np.array([[1.0, 0.0]]), (1, 1)).data
    assert abs(s[0, 0, 0] - 0.70710678) < 1e-8


@given(arrays(np.float64, (1, 6, 3), elements=st.floats(-10, 10)), arrays(np.float64, (1, 3), elements=st.floats(-10, 10)))
def test_cosine_bounded(v, t):
    s = similarity_map(T.tensor(v), t, (2, 3)).data
    assert np.all(np.abs(s) <= 1 + 1e-12)


def test_grid_mismatch():
    with pytest.raises(ShapeError):
        similarity_map(T.tensor(np.ones((1, 5, 2))), np.ones((1, 2)), (2, 3))


def test_affine_examples():
    s = T.tensor(np.random.default_rng(0).uniform(-1, 1, (2, 3, 3)))
    lat = AffineTransform((3, 3))
    assert np.array_equal(lat(s).data, s.data)
    b = np.full((3, 3), 0.25)
    assert np.array_equal(affine_counting_map(s, T.tensor(np.zeros((3, 3))), T.tensor(b)).data, np.broadcast_to(b, (2, 3, 3)))
    half = T.tensor(np.full((1, 3, 3), 0.5))
    assert np.array_equal(affine_counting_map(half, T.tensor(np.full((3, 3), 2.0)), T.tensor(np.full((3, 3), -1.0))).data,
                          np.zeros((1, 3, 3)))


def test_lat_stats_at_init():
    lat = AffineTransform((8, 8))
    w, b = lat_stats(lat.weight, lat.bias)
    assert (w.min, w.max, w.mean, w.std) == (1.0, 1.0, 1.0, 0.0)
    assert (b.min, b.max, b.mean) == (0.0, 0.0, 0.0)
    assert len(w.bins) == 32 and sum(w.bins) == 64
    keys = set(json.loads(json.dumps(w.to_json())))
    assert {"matrix", "min", "max", "mean", "std", "bins"} <= keys


def test_zero_gradient_step_leaves_lat_unchanged():
    from zscount.optim import OptimizerState, adamw_step

    lat = AffineTransform((2, 2))
    for p in lat.parameters():
        p.grad = np.zeros(p.shape)
    adamw_step(lat.parameters(), OptimizerState(), lr=1e-3, weight_decay=0.0)
    assert np.array_equal(lat.weight.data, np.ones((2, 2))) and np.array_equal(lat.bias.data, np.zeros((2, 2)))

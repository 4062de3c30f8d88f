import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forgeryloc import _kernels as K

pytestmark = pytest.mark.skipif(K.numba is None, reason="numba not installed")

scores = arrays(np.float64, st.integers(0, 80), elements=st.floats(0, 1))


def intervals(rng, n, span=5.0):
    s = np.round(rng.uniform(0, span, n), 2)
    return s, s + np.round(rng.uniform(0.02, 1.5, n), 2)


@settings(max_examples=100, deadline=None)
@given(scores, st.floats(0.05, 0.95))
def test_runs_above_paths_agree(x, thr):
    a = K.runs_above_np(x, thr)
    b = K.runs_above_nb(K._f64(x), thr)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


@pytest.mark.parametrize("seed", range(20))
def test_tiou_matrix_paths_agree(seed):
    rng = np.random.default_rng(seed)
    a0, a1 = intervals(rng, int(rng.integers(0, 12)))
    b0, b1 = intervals(rng, int(rng.integers(0, 12)))
    np.testing.assert_allclose(K.tiou_matrix_np(a0, a1, b0, b1),
                               K.tiou_matrix_nb(a0, a1, b0, b1), atol=1e-15)


@pytest.mark.parametrize("seed", range(30))
def test_soft_nms_paths_agree(seed):
    rng = np.random.default_rng(seed)
    s, e = intervals(rng, int(rng.integers(0, 15)), span=2.0)
    sc = rng.random(s.size)
    a = K.soft_nms_np(s, e, sc, 0.5, 1e-3)
    b = K.soft_nms_nb(s, e, sc, 0.5, 1e-3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)


@pytest.mark.parametrize("seed", range(30))
def test_greedy_match_paths_agree(seed):
    rng = np.random.default_rng(seed)
    n_p, n_g = int(rng.integers(0, 20)), int(rng.integers(0, 8))
    pc, gc = rng.integers(0, 3, n_p), rng.integers(0, 3, n_g)
    p0, p1 = intervals(rng, n_p)
    g0, g1 = intervals(rng, n_g)
    thr = np.array([0.3, 0.5, 0.7, 0.95])
    np.testing.assert_array_equal(
        K.greedy_match_np(pc, p0, p1, gc, g0, g1, thr),
        K.greedy_match_nb(pc, p0, p1, gc, g0, g1, thr))


def test_soft_nms_hand_decay():
    # TIoU(A, B) = 0.5 -> B keeps 0.8 * exp(-0.25 / 0.5)
    order, final = K.soft_nms(np.array([0.0, 0.0]), np.array([1.0, 0.5]),
                              np.array([0.9, 0.8]), 0.5, 1e-3)
    assert order.tolist() == [0, 1]
    assert final[1] == pytest.approx(0.8 * np.exp(-0.5), abs=1e-12)
    assert final[1] == pytest.approx(0.4852, abs=1e-4)


def test_soft_nms_never_raises_scores():
    rng = np.random.default_rng(3)
    s, e = intervals(rng, 30, span=2.0)
    sc = rng.random(30)
    order, final = K.soft_nms(s, e, sc, 0.5, 1e-3)
    assert np.all(final <= sc[order] + 1e-15)
    assert np.all(np.diff(final) <= 1e-15)


def test_env_flag_selects_numpy_path():
    code = "from forgeryloc import _kernels as K; print(K.USE_NUMBA)"
    env = {**os.environ, "FORGERYLOC_NO_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "False"
    env["FORGERYLOC_NO_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "True"

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcn import autograd as ag
from dcn.autograd import Tensor, precision
from dcn.destruction import GridSpec
from dcn.errors import ConfigurationError
from dcn.gradcheck import check
from dcn.relation import (build_label_matrix, build_similarity_matrix, cosine, init_restoration_params,
                          restore_patch_features, similarity_loss)


def brute_cosine(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = max(math.sqrt(sum(a * a for a in u)), 1e-8)
    nv = max(math.sqrt(sum(b * b for b in v)), 1e-8)
    return dot / (nu * nv)


def brute_sim_matrix(s):
    c, m, n = s.shape
    vecs = [s[:, r, q] for r in range(m) for q in range(n)]
    return np.array([[brute_cosine(u, v) for v in vecs] for u in vecs])


def brute_loss(a_sim, a_label):
    p = len(a_sim)
    return sum((a_sim[i][j] - a_label[i][j]) ** 2 for i in range(p) for j in range(p)) / (p * (p - 1))


@pytest.mark.parametrize("u,v,expected", [
    ((1.0, 0.0), (0.0, 1.0), 0.0),
    ((1.0, 0.0), (-1.0, 0.0), -1.0),
    ((3.0, 4.0), (4.0, 3.0), 0.96),
    ((2.0, -1.0, 5.0), (2.0, -1.0, 5.0), 1.0),
])
def test_cosine_examples(u, v, expected):
    with precision(np.float64):
        assert cosine(np.array(u), np.array(v)).item() == pytest.approx(expected, abs=1e-12)


def test_cosine_zero_vector_is_safe():
    assert cosine(np.zeros(3), np.ones(3)).item() == 0.0


def test_cosine_length_mismatch():
    with pytest.raises(ConfigurationError):
        cosine(np.ones(2), np.ones(3))


def test_similarity_two_slots():
    s = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])  # C=2, M=1, N=2: slot0=(1,0), slot1=(0,1)
    np.testing.assert_allclose(build_similarity_matrix(s).data[0], np.eye(2))


def test_similarity_identical_columns():
    s = np.tile(np.array([0.3, -1.2, 2.0])[:, None, None], (1, 3, 3))
    np.testing.assert_allclose(build_similarity_matrix(s).data[0], np.ones((9, 9)), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**16))
def test_similarity_matches_brute_force(m, n, c, seed):
    if m * n < 2:
        n = 2
    s = np.random.default_rng(seed).normal(size=(c, m, n))
    with precision(np.float64):
        got = build_similarity_matrix(s).data[0]
    expected = brute_sim_matrix(s)
    np.testing.assert_allclose(got, expected, atol=1e-9, rtol=0)
    np.testing.assert_allclose(got, got.T, atol=1e-12)
    assert np.all(np.abs(got) <= 1 + 1e-6)
    np.testing.assert_allclose(np.diag(got), 1.0, atol=1e-6)


def test_label_matrix_block():
    expected = np.array([[1, 1, -1, -1], [1, 1, -1, -1], [-1, -1, 1, 1], [-1, -1, 1, 1]])
    np.testing.assert_array_equal(build_label_matrix([1, 1, 0, 0]), expected)
    np.testing.assert_array_equal(build_label_matrix([1] * 5), np.ones((5, 5)))


def test_loss_zero_on_match():
    a = build_label_matrix([1, 0, 1])
    assert similarity_loss(a.astype(np.float64), a).item() == 0.0


def test_loss_hand_example():
    with precision(np.float64):
        val = similarity_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, -1.0], [-1.0, 1.0]])).item()
    assert abs(val - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**16))
def test_loss_matches_brute_force_and_is_permutation_invariant(p, seed):
    rng = np.random.default_rng(seed)
    a_sim = rng.uniform(-1, 1, size=(p, p))
    a_label = build_label_matrix(rng.integers(0, 2, size=p))
    with precision(np.float64):
        got = similarity_loss(a_sim, a_label).item()
        perm = rng.permutation(p)
        permuted = similarity_loss(a_sim[perm][:, perm], a_label[perm][:, perm]).item()
    assert abs(got - brute_loss(a_sim, a_label)) < 1e-9
    assert abs(got - permuted) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 8))
def test_scale_invariance(seed, slot):
    s = np.random.default_rng(seed).normal(size=(4, 3, 3))
    with precision(np.float64):
        a = build_similarity_matrix(s).data
        s2 = s.copy()
        r, c = divmod(slot, 3)
        s2[:, r, c] *= 2
        b = build_similarity_matrix(s2).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_restoration_output_extent_and_constant_input():
    rng = np.random.default_rng(0)
    params = {k: Tensor(v) for k, v in init_restoration_params(rng, 5, 4, np.float64).items()}
    params["restore.conv1.bias"] = Tensor(np.full(4, 0.1))
    for hf, wf in [(6, 6), (7, 5), (3, 3)]:
        out = restore_patch_features(np.ones((2, 5, hf, wf)), params, GridSpec(3, 3))
        assert out.shape == (2, 4, 3, 3)
    sim = build_similarity_matrix(out).data
    np.testing.assert_allclose(sim, 1.0, atol=1e-6)


def test_restoration_rejects_small_map():
    params = {k: Tensor(v) for k, v in init_restoration_params(np.random.default_rng(0), 2, 2).items()}
    with pytest.raises(ConfigurationError):
        restore_patch_features(np.ones((1, 2, 2, 2)), params, GridSpec(3, 3))


def test_restoration_channel_major_agrees():
    rng = np.random.default_rng(1)
    params = {k: Tensor(v) for k, v in init_restoration_params(rng, 3, 4, np.float64).items()}
    f = rng.normal(size=(2, 3, 6, 6))
    a = restore_patch_features(f, params, GridSpec(3, 3)).data
    b = restore_patch_features(f.transpose(1, 0, 2, 3), params, GridSpec(3, 3), channel_major=True).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_similarity_loss_gradient_wrt_features():
    rng = np.random.default_rng(5)
    a_label = build_label_matrix([1, 0, 0, 1])

    def fn(s):
        return similarity_loss(build_similarity_matrix(s), a_label)

    res = check(fn, [rng.normal(size=(2, 3, 2, 2))])
    assert res.ok, res


def test_similarity_loss_shape_mismatch():
    with pytest.raises(ConfigurationError):
        similarity_loss(np.zeros((3, 3)), np.zeros((2, 2)))


def test_similarity_is_differentiable_through_autograd():
    s = Tensor(np.random.default_rng(2).normal(size=(1, 3, 2, 2)), requires_grad=True)
    loss = similarity_loss(build_similarity_matrix(s), build_label_matrix([1, 0, 1, 0]))
    ag.backward(loss)
    assert s.grad.shape == s.shape and np.all(np.isfinite(s.grad))

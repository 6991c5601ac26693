import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcn import autograd as ag
from dcn.autograd import Tensor, precision
from dcn.errors import ConfigurationError, NonFiniteError, StateError
from dcn.gradcheck import check, run_suite


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def conv_loops(x, w, stride=1, padding=0):
    """Direct nested-loop cross-correlation for a single C x H x W image."""
    x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    c_out, c_in, kh, kw = w.shape
    ho = (x.shape[1] - kh) // stride + 1
    wo = (x.shape[2] - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * w[o])
    return out


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = ag.conv2d(x, np.ones((1, 1, 1, 1), dtype=np.float32))
    np.testing.assert_array_equal(out.data, x)


def test_conv_hand_example():
    x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
    out = ag.conv2d(x, np.ones((1, 1, 2, 2), dtype=np.float32))
    np.testing.assert_array_equal(out.data, [[[[10]]]])


def test_conv_zero_input():
    w = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    out = ag.conv2d(np.zeros((1, 2, 5, 5)), w, padding=1)
    assert not out.data.any()


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
@pytest.mark.usefixtures("f64")
def test_conv_matches_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    out = ag.conv2d(x, w, stride=stride, padding=padding).data
    for n in range(2):
        np.testing.assert_allclose(out[n], conv_loops(x[n], w, stride, padding), rtol=1e-12, atol=1e-12)


@pytest.mark.usefixtures("f64")
def test_conv_channel_major_layout_agrees():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(5, 3, 3, 3))
    a = ag.conv2d(x, w, padding=1).data
    b = ag.conv2d(x.transpose(1, 0, 2, 3), w, padding=1, layout="CNHW").data
    np.testing.assert_allclose(a, b.transpose(1, 0, 2, 3), rtol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ConfigurationError, match="channel mismatch"):
        ag.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ConfigurationError, match="incompatible"):
        ag.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=2)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(1, 2, 6, 6)).astype(np.float32)
    y = rng.uniform(-1, 1, size=(1, 2, 6, 6)).astype(np.float32)
    w = rng.uniform(-1, 1, size=(3, 2, 3, 3)).astype(np.float32)
    lhs = ag.conv2d(np.float32(a) * x + np.float32(b) * y, w, padding=1).data
    rhs = a * ag.conv2d(x, w, padding=1).data + b * ag.conv2d(y, w, padding=1).data
    scale = np.abs(a * ag.conv2d(x, w, padding=1).data).max() + np.abs(b * ag.conv2d(y, w, padding=1).data).max()
    assert np.abs(lhs - rhs).max() <= 1e-5 * max(scale, 1e-6)


def test_relu_values():
    np.testing.assert_array_equal(ag.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])


def test_avg_pool_hand_example():
    out = ag.avg_pool2d(np.array([[[[1, 3], [5, 7]]]], dtype=np.float64), 2)
    np.testing.assert_array_equal(out.data, [[[[4]]]])


@pytest.mark.parametrize("target", [(1, 1), (2, 3), (3, 3), (5, 4)])
def test_adaptive_pool_constant(target):
    out = ag.adaptive_avg_pool2d(np.full((2, 3, 7, 6), 0.25), target)
    assert out.shape == (2, 3, *target)
    np.testing.assert_allclose(out.data, 0.25)


def test_adaptive_pool_regions_partition_input():
    # pooling the all-ones map weighted by cell sizes must recover the total pixel count
    x = np.ones((1, 1, 7, 5))
    ph = ag._partition_matrix(7, 3, np.float64)
    pw = ag._partition_matrix(5, 2, np.float64)
    assert np.array_equal((ph > 0).sum(axis=0), np.ones(7))
    assert np.array_equal((pw > 0).sum(axis=0), np.ones(5))
    sizes = np.outer((ph > 0).sum(axis=1), (pw > 0).sum(axis=1))
    assert (ag.adaptive_avg_pool2d(x, (3, 2)).data[0, 0] * sizes).sum() == 35


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 999))
def test_adaptive_pool_preserves_mean_for_equal_regions(m, n, k, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(1, 2, m * k, n * k))
    out = ag.adaptive_avg_pool2d(x, (m, n)).data
    assert abs(out.mean() - x.mean()) < 1e-6


def test_adaptive_pool_target_too_large():
    with pytest.raises(ConfigurationError):
        ag.adaptive_avg_pool2d(np.zeros((1, 1, 2, 2)), (3, 3))


@pytest.mark.usefixtures("f64")
def test_batchnorm_normalises_and_tracks_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(8, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    out = ag.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    ag.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square():
    x = Tensor(np.array([3.0]), requires_grad=True)
    ag.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_twice_is_state_error():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = ag.tsum(x * x)
    loss.backward()
    with pytest.raises(StateError):
        loss.backward()


def test_unreachable_param_gets_zero_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    ag.backward(ag.tsum(x), {"x": x, "y": y})
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_non_finite_loss_is_error():
    x = Tensor(np.array([np.inf]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        ag.tsum(x).backward()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    ag.tsum(y + y * 3.0).backward()  # d/dx 4x^2 = 8x
    np.testing.assert_allclose(x.grad, [16.0])


def test_precision_switch():
    with precision(np.float64):
        assert ag.as_tensor([1.0]).dtype == np.float64
    assert ag.as_tensor([1.0]).dtype == np.float32


def test_forward_determinism():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = ag.relu(ag.conv2d(x, w, padding=1)).data
    b = ag.relu(ag.conv2d(x, w, padding=1)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_gradcheck_conv_random(seed):
    rng = np.random.default_rng(seed)
    res = check(lambda x, w: ag.conv2d(x, w, padding=1),
                [rng.uniform(-1, 1, (1, 2, 4, 4)), rng.uniform(-1, 1, (2, 2, 3, 3))], seed=seed)
    assert res.ok, res


def test_gradcheck_suite_all_layers():
    results = run_suite()
    failed = [r for r in results if not r.ok]
    assert not failed, failed

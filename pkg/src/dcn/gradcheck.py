"""Central finite-difference checks for the autograd ops and DCN heads."""

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, precision
from .model import model_gradcheck_cases


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float
    tol: float

    @property
    def ok(self):
        return self.max_rel_error < self.tol


def relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, arrays, index, eps=1e-5):
    x = arrays[index]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check(fn, inputs, eps=1e-5, tol=1e-4, name="op", seed=0):
    """Compare backward against finite differences for ``fn(*tensors)``.

    ``inputs`` are float64 arrays; every one is differentiated. A fixed
    random projection turns non-scalar outputs into a scalar.
    """
    start = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with precision(np.float64):
        probe = fn(*[Tensor(a) for a in arrays])
        weights = np.random.default_rng(seed).uniform(-1, 1, size=probe.shape)

        def scalar():
            out = fn(*[Tensor(a) for a in arrays])
            return float((out.data * weights).sum())

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        ag.backward(ag.tsum(out * weights), leaves)
        worst = 0.0
        for i, leaf in enumerate(leaves):
            num = numeric_grad(scalar, arrays, i, eps)
            worst = max(worst, relative_error(leaf.grad, num))
    return CheckResult(name, worst, time.perf_counter() - start, tol)


def _layer_cases(rng):
    u = lambda *s: rng.uniform(-1, 1, size=s)  # noqa: E731
    # keep relu inputs away from the kink so central differences are valid
    kinkless = u(2, 3, 4, 4)
    kinkless = np.where(np.abs(kinkless) < 0.05, 0.3, kinkless)
    rm, rv = np.zeros(3), np.ones(3)
    return [
        ("add", ag.add, [u(2, 3), u(1, 3)]),
        ("sub", ag.sub, [u(2, 3), u(2, 1)]),
        ("mul", ag.mul, [u(2, 3), u(2, 3)]),
        ("div", ag.div, [u(2, 3), rng.uniform(0.5, 2.0, size=(2, 3))]),
        ("pow", lambda a: ag.power(a, 2), [u(3, 2)]),
        ("sum", lambda a: ag.tsum(a, axis=1), [u(2, 3, 2)]),
        ("mean", lambda a: ag.mean(a, axis=(0, 2)), [u(2, 3, 2)]),
        ("reshape", lambda a: ag.reshape(a, (3, 4)), [u(2, 6)]),
        ("transpose", lambda a: ag.transpose(a, (0, 2, 1)), [u(2, 3, 4)]),
        ("matmul", ag.matmul, [u(2, 3, 4), u(2, 4, 5)]),
        ("relu", ag.relu, [kinkless]),
        ("sigmoid", ag.sigmoid, [u(2, 3, 4)]),
        ("l2_norm", lambda a: ag.l2_norm(a, axis=1), [u(2, 4, 3)]),
        ("conv2d", lambda x, w, b: ag.conv2d(x, w, b, stride=1, padding=1),
         [u(2, 3, 5, 5), u(4, 3, 3, 3), u(4)]),
        ("conv2d_stride2", lambda x, w: ag.conv2d(x, w, stride=2, padding=0),
         [u(1, 2, 5, 5), u(3, 2, 3, 3)]),
        ("conv2d_1x1", lambda x, w, b: ag.conv2d(x, w, b), [u(2, 3, 4, 4), u(2, 3, 1, 1), u(2)]),
        ("conv2d_channel_major", lambda x, w, b: ag.conv2d(x, w, b, padding=1, layout="CNHW"),
         [u(3, 2, 4, 4), u(2, 3, 3, 3), u(2)]),
        ("avg_pool2d", lambda x: ag.avg_pool2d(x, 2), [u(2, 3, 4, 6)]),
        ("adaptive_avg_pool2d", lambda x: ag.adaptive_avg_pool2d(x, (3, 2)), [u(2, 3, 7, 5)]),
        ("batch_norm", lambda x, g, b: ag.batch_norm(x, g, b, rm.copy(), rv.copy(), training=True),
         [u(4, 3, 3, 3), u(3), u(3)]),
        ("batch_norm_channel_major",
         lambda x, g, b: ag.batch_norm(x, g, b, rm.copy(), rv.copy(), training=True, channel_axis=0),
         [u(3, 4, 3, 3), u(3), u(3)]),
        ("batch_norm_eval",
         lambda x, g, b: ag.batch_norm(x, g, b, np.full(3, 0.1), np.full(3, 2.0), training=False),
         [u(2, 3, 3, 3), u(3), u(3)]),
    ]


def run_suite(seed=0, tol=1e-4):
    """Check every layer, the DCN heads and the composite loss; return results."""
    rng = np.random.default_rng(seed)
    results = [check(fn, inputs, tol=tol, name=name, seed=seed) for name, fn, inputs in _layer_cases(rng)]
    for name, fn, inputs in model_gradcheck_cases(rng):
        results.append(check(fn, inputs, tol=tol, name=name, seed=seed))
    return results

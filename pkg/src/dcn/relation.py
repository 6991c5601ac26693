"""Patch-level relation supervision.

A small head maps the backbone feature map to one feature vector per grid
slot. Pairwise cosine similarities between slots are pushed towards +1 for
slots of the same class and -1 otherwise.
"""

import numpy as np

from . import autograd as ag
from .errors import ConfigurationError

EPS = 1e-8


def init_restoration_params(rng, in_channels, channels=32, dtype=np.float32):
    def he(c_out, c_in):
        return rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_out, c_in, 1, 1)).astype(dtype)

    return {
        "restore.conv1.weight": he(channels, in_channels),
        "restore.conv1.bias": np.zeros(channels, dtype=dtype),
        "restore.conv2.weight": he(channels, channels),
        "restore.conv2.bias": np.zeros(channels, dtype=dtype),
    }


def restore_patch_features(features, params, grid, channel_major=False):
    """N x C_f x H_f x W_f feature map -> N x C_s x M x N patch features.

    With ``channel_major`` the input is C_f x N x H_f x W_f; the output is
    always batch-first.
    """
    h, w = features.shape[2:]
    if h < grid.rows or w < grid.cols:
        raise ConfigurationError(f"feature map {h}x{w} is smaller than the {grid.rows}x{grid.cols} grid")
    layout = "CNHW" if channel_major else "NCHW"
    x = ag.relu(ag.conv2d(features, params["restore.conv1.weight"], params["restore.conv1.bias"],
                          layout=layout))
    x = ag.conv2d(x, params["restore.conv2.weight"], params["restore.conv2.bias"], layout=layout)
    x = ag.adaptive_avg_pool2d(x, (grid.rows, grid.cols))
    return ag.transpose(x, (1, 0, 2, 3)) if channel_major else x


def cosine(u, v, eps=EPS):
    """u.v / (max(|u|, eps) * max(|v|, eps)) for two 1-d tensors."""
    u, v = ag.as_tensor(u), ag.as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ConfigurationError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    uu, vv = u.reshape(1, -1), v.reshape(1, -1)
    return ag.tsum(u * v) / (ag.l2_norm(uu, axis=1, eps=eps) * ag.l2_norm(vv, axis=1, eps=eps)).reshape(())


def build_similarity_matrix(patch_features, eps=EPS):
    """N x C_s x M x N (or C_s x M x N) -> N x P x P cosine matrix, row-major slots."""
    s = ag.as_tensor(patch_features)
    if s.ndim == 3:
        s = s.reshape(1, *s.shape)
    n, c, rows, cols = s.shape
    flat = s.reshape(n, c, rows * cols)
    unit = flat / ag.l2_norm(flat, axis=1, eps=eps)
    return ag.matmul(ag.transpose(unit, (0, 2, 1)), unit)


def build_label_matrix(class_mask):
    """+1 where two slots share a class, -1 otherwise. Accepts (P,) or (N, P)."""
    m = np.asarray(class_mask)
    return np.where(m[..., :, None] == m[..., None, :], 1.0, -1.0)


def similarity_loss(a_sim, a_label):
    """Sum of squared differences over P x P, divided by P(P - 1); batch-averaged."""
    a_sim = ag.as_tensor(a_sim)
    a_label = np.asarray(a_label, dtype=a_sim.dtype)
    if a_sim.shape[-2:] != a_label.shape[-2:] or a_sim.shape[-1] != a_sim.shape[-2]:
        raise ConfigurationError(f"similarity/label shape mismatch: {a_sim.shape} vs {a_label.shape}")
    p = a_sim.shape[-1]
    diff = a_sim - a_label
    per_view = ag.tsum(diff * diff, axis=(-2, -1)) * (1.0 / (p * (p - 1)))
    return ag.mean(per_view)

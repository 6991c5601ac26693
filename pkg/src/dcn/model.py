"""DCN networks, objectives, liveness score and checkpoint I/O."""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .destruction import GridSpec
from .errors import ConfigurationError, StateError
from .optim import AdamState
from .relation import (build_label_matrix, build_similarity_matrix, init_restoration_params,
                       restore_patch_features, similarity_loss)

CHECKPOINT_MAGIC = b"DCN1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    height: int = 96
    width: int = 96
    grid_rows: int = 3
    grid_cols: int = 3
    channels: tuple = (16, 32, 64, 64)
    restore_channels: int = 32
    reflection_hidden: int = 16
    lambda1: float = 10.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    @property
    def grid(self):
        return GridSpec(self.grid_rows, self.grid_cols)

    @property
    def feature_channels(self):
        return self.channels[-1]

    @property
    def feature_shape(self):
        scale = 2 ** len(self.channels)
        return self.height // scale, self.width // scale

    def validate(self):
        scale = 2 ** len(self.channels)
        if not self.channels or self.height % scale or self.width % scale:
            raise ConfigurationError(
                f"input {self.height}x{self.width} must be divisible by 2^{len(self.channels)} = {scale}")
        hf, wf = self.feature_shape
        if hf % self.grid_rows or wf % self.grid_cols:
            raise ConfigurationError(
                f"feature map {hf}x{wf} is not divisible by the {self.grid_rows}x{self.grid_cols} grid")
        self.grid.patch_size(self.height, self.width)
        if self.lambda1 <= 0:
            raise ConfigurationError(f"lambda1 must be positive, got {self.lambda1}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_params(config, rng, dtype=np.float32):
    """Initial parameter arrays and batchnorm buffers for a config."""
    params, buffers = {}, {}

    def he(c_out, c_in, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)

    c_in = 3
    for i, c in enumerate(config.channels):
        pre = f"backbone.{i}"
        params[f"{pre}.conv1.weight"] = he(c, c_in, 3)
        params[f"{pre}.bn.gamma"] = np.ones(c, dtype=dtype)
        params[f"{pre}.bn.beta"] = np.zeros(c, dtype=dtype)
        params[f"{pre}.conv2.weight"] = he(c, c, 3)
        params[f"{pre}.conv2.bias"] = np.zeros(c, dtype=dtype)
        buffers[f"{pre}.bn.running_mean"] = np.zeros(c, dtype=dtype)
        buffers[f"{pre}.bn.running_var"] = np.ones(c, dtype=dtype)
        c_in = c

    params["reflection.conv1.weight"] = he(config.reflection_hidden, c_in, 1)
    params["reflection.conv1.bias"] = np.zeros(config.reflection_hidden, dtype=dtype)
    params["reflection.conv2.weight"] = he(1, config.reflection_hidden, 1)
    params["reflection.conv2.bias"] = np.zeros(1, dtype=dtype)
    params.update(init_restoration_params(rng, c_in, config.restore_channels, dtype))
    return params, buffers


def backbone_forward(images, params, buffers, config, training=True, channel_major=False):
    """N x 3 x H x W -> N x C_f x H_f x W_f (C_f x N x H_f x W_f if ``channel_major``)."""
    x = ag.as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != (3, config.height, config.width):
        raise ConfigurationError(
            f"backbone expects N x 3 x {config.height} x {config.width}, got {x.shape}")
    x = ag.transpose(x, (1, 0, 2, 3))
    for i in range(len(config.channels)):
        pre = f"backbone.{i}"
        x = ag.conv2d(x, params[f"{pre}.conv1.weight"], padding=1, layout="CNHW")
        x = ag.batch_norm(x, params[f"{pre}.bn.gamma"], params[f"{pre}.bn.beta"],
                          buffers[f"{pre}.bn.running_mean"], buffers[f"{pre}.bn.running_var"],
                          training=training, channel_axis=0)
        x = ag.relu(x)
        x = ag.relu(ag.conv2d(x, params[f"{pre}.conv2.weight"], params[f"{pre}.conv2.bias"],
                              padding=1, layout="CNHW"))
        x = ag.avg_pool2d(x, 2)
    return x if channel_major else ag.transpose(x, (1, 0, 2, 3))


def reflection_forward(features, params, channel_major=False):
    """N x C_f x H_f x W_f -> N x 1 x H_f x W_f in [0, 1]."""
    layout = "CNHW" if channel_major else "NCHW"
    x = ag.relu(ag.conv2d(features, params["reflection.conv1.weight"], params["reflection.conv1.bias"],
                          layout=layout))
    x = ag.sigmoid(ag.conv2d(x, params["reflection.conv2.weight"], params["reflection.conv2.bias"],
                             layout=layout))
    return ag.transpose(x, (1, 0, 2, 3)) if channel_major else x


def reflection_loss(r_pred, r_label):
    """Squared Frobenius distance over H_f x W_f, divided by H_f * W_f; batch-averaged."""
    r_pred = ag.as_tensor(r_pred)
    r_label = np.asarray(r_label, dtype=r_pred.dtype)
    if r_pred.shape != r_label.shape:
        raise ConfigurationError(f"reflection map shapes differ: {r_pred.shape} vs {r_label.shape}")
    diff = r_pred - r_label
    return ag.mean(diff * diff)


def overall_loss(l_sim, l_reflection, lambda1):
    return l_sim + lambda1 * l_reflection


def liveness_score(r_pred):
    """1 - mean(R_pred) per map; higher means more likely live."""
    r = r_pred.data if isinstance(r_pred, Tensor) else np.asarray(r_pred)
    if r.ndim <= 3:
        return float(1.0 - r.mean())
    return 1.0 - r.reshape(r.shape[0], -1).mean(axis=1)


def area_downsample(label_map, target):
    """Average non-overlapping blocks of a C x H x W map down to C x th x tw."""
    c, h, w = label_map.shape
    th, tw = target
    if h % th or w % tw:
        raise ConfigurationError(f"cannot area-downsample {h}x{w} to {th}x{tw}")
    return label_map.reshape(c, th, h // th, tw, w // tw).mean(axis=(2, 4))


class DCN:
    """Parameter container plus forward passes for the three heads."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config.validate()
        self.dtype = np.dtype(dtype).type
        arrays, self.buffers = init_params(config, np.random.default_rng(seed), self.dtype)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}

    def features(self, images, training=True, channel_major=False):
        return backbone_forward(Tensor(np.asarray(images, dtype=self.dtype)), self.params,
                                self.buffers, self.config, training, channel_major)

    def reflection(self, features, channel_major=False):
        return reflection_forward(features, self.params, channel_major)

    def patch_features(self, features, channel_major=False):
        return restore_patch_features(features, self.params, self.config.grid, channel_major)

    def losses(self, images, r_label, a_label, use_relation=True):
        """Forward a training batch; returns (L_overall, L_sim, L_reflection) tensors."""
        feats = self.features(images, training=True, channel_major=True)
        l_ref = reflection_loss(self.reflection(feats, channel_major=True), r_label)
        if use_relation:
            patches = self.patch_features(feats, channel_major=True)
            l_sim = similarity_loss(build_similarity_matrix(patches), a_label)
        else:
            l_sim = Tensor(np.zeros((), dtype=self.dtype))
        return overall_loss(l_sim, l_ref, self.config.lambda1), l_sim, l_ref

    def predict(self, images, batch_size=64):
        """Eval-mode reflection maps for a stack of images."""
        images = np.asarray(images, dtype=self.dtype)
        out = [self.reflection(self.features(images[i:i + batch_size], False, True), True).data
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out)

    def score(self, images, batch_size=64):
        return liveness_score(self.predict(images, batch_size))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    buffers: dict
    optimizer: AdamState
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def build_model(self):
        dtype = next(iter(self.params.values())).dtype
        model = DCN(self.config, dtype=dtype)
        for k, v in self.params.items():
            model.params[k].data = v.copy()
        model.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return model


def save_checkpoint(path, model, optimizer, step, rng_state=None, extra=None):
    """Write magic, u32 version, u32-length JSON manifest, then raw little-endian tensors."""
    entries = [("param/" + k, p.data) for k, p in model.params.items()]
    entries += [("buffer/" + k, v) for k, v in model.buffers.items()]
    for k in sorted(optimizer.m):
        entries += [("adam_m/" + k, optimizer.m[k]), ("adam_v/" + k, optimizer.v[k])]
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_fingerprint": model.config.fingerprint(),
        "step": int(step),
        "rng_state": rng_state or {},
        "optimizer": {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                      "eps": optimizer.eps, "step": optimizer.step},
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": np.dtype(a.dtype).newbyteorder("<").str}
                    for n, a in entries],
    }
    text = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
        fh.write(text)
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype=np.dtype(a.dtype).newbyteorder("<")).tobytes())
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise StateError(f"{path} is not a DCN checkpoint (bad magic {blob[:4]!r})")
    version, length = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise StateError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[12:12 + length].decode("utf-8"))
    config = ModelConfig(**manifest["config"])
    if config.fingerprint() != manifest["config_fingerprint"]:
        raise StateError("checkpoint config fingerprint does not match its config")
    offset = 12 + length
    groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for t in manifest["tensors"]:
        dtype = np.dtype(t["dtype"])
        n = int(np.prod(t["shape"])) * dtype.itemsize
        arr = np.frombuffer(blob[offset:offset + n], dtype=dtype).reshape(t["shape"])
        offset += n
        kind, name = t["name"].split("/", 1)
        groups[kind][name] = arr.astype(dtype.newbyteorder("="))
    opt = manifest["optimizer"]
    state = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                      step=opt["step"], m=groups["adam_m"], v=groups["adam_v"])
    return Checkpoint(config, groups["param"], groups["buffer"], state, manifest["step"],
                      manifest["rng_state"], manifest["extra"])


# ------------------------------------------------------------- gradient checks


def tiny_config():
    return ModelConfig(height=16, width=16, grid_rows=2, grid_cols=2, channels=(2, 3),
                       restore_channels=3, reflection_hidden=3)


def model_gradcheck_cases(rng):
    """(name, fn, float64 inputs) for the heads and the end-to-end objective."""
    cfg = tiny_config()
    arrays, buffers = init_params(cfg, rng, np.float64)
    # zero biases put dead-channel pre-activations exactly on the relu kink
    arrays = {k: v + rng.uniform(-0.2, 0.2, v.shape) if k.endswith("bias") else v for k, v in arrays.items()}
    names = list(arrays)
    images = rng.uniform(0, 1, size=(2, 3, cfg.height, cfg.width))
    hf, wf = cfg.feature_shape
    feats = rng.uniform(-1, 1, size=(2, cfg.feature_channels, hf, wf))
    r_label = rng.uniform(0, 1, size=(2, 1, hf, wf))
    a_label = build_label_matrix(np.array([[1, 0, 1, 1], [0, 0, 1, 0]]))

    def subset(prefix):
        keys = [k for k in names if k.startswith(prefix)]
        return keys, [arrays[k] for k in keys]

    def fresh_buffers():
        return {k: v.copy() for k, v in buffers.items()}

    bb_keys, bb_vals = subset("backbone.")
    rf_keys, rf_vals = subset("reflection.")
    rs_keys, rs_vals = subset("restore.")

    def backbone(x, *vals):
        return backbone_forward(x, dict(zip(bb_keys, vals)), fresh_buffers(), cfg)

    def reflection(f, *vals):
        return reflection_forward(f, dict(zip(rf_keys, vals)))

    def restoration(f, *vals):
        return restore_patch_features(f, dict(zip(rs_keys, vals)), cfg.grid)

    def similarity(f, *vals):
        s = restore_patch_features(f, dict(zip(rs_keys, vals)), cfg.grid)
        return similarity_loss(build_similarity_matrix(s), a_label)

    def composite(x, *vals):
        p = dict(zip(names, vals))
        f = backbone_forward(x, p, fresh_buffers(), cfg)
        l_ref = reflection_loss(reflection_forward(f, p), r_label)
        l_sim = similarity_loss(build_similarity_matrix(restore_patch_features(f, p, cfg.grid)), a_label)
        return overall_loss(l_sim, l_ref, cfg.lambda1)

    return [
        ("backbone", backbone, [images, *bb_vals]),
        ("reflection_head", reflection, [feats, *rf_vals]),
        ("restoration_head", restoration, [feats, *rs_vals]),
        ("similarity_loss_wrt_features", similarity, [feats, *rs_vals]),
        ("overall_loss_end_to_end", composite, [images, *[arrays[k] for k in names]]),
    ]

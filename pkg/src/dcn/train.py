"""Mini-batch composition and the training loop."""

import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .combination import (CROSS_CLASS, CROSS_SUBDOMAIN, View, ViewMeta, apply_combination,
                          class_mask, plan_combination)
from .destruction import Provenance, destroy, sample_permutation
from .errors import BatchError, ConfigurationError, NonFiniteError, PlanningError, ValidationError
from .model import DCN, ModelConfig, area_downsample, load_checkpoint, save_checkpoint
from .optim import Adam
from .relation import build_label_matrix
from .synth import LIVE, SPOOF, desk_manifest, generate_split, load_manifest

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

PAPER_LR = 1e-5


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    manifest: str = ""  # empty: built-in desk-scale manifest
    output_dir: str = "runs/default"
    batch_size: int = 20
    steps: int = 500
    lr: float = 1e-4
    seed: int = 0
    dtype: str = "float32"
    use_destruction: bool = True
    use_combination: bool = True
    use_relation: bool = True
    p_cross_class: float = 0.5
    p_cross_subdomain: float = 0.5
    checkpoint_every: int = 100

    def validate(self):
        bad = []
        if self.batch_size < 2 or self.batch_size % 2:
            bad.append("batch_size")
        if self.steps <= 0:
            bad.append("steps")
        if self.lr <= 0:
            bad.append("lr")
        if self.dtype not in ("float32", "float64"):
            bad.append("dtype")
        if not (0 <= self.p_cross_class <= 1 and 0 <= self.p_cross_subdomain <= 1):
            bad.append("augment probabilities")
        if self.checkpoint_every <= 0:
            bad.append("checkpoint_every")
        if bad:
            raise ValidationError("invalid train config: " + ", ".join(bad), bad)
        self.model.validate()
        return self

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError("unknown config keys: " + ", ".join(unknown), unknown)
        return cls(model=model, **d).validate()


_SECTIONS = {"train", "augment", "data"}


def _coerce(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=None):
    """Read a TOML config, apply ``key=value`` overrides, then DCN_SEED.

    Sections ``[train]``, ``[augment]`` and ``[data]`` feed the flat
    TrainConfig fields; ``[model]`` feeds ModelConfig. Override keys may be
    dotted (``model.lambda1=5``).
    """
    raw = {}
    if path:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    flat, model = {}, dict(raw.get("model", {}))
    for key, value in raw.items():
        if key == "model":
            continue
        if key in _SECTIONS and isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value", [item])
        key, text = item.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        if parts[0] == "model" and len(parts) == 2:
            model[parts[1]] = _coerce(text)
        else:
            flat[parts[-1]] = _coerce(text)
    if "DCN_SEED" in os.environ:
        flat["seed"] = int(os.environ["DCN_SEED"])
    if "channels" in model:
        model["channels"] = tuple(model["channels"])
    try:
        return TrainConfig.from_dict({**flat, "model": model})
    except (TypeError, ConfigurationError) as exc:
        raise ValidationError(str(exc), ["model"]) from exc


def resolve_manifest(config):
    return load_manifest(config.manifest) if config.manifest else desk_manifest()


# ------------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray  # B x 3 x H x W
    r_label: np.ndarray  # B x 1 x H_f x W_f
    a_label: np.ndarray  # B x P x P
    class_masks: np.ndarray  # B x P
    views: list
    base_labels: np.ndarray
    base_sample_ids: np.ndarray


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def build_batch(rng, pool, config, allow_cross_subdomain=None):
    """Half live-based and half spoof-based augmented views with labels.

    Every view is patch-permuted (identity when destruction is off); then
    cross-class and cross-subdomain exchange each apply with their own
    probability, cross-class first. Donors come from the batch's own
    permuted views.
    """
    half = config.batch_size // 2
    live = [i for i, s in enumerate(pool) if s.label == LIVE]
    spoof = [i for i, s in enumerate(pool) if s.label == SPOOF]
    if len(live) < half or len(spoof) < half:
        raise BatchError(f"pool has {len(live)} live / {len(spoof)} spoof samples; need {half} of each")
    if allow_cross_subdomain is None:
        allow_cross_subdomain = len({s.domain_id for s in pool}) >= 2
    idx = np.concatenate([rng.choice(live, half, replace=False), rng.choice(spoof, half, replace=False)])

    grid = config.model.grid
    p = grid.num_patches
    views, metas = [], []
    for i in idx:
        s = pool[i]
        sigma = sample_permutation(rng, p) if config.use_destruction else np.arange(p)
        prov = Provenance.uniform(p, s.label, s.domain_id, s.sample_id)
        views.append(View(*destroy(s.image, [s.reflection_gt], grid, sigma, prov)))
        metas.append(ViewMeta(s.label, s.domain_id))

    mixed = []
    for view, meta in zip(views, metas):
        out = view
        if config.use_combination:
            for mode, prob in ((CROSS_CLASS, config.p_cross_class), (CROSS_SUBDOMAIN, config.p_cross_subdomain)):
                if rng.random() >= prob:
                    continue
                if mode == CROSS_SUBDOMAIN and not allow_cross_subdomain:
                    continue
                try:
                    plan = plan_combination(rng, meta, metas, mode, p)
                except PlanningError:
                    continue
                out = apply_combination(out, plan, views, grid)
        mixed.append(out)

    feat = config.model.feature_shape
    masks = np.stack([class_mask(v.provenance) for v in mixed])
    return Batch(
        images=np.stack([v.image for v in mixed]).astype(config.np_dtype),
        r_label=np.stack([area_downsample(v.labels[0], feat) for v in mixed]).astype(config.np_dtype),
        a_label=build_label_matrix(masks),
        class_masks=masks,
        views=mixed,
        base_labels=np.array([m.label for m in metas]),
        base_sample_ids=np.array([pool[i].sample_id for i in idx]),
    )


# --------------------------------------------------------------------- train


@dataclass
class TrainLogRecord:
    step: int
    l_sim: float
    l_reflection: float
    l_overall: float
    wall_time: float
    rng_id: str


def _run_header(config, manifest, start_step):
    header = {"event": "run_header", "config": config.to_dict(), "manifest": manifest.to_dict(),
              "start_step": start_step}
    if config.lr != PAPER_LR:
        header["note"] = f"learning rate {config.lr:g} differs from the published setting {PAPER_LR:g}"
    return header


def train(config, resume=None, pool=None, quiet=False):
    """Run ``config.steps`` optimisation steps; returns (model, records, last checkpoint path).

    ``resume`` is a checkpoint path; steps already taken are skipped and the
    per-step rng streams make the continuation identical to an
    uninterrupted run.
    """
    config.validate()
    manifest = resolve_manifest(config)
    if (manifest.height, manifest.width) != (config.model.height, config.model.width):
        raise ValidationError("manifest image size differs from model input size", ["model.height"])
    if pool is None:
        pool = generate_split(manifest, "train")
    allow_cross = len({s.domain_id for s in pool}) >= 2
    if config.use_combination and config.p_cross_subdomain > 0 and not allow_cross:
        log.warning("training pool has a single domain; cross-subdomain combination disabled")

    model = DCN(config.model, seed=config.seed, dtype=config.np_dtype)
    opt = Adam(model.params, lr=config.lr)
    start = 0
    if resume:
        ck = load_checkpoint(resume)
        if ck.config.fingerprint() != config.model.fingerprint():
            raise ValidationError("checkpoint model config differs from the run config", ["model"])
        model = ck.build_model()
        opt = Adam(model.params, lr=config.lr)
        opt.state = ck.optimizer
        start = ck.step

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    records = []
    last_ckpt = None
    with open(log_path, "a" if resume else "w") as fh:
        fh.write(json.dumps(_run_header(config, manifest, start)) + "\n")
        t0 = time.perf_counter()
        for step in range(start, config.steps):
            rng_id = f"{config.seed}:{step}"
            batch = build_batch(step_rng(config.seed, step), pool, config, allow_cross)
            model.zero_grad()
            l_all, l_sim, l_ref = model.losses(batch.images, batch.r_label, batch.a_label, config.use_relation)
            try:
                l_all.backward(model.params)
                opt.step()
            except NonFiniteError as exc:
                # the update has not been applied, so the parameters are still the last good ones
                dump = save_checkpoint(out / "last_good.dcn", model, opt.state, step,
                                       {"seed": config.seed, "step": step})
                raise NonFiniteError(f"{exc} at step {step + 1} (batch rng {rng_id}); "
                                     f"last good state written to {dump}") from exc
            rec = TrainLogRecord(step + 1, float(l_sim.item()), float(l_ref.item()), float(l_all.item()),
                                 time.perf_counter() - t0, rng_id)
            records.append(rec)
            fh.write(json.dumps(asdict(rec)) + "\n")
            if not quiet and (step + 1) % 25 == 0:
                log.info("step %d  L=%.4f  L_sim=%.4f  L_ref=%.4f  (%.1fs)", rec.step, rec.l_overall,
                         rec.l_sim, rec.l_reflection, rec.wall_time)
            if (step + 1) % config.checkpoint_every == 0 or step + 1 == config.steps:
                extra = {"train_config": config.to_dict()}
                save_checkpoint(out / f"ckpt_{step + 1:06d}.dcn", model, opt.state, step + 1,
                                {"seed": config.seed, "next_step": step + 1}, extra)
                last_ckpt = save_checkpoint(out / "last.dcn", model, opt.state, step + 1,
                                            {"seed": config.seed, "next_step": step + 1}, extra)
    return model, records, last_ckpt

"""Procedural live/spoof face-like images with pixel-aligned reflection ground truth.

Each sample is a smooth face-like oval. Spoofs add an attack artifact inside a
bounded region: a halftone dot grid for ``print``, moire bands plus specular
blobs for ``replay``. The reflection ground truth is the artifact intensity
mask normalised to a peak of 1, and it is identically zero for live samples.
Domains differ by a colour transform, an illumination ramp and the noise
spectrum.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError

GENERATOR_VERSION = 1
LIVE, SPOOF = 1, 0
ATTACK_TYPES = ("none", "print", "replay")
_ATTACK_CODE = {name: i for i, name in enumerate(ATTACK_TYPES)}


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    label: int  # LIVE or SPOOF
    domain_id: int
    attack_type: str
    reflection_gt: np.ndarray  # 1 x H x W in [0, 1]
    sample_id: int = 0


@dataclass
class DomainStyle:
    color_matrix: np.ndarray
    color_bias: np.ndarray
    light_angle: float
    light_strength: float
    noise_sigma: float
    noise_blur: int  # box-blur radius of the noise field; 0 means white noise


def domain_style(domain_id, version=GENERATOR_VERSION):
    rng = np.random.default_rng([0xD0, version, domain_id])
    matrix = np.eye(3) + rng.normal(0.0, 0.12, size=(3, 3))
    matrix /= matrix.sum(axis=1, keepdims=True)
    return DomainStyle(
        color_matrix=matrix,
        color_bias=rng.uniform(-0.08, 0.08, size=3),
        light_angle=float(rng.uniform(0, 2 * np.pi)),
        light_strength=float(rng.uniform(0.1, 0.3)),
        noise_sigma=float(rng.uniform(0.015, 0.04)),
        noise_blur=int(domain_id % 3),
    )


def _grid(h, w):
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    return yy, xx


def _blob(yy, xx, cy, cx, ry, rx):
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return np.exp(-d)


def _live_base(rng, h, w):
    yy, xx = _grid(h, w)
    skin = np.array([0.78, 0.6, 0.5]) + rng.normal(0, 0.05, size=3)
    backdrop = rng.uniform(0.15, 0.6, size=3)

    cy, cx = rng.uniform(-0.1, 0.1, size=2)
    ry, rx = rng.uniform(0.7, 0.85), rng.uniform(0.5, 0.68)
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    face = 1.0 / (1.0 + np.exp((r2 - 1.0) * 12.0))
    shading = 1.0 - 0.35 * np.clip(r2, 0, 1)

    texture = np.zeros((h, w))
    for _ in range(4):
        fy, fx = rng.uniform(0.2, 2.0, size=2)
        texture += np.cos(np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    texture *= 0.02

    features = np.zeros((h, w))
    eye_dy, eye_dx = ry * rng.uniform(-0.3, -0.2), rx * rng.uniform(0.3, 0.45)
    for side in (-1, 1):
        features += _blob(yy, xx, cy + eye_dy, cx + side * eye_dx, 0.06, 0.1)
    features += 0.8 * _blob(yy, xx, cy + ry * rng.uniform(0.4, 0.55), cx, 0.04, rx * 0.35)
    features += 0.3 * _blob(yy, xx, cy + ry * 0.1, cx, 0.18, 0.05)

    img = np.empty((3, h, w))
    for c in range(3):
        inside = skin[c] * shading * (1.0 - 0.45 * features) + texture
        outside = backdrop[c] * (1.0 + 0.3 * yy * 0.5) + texture
        img[c] = face * inside + (1.0 - face) * outside
    return img


def _region_envelope(rng, yy, xx):
    """Smooth bump with compact support: strictly zero outside an ellipse."""
    cy, cx = rng.uniform(-0.35, 0.35, size=2)
    ry, rx = rng.uniform(0.5, 1.1, size=2)
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return np.clip(1.0 - d, 0.0, None) ** 0.5


def _print_artifact(rng, yy, xx, h, w):
    env = _region_envelope(rng, yy, xx)
    period = rng.uniform(2.8, 4.2)
    theta = rng.uniform(-0.4, 0.4)
    py, px = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = np.cos(theta) * px + np.sin(theta) * py
    v = -np.sin(theta) * px + np.cos(theta) * py
    dots = np.cos(2 * np.pi * u / period) * np.cos(2 * np.pi * v / period)
    strength = rng.uniform(0.06, 0.16)

    def apply(img):
        gray = img.mean(axis=0, keepdims=True)
        faded = img * (1 - 0.25 * env) + gray * 0.25 * env
        return faded + strength * env * dots

    return apply, env


def _replay_artifact(rng, yy, xx, h, w):
    env = _region_envelope(rng, yy, xx)
    f1 = rng.uniform(9.0, 14.0)
    df = rng.uniform(0.8, 2.0)
    theta = rng.uniform(0, np.pi)
    axis = np.cos(theta) * xx + np.sin(theta) * yy
    beat = 0.5 + 0.5 * np.cos(np.pi * df * axis)
    carrier = np.cos(np.pi * f1 * axis * 2.0)
    moire = env * (0.35 + 0.65 * beat)

    blobs = np.zeros((h, w))
    for _ in range(int(rng.integers(1, 4))):
        by, bx = rng.uniform(-0.6, 0.6, size=2)
        blobs += _blob(yy, xx, by, bx, *rng.uniform(0.08, 0.2, size=2))
    blobs = np.clip(blobs, 0, 1) * (env > 0)
    strength = rng.uniform(0.05, 0.14)
    glare = rng.uniform(0.15, 0.35)
    mask = np.maximum(moire, blobs)

    def apply(img):
        return img + strength * moire * carrier + glare * blobs

    return apply, mask


def _apply_domain(img, style, noise_rng, yy, xx):
    h, w = img.shape[1:]
    out = np.einsum("ij,jhw->ihw", style.color_matrix, img) + style.color_bias[:, None, None]
    ramp = np.cos(style.light_angle) * xx + np.sin(style.light_angle) * yy
    out = out * (1.0 + style.light_strength * ramp)
    noise = noise_rng.normal(0.0, 1.0, size=(3, h, w))
    r = style.noise_blur
    if r:
        k = 2 * r + 1
        padded = np.pad(noise, ((0, 0), (r, r), (r, r)), mode="wrap")
        noise = sum(padded[:, i:i + h, j:j + w] for i in range(k) for j in range(k)) / k
    return out + style.noise_sigma * noise


def generate_sample(seed, domain_id, label, attack_type, height=96, width=96,
                    num_domains=3, sample_id=0, version=GENERATOR_VERSION):
    """Render one sample; deterministic in all arguments."""
    if not 0 <= domain_id < num_domains:
        raise ConfigurationError(f"domain_id {domain_id} outside [0, {num_domains})")
    if attack_type not in _ATTACK_CODE:
        raise ConfigurationError(f"unknown attack_type {attack_type!r}; expected one of {ATTACK_TYPES}")
    if label not in (LIVE, SPOOF):
        raise ConfigurationError(f"label must be LIVE (1) or SPOOF (0), got {label!r}")
    if (label == LIVE) != (attack_type == "none"):
        raise ConfigurationError(f"attack_type {attack_type!r} is inconsistent with label {label}")

    seed = int(seed)
    yy, xx = _grid(height, width)
    img = _live_base(np.random.default_rng([seed, version, 1]), height, width)
    gt = np.zeros((1, height, width))
    if label == SPOOF:
        art_rng = np.random.default_rng([seed, version, 2, _ATTACK_CODE[attack_type]])
        make = _print_artifact if attack_type == "print" else _replay_artifact
        apply, mask = make(art_rng, yy, xx, height, width)
        img = apply(img)
        gt[0] = mask / mask.max()
    noise_rng = np.random.default_rng([seed, version, 3, domain_id])
    img = _apply_domain(img, domain_style(domain_id, version), noise_rng, yy, xx)
    return Sample(
        image=np.clip(img, 0.0, 1.0).astype(np.float32),
        label=label,
        domain_id=domain_id,
        attack_type=attack_type,
        reflection_gt=gt.astype(np.float32),
        sample_id=int(sample_id),
    )


# ------------------------------------------------------------------ manifest


@dataclass
class SplitSpec:
    count: int
    live_fraction: float = 0.5
    domains: list = field(default_factory=lambda: [0])
    attack_types: list = field(default_factory=lambda: ["print", "replay"])


@dataclass
class DatasetManifest:
    seed: int
    num_domains: int
    height: int
    width: int
    splits: dict  # name -> SplitSpec, in declaration order
    generator_version: int = GENERATOR_VERSION

    def validate(self):
        bad = []
        if self.num_domains < 1:
            bad.append("num_domains")
        if self.height < 1 or self.width < 1:
            bad.append("height/width")
        if not self.splits:
            bad.append("splits")
        for name, s in self.splits.items():
            if s.count <= 0:
                bad.append(f"splits.{name}.count")
            n_live = s.count * s.live_fraction
            if not 0.0 <= s.live_fraction <= 1.0 or abs(n_live - round(n_live)) > 1e-9:
                bad.append(f"splits.{name}.live_fraction")
            if not s.domains or any(not 0 <= d < self.num_domains for d in s.domains):
                bad.append(f"splits.{name}.domains")
            if not s.attack_types or any(a not in ("print", "replay") for a in s.attack_types):
                bad.append(f"splits.{name}.attack_types")
        if bad:
            raise ValidationError("manifest inconsistent: " + ", ".join(bad), bad)
        return self

    def class_counts(self, split):
        s = self.splits[split]
        n_live = int(round(s.count * s.live_fraction))
        return n_live, s.count - n_live

    def to_dict(self):
        return {
            "seed": self.seed,
            "num_domains": self.num_domains,
            "height": self.height,
            "width": self.width,
            "generator_version": self.generator_version,
            "splits": {k: vars(v) for k, v in self.splits.items()},
        }

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in ("seed", "num_domains", "height", "width", "splits") if k not in d]
        if missing:
            raise ValidationError("manifest missing fields: " + ", ".join(missing), missing)
        try:
            splits = {k: SplitSpec(**v) for k, v in d["splits"].items()}
        except TypeError as exc:
            raise ValidationError(f"bad split entry: {exc}", ["splits"]) from exc
        return cls(seed=int(d["seed"]), num_domains=int(d["num_domains"]), height=int(d["height"]),
                   width=int(d["width"]), splits=splits,
                   generator_version=int(d.get("generator_version", GENERATOR_VERSION))).validate()


def load_manifest(path):
    with open(path) as fh:
        return DatasetManifest.from_dict(json.load(fh))


def save_manifest(manifest, path):
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return path


def desk_manifest(seed=0):
    """3 domains: 512/128/128 train/dev/test on domains 0-1, 128 held out on domain 2."""
    return DatasetManifest(
        seed=seed, num_domains=3, height=96, width=96,
        splits={
            "train": SplitSpec(512, 0.5, [0, 1]),
            "dev": SplitSpec(128, 0.5, [0, 1]),
            "test": SplitSpec(128, 0.5, [0, 1]),
            "heldout": SplitSpec(128, 0.5, [2]),
        },
    ).validate()


def sample_seed(manifest_seed, sample_id):
    return int(np.random.SeedSequence([manifest_seed, sample_id]).generate_state(1, np.uint64)[0])


def split_plan(manifest, split):
    """(sample_id, label, domain, attack_type) rows for a split, in output order."""
    manifest.validate()
    if split not in manifest.splits:
        raise ValidationError(f"split {split!r} not declared in manifest", ["splits"])
    index = list(manifest.splits).index(split)
    s = manifest.splits[split]
    n_live, n_spoof = manifest.class_counts(split)
    nd = len(s.domains)
    rows = []
    for i in range(n_live):
        rows.append((LIVE, s.domains[i % nd], "none"))
    for j in range(n_spoof):
        rows.append((SPOOF, s.domains[j % nd], s.attack_types[(j // nd) % len(s.attack_types)]))
    return [((index << 32) + i, *row) for i, row in enumerate(rows)]


def generate_split(manifest, split):
    return [
        generate_sample(sample_seed(manifest.seed, sid), dom, label, attack,
                        manifest.height, manifest.width, manifest.num_domains, sid,
                        manifest.generator_version)
        for sid, label, dom, attack in split_plan(manifest, split)
    ]


# ------------------------------------------------------------------ previews


def _to_bytes(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ConfigurationError("preview values must lie in [0, 1]")
    return np.rint(arr * 255.0).astype(np.uint8)


def dump_preview(image, path):
    """Write a 3xHxW image as binary PPM, or a 1xHxW / HxW map as PGM."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 3:
        h, w = image.shape[1:]
        payload = _to_bytes(image.transpose(1, 2, 0)).tobytes()
        header = f"P6\n{w} {h}\n255\n"
    else:
        if image.ndim == 3:
            image = image[0]
        h, w = image.shape
        payload = _to_bytes(image).tobytes()
        header = f"P5\n{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + payload)
    return path


def read_pnm(path):
    """Inverse of :func:`dump_preview`; returns a uint8 array (C x H x W)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic, (w, h), payload = parts[0], map(int, parts[1].split()), parts[3]
    if magic == b"P6":
        return np.frombuffer(payload, np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return np.frombuffer(payload, np.uint8).reshape(1, h, w)

"""Desk-scale experiment runners shared by scripts/ and the acceptance suite."""

import time
from dataclasses import dataclass, replace

import numpy as np

from .metrics import model_scorer, run_protocol
from .synth import generate_split
from .train import TrainConfig, resolve_manifest, train

# (use_destruction, use_combination, use_relation) for the ablation ladder
ABLATION = {
    "baseline": (False, False, False),
    "sdm": (True, False, False),
    "sdm_ccm": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class RunResult:
    name: str
    seed: int
    steps: int
    seconds: float
    loss_initial: float
    loss_final: float
    intra_acer: float
    cross_acer: float
    cross_hter: float


def window_mean(records, n=10, last=False):
    """Mean L_overall over the first (or last) ``n`` log records."""
    values = [r.l_overall for r in records]
    return float(np.mean(values[-n:] if last else values[:n]))


def load_splits(manifest):
    return {name: generate_split(manifest, name) for name in manifest.splits}


def run_variant(name, seed, steps, base=None, splits=None, output_dir=None, quiet=True):
    """Train one ablation variant and evaluate it under both protocols."""
    base = base or TrainConfig()
    dest, comb, rel = ABLATION[name]
    config = replace(base, seed=seed, steps=steps, use_destruction=dest, use_combination=comb,
                     use_relation=rel, checkpoint_every=steps,
                     output_dir=output_dir or f"{base.output_dir}/{name}_s{seed}").validate()
    manifest = resolve_manifest(config)
    splits = splits or load_splits(manifest)
    t0 = time.perf_counter()
    model, records, _ = train(config, pool=splits["train"], quiet=quiet)
    seconds = time.perf_counter() - t0
    scorer = model_scorer(model)
    intra, _ = run_protocol(scorer, manifest, "intra", splits)
    cross, _ = run_protocol(scorer, manifest, "cross", splits)
    return RunResult(name, seed, steps, seconds, window_mean(records), window_mean(records, last=True),
                     intra.acer, cross.acer, cross.hter)


def non_increasing(values):
    return all(b <= a for a, b in zip(values, values[1:]))

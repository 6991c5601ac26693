"""Presentation-attack detection metrics and the intra/cross-domain protocol runner.

Scores are liveness scores: higher means more likely bona fide. A sample is
classified live iff ``score >= threshold``.
"""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EvaluationError, ValidationError
from .synth import LIVE, SPOOF, generate_split


@dataclass
class ScoredSample:
    score: float
    label: int
    attack_type: str = "none"
    domain_id: int = 0
    sample_id: int = 0


@dataclass
class EvalReport:
    protocol: str
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    hter: float
    far: float
    frr: float
    apcer_per_type: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    dev_split: str = ""
    test_split: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _arrays(samples):
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples])
    attacks = np.array([s.attack_type for s in samples], dtype=object)
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    return scores, labels, attacks


def _require_both(labels):
    if not np.any(labels == SPOOF):
        raise EvaluationError("no attack (spoof) samples in the evaluation set")
    if not np.any(labels == LIVE):
        raise EvaluationError("no bona fide (live) samples in the evaluation set")


def classify(scores, threshold):
    """LIVE where score >= threshold, else SPOOF."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.where(scores >= threshold, LIVE, SPOOF)


def apcer_bpcer_acer(samples, threshold):
    """(APCER, BPCER, ACER, per-attack-type APCER dict); APCER is the worst attack type."""
    scores, labels, attacks = _arrays(samples)
    _require_both(labels)
    pred = classify(scores, threshold)
    spoof = labels == SPOOF
    per_type = {}
    for t in sorted(set(attacks[spoof])):
        sel = spoof & (attacks == t)
        per_type[t] = float(np.mean(pred[sel] == LIVE))
    apcer = max(per_type.values())
    bpcer = float(np.mean(pred[labels == LIVE] == SPOOF))
    return apcer, bpcer, (apcer + bpcer) / 2, per_type


def far_frr(samples, threshold):
    scores, labels, _ = _arrays(samples)
    _require_both(labels)
    pred = classify(scores, threshold)
    far = float(np.mean(pred[labels == SPOOF] == LIVE))
    frr = float(np.mean(pred[labels == LIVE] == SPOOF))
    return far, frr


def hter(samples, threshold):
    far, frr = far_frr(samples, threshold)
    return (far + frr) / 2


def eer_threshold(samples):
    """Midpoint between adjacent distinct scores minimising |FAR - FRR|.

    Ties go to the smaller threshold. With a single distinct score that score
    is returned.
    """
    scores, labels, _ = _arrays(samples)
    _require_both(labels)
    distinct = np.unique(scores)
    if len(distinct) == 1:
        return float(distinct[0])
    candidates = (distinct[:-1] + distinct[1:]) / 2
    live = np.sort(scores[labels == LIVE])
    spoof = np.sort(scores[labels == SPOOF])
    far = (len(spoof) - np.searchsorted(spoof, candidates, side="left")) / len(spoof)
    frr = np.searchsorted(live, candidates, side="left") / len(live)
    return float(candidates[np.argmin(np.abs(far - frr))])


def evaluate(samples, threshold, protocol="", dev_split="", test_split=""):
    apcer, bpcer, acer, per_type = apcer_bpcer_acer(samples, threshold)
    far, frr = far_frr(samples, threshold)
    labels = np.array([s.label for s in samples])
    counts = {"live": int(np.sum(labels == LIVE)), "spoof": int(np.sum(labels == SPOOF))}
    return EvalReport(protocol, float(threshold), apcer, bpcer, acer, (far + frr) / 2, far, frr,
                      per_type, counts, dev_split, test_split)


# ------------------------------------------------------------------ protocols

PROTOCOL_SPLITS = {"intra": ("dev", "test"), "cross_domain": ("dev", "heldout")}


def protocol_splits(manifest, protocol, train_split="train"):
    protocol = "cross_domain" if protocol == "cross" else protocol
    if protocol not in PROTOCOL_SPLITS:
        raise ValidationError(f"unknown protocol {protocol!r}", ["protocol"])
    dev, test = PROTOCOL_SPLITS[protocol]
    missing = [s for s in (dev, test) if s not in manifest.splits]
    if missing:
        raise ValidationError(f"protocol {protocol} needs splits {missing}", ["splits"])
    if protocol == "cross_domain":
        seen = set(manifest.splits[dev].domains)
        if train_split in manifest.splits:
            seen |= set(manifest.splits[train_split].domains)
        if seen & set(manifest.splits[test].domains):
            raise ValidationError("held-out domains overlap the training/dev domains",
                                  [f"splits.{test}.domains"])
    return protocol, dev, test


def score_samples(scorer, samples):
    scores = np.asarray(scorer(samples) if samples else [], dtype=np.float64)
    return [ScoredSample(float(sc), s.label, s.attack_type, s.domain_id, s.sample_id)
            for sc, s in zip(scores, samples)]


def run_protocol(scorer, manifest, protocol, splits=None):
    """Threshold at EER on the dev split, report on the test split.

    ``scorer`` maps a list of samples to liveness scores.
    ``splits`` optionally supplies pre-generated samples by split name.
    Returns (report, scored test samples).
    """
    protocol, dev, test = protocol_splits(manifest, protocol)
    splits = splits or {}
    dev_samples = splits.get(dev) or generate_split(manifest, dev)
    test_samples = splits.get(test) or generate_split(manifest, test)
    threshold = eer_threshold(score_samples(scorer, dev_samples))
    scored = score_samples(scorer, test_samples)
    return evaluate(scored, threshold, protocol, dev, test), scored


def oracle_scorer(samples):
    """Ground-truth scorer: 1 - mean(reflection_gt)."""
    return [1.0 - float(s.reflection_gt.mean()) for s in samples]


def model_scorer(model):
    def scorer(samples):
        return model.score(np.stack([s.image for s in samples]))

    return scorer


def write_scores_csv(path, scored):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "class", "attack_type", "domain_id"])
        for s in scored:
            w.writerow([s.sample_id, repr(s.score), s.label, s.attack_type, s.domain_id])


def read_scores_csv(path):
    with open(path, newline="") as fh:
        return [ScoredSample(float(r["score"]), int(r["class"]), r["attack_type"], int(r["domain_id"]),
                             int(r["sample_id"])) for r in csv.DictReader(fh)]


def append_report(path, report):
    with open(path, "a") as fh:
        fh.write(report.to_json() + "\n")

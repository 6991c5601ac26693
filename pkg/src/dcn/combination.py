"""Cross-class and cross-subdomain patch exchange between patch-permuted views."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .destruction import Provenance
from .errors import ConfigurationError, PlanningError

CROSS_CLASS = "cross_class"
CROSS_SUBDOMAIN = "cross_subdomain"


class View(NamedTuple):
    image: np.ndarray
    labels: list  # aligned label maps, e.g. [reflection_gt]
    provenance: Provenance


class ViewMeta(NamedTuple):
    label: int
    domain_id: int


@dataclass
class CombinationPlan:
    mode: str
    count: int
    slots: np.ndarray  # distinct grid slots to overwrite
    donors: np.ndarray  # pool index of the donor for each slot


def eligible_donors(base_meta, pool_meta, mode):
    if mode == CROSS_CLASS:
        return [i for i, m in enumerate(pool_meta) if m.label != base_meta.label]
    if mode == CROSS_SUBDOMAIN:
        return [i for i, m in enumerate(pool_meta) if m.domain_id != base_meta.domain_id]
    raise ConfigurationError(f"unknown combination mode {mode!r}")


def plan_combination(rng, base_meta, pool_meta, mode, num_patches, count_range=None):
    """Draw an exchange count, the slots and one eligible donor per slot.

    ``count_range`` is an inclusive (low, high) pair, default (1, P - 1).
    """
    low, high = count_range or (1, num_patches - 1)
    if not 0 < low <= high < num_patches:
        raise ConfigurationError(f"exchange count range {low}..{high} must lie in 1..{num_patches - 1}")
    pool = eligible_donors(base_meta, pool_meta, mode)
    if not pool:
        raise PlanningError(f"no eligible donor for {mode} (base label={base_meta.label}, "
                            f"domain={base_meta.domain_id})")
    count = int(rng.integers(low, high + 1))
    slots = np.sort(rng.choice(num_patches, size=count, replace=False))
    donors = np.asarray(pool)[rng.integers(0, len(pool), size=count)]
    return CombinationPlan(mode, count, slots, donors)


def _replace_slots(target, grid, slots, donor_for_slot):
    c, height, width = target.shape
    h, w = grid.patch_size(height, width)
    out = target.copy()
    for s, d in zip(slots, donor_for_slot):
        if d.shape != target.shape:
            raise ConfigurationError(f"donor map {d.shape} does not match base {target.shape}")
        r, q = divmod(int(s), grid.cols)
        out[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = d[:, r * h:(r + 1) * h, q * w:(q + 1) * w]
    return out


def apply_combination(base, plan, pool, grid):
    """Overwrite ``plan.slots`` of ``base`` with the same slots of the donors.

    ``pool`` is the sequence of candidate views the plan indexes into.
    """
    if len(base.labels) and any(len(pool[d].labels) != len(base.labels) for d in plan.donors):
        raise ConfigurationError("donor and base carry different numbers of label maps")
    donors = [pool[d] for d in plan.donors]
    image = _replace_slots(base.image, grid, plan.slots, [d.image for d in donors])
    labels = [
        _replace_slots(lab, grid, plan.slots, [d.labels[i] for d in donors])
        for i, lab in enumerate(base.labels)
    ]
    prov = base.provenance.copy()
    for s, d in zip(plan.slots, donors):
        prov.labels[s] = d.provenance.labels[s]
        prov.domains[s] = d.provenance.domains[s]
        prov.sample_ids[s] = d.provenance.sample_ids[s]
    return View(image, labels, prov)


def class_mask(provenance):
    return provenance.labels.copy()


def domain_mask(provenance):
    return provenance.domains.copy()


"""Patch-grid splitting, jigsaw permutation and co-transform of aligned label maps.

Slots are indexed row-major: slot p sits at grid row p // N, column p % N.
A permutation ``sigma`` places source patch ``sigma[p]`` at slot ``p``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class GridSpec:
    rows: int = 3
    cols: int = 3

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ConfigurationError(f"grid {self.rows}x{self.cols} needs at least 2 patches")

    @property
    def num_patches(self):
        return self.rows * self.cols

    def patch_size(self, height, width):
        if height % self.rows or width % self.cols:
            raise ConfigurationError(
                f"extent {height}x{width} is not divisible by the {self.rows}x{self.cols} grid")
        return height // self.rows, width // self.cols


@dataclass
class Provenance:
    """Per-slot origin of the content: class label, domain id and sample id."""

    labels: np.ndarray
    domains: np.ndarray
    sample_ids: np.ndarray

    @classmethod
    def uniform(cls, num_patches, label, domain_id, sample_id):
        return cls(np.full(num_patches, label, dtype=np.int64),
                   np.full(num_patches, domain_id, dtype=np.int64),
                   np.full(num_patches, sample_id, dtype=np.int64))

    def __len__(self):
        return len(self.labels)

    def take(self, index):
        index = np.asarray(index)
        return Provenance(self.labels[index], self.domains[index], self.sample_ids[index])

    def copy(self):
        return self.take(np.arange(len(self)))

    def differs(self, other):
        """Boolean per-slot mask of entries that are not identical."""
        return ((self.labels != other.labels) | (self.domains != other.domains)
                | (self.sample_ids != other.sample_ids))

    def to_dict(self):
        return {"labels": self.labels.tolist(), "domains": self.domains.tolist(),
                "sample_ids": self.sample_ids.tolist()}


def split(image, grid):
    """List of P patches (C x h x w) in row-major slot order."""
    c, height, width = image.shape
    h, w = grid.patch_size(height, width)
    blocks = image.reshape(c, grid.rows, h, grid.cols, w).transpose(1, 3, 0, 2, 4)
    return [blocks[r, q] for r in range(grid.rows) for q in range(grid.cols)]


def assemble(patches, grid):
    """Inverse of :func:`split`."""
    if len(patches) != grid.num_patches:
        raise ConfigurationError(f"expected {grid.num_patches} patches, got {len(patches)}")
    stack = np.stack(patches)
    p, c, h, w = stack.shape
    return stack.reshape(grid.rows, grid.cols, c, h, w).transpose(2, 0, 3, 1, 4).reshape(
        c, grid.rows * h, grid.cols * w)


def permute_patches(image, grid, sigma):
    """Slot p of the result holds source patch sigma[p]."""
    c, height, width = image.shape
    h, w = grid.patch_size(height, width)
    blocks = image.reshape(c, grid.rows, h, grid.cols, w).transpose(1, 3, 0, 2, 4)
    blocks = blocks.reshape(grid.num_patches, c, h, w)[np.asarray(sigma)]
    return blocks.reshape(grid.rows, grid.cols, c, h, w).transpose(2, 0, 3, 1, 4).reshape(
        c, height, width)


def sample_permutation(rng, num_patches):
    """Uniform draw over all P! permutations (Fisher-Yates)."""
    sigma = np.arange(num_patches)
    for i in range(num_patches - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        sigma[i], sigma[j] = sigma[j], sigma[i]
    return sigma


def check_permutation(sigma, num_patches):
    sigma = np.asarray(sigma)
    if sigma.shape != (num_patches,) or not np.array_equal(np.sort(sigma), np.arange(num_patches)):
        raise ConfigurationError(f"{sigma.tolist()} is not a permutation of range({num_patches})")
    return sigma


def inverse_permutation(sigma):
    sigma = np.asarray(sigma)
    inv = np.empty_like(sigma)
    inv[sigma] = np.arange(len(sigma))
    return inv


def compose(first, second):
    """Permutation equal to applying ``first`` and then ``second``."""
    return np.asarray(first)[np.asarray(second)]


def destroy(image, labels, grid, sigma, provenance):
    """Permute the image, every aligned label map and the provenance together.

    Label maps may have a different resolution from the image; each is split
    on its own proportional grid.
    """
    sigma = check_permutation(sigma, grid.num_patches)
    if len(provenance) != grid.num_patches:
        raise ConfigurationError(f"provenance has {len(provenance)} entries, grid has {grid.num_patches}")
    out_image = permute_patches(image, grid, sigma)
    out_labels = [permute_patches(lab, grid, sigma) for lab in labels]
    return out_image, out_labels, provenance.take(sigma)


def grid_overlay(image, grid, color=(1.0, 1.0, 0.0)):
    """Copy of a 3 x H x W image with slot boundaries drawn in ``color``."""
    out = np.array(image, copy=True)
    _, height, width = out.shape
    h, w = grid.patch_size(height, width)
    col = np.asarray(color, dtype=out.dtype)[:, None]
    for r in range(1, grid.rows):
        out[:, r * h, :] = col
    for q in range(1, grid.cols):
        out[:, :, q * w] = col
    return out

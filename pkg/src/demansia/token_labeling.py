"""Per-patch dense supervision: targets, auxiliary loss, synthetic data.

A dense label map assigns every pixel a class distribution. Patch targets
are the per-patch pixel means (renormalized), one soft distribution per
patch token in the same row-major order the stem produces. The auxiliary
loss is the mean soft cross entropy over patch positions and is added to
the class loss with weight beta.

The synthetic dataset renders one colored geometric shape per image on a
textured background. Class 0 is reserved for background pixels; image
labels cycle over the shape classes 1..n_classes-1, so dense maps carry
real per-patch signal. Generation is counter-seeded per sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError, DomainError, ValidationError
from .numerics import Tensor, record

__all__ = [
    "DenseLabelMap",
    "PatchTargets",
    "Sample",
    "make_patch_targets",
    "token_label_loss",
    "total_loss",
    "synth_dense_dataset",
    "synth_sample",
    "N_SHAPE_KINDS",
]

N_SHAPE_KINDS = 9


@dataclass(frozen=True)
class DenseLabelMap:
    """(H, W, n_classes) nonnegative scores, each pixel summing to 1."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 3:
            raise DimensionError(f"dense map must be (H, W, n_classes), got {s.shape}")
        if np.any(s < 0):
            raise ValidationError("dense map scores must be nonnegative")
        sums = s.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ValidationError("dense map pixels must sum to 1 within 1e-6")
        object.__setattr__(self, "scores", s)

    @property
    def n_classes(self) -> int:
        return self.scores.shape[2]


@dataclass(frozen=True)
class PatchTargets:
    """(J, n_classes) soft distributions, one per patch token."""

    targets: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.float64)
        if t.ndim != 2:
            raise DimensionError(f"patch targets must be (J, n_classes), got {t.shape}")
        if np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-6:
            raise ValidationError("patch target rows must sum to 1 within 1e-6")
        object.__setattr__(self, "targets", t)

    @property
    def n_patches(self) -> int:
        return self.targets.shape[0]


class Sample(NamedTuple):
    image: np.ndarray  # (H, W, 3) in [0, 1]
    label: int
    dense_map: DenseLabelMap


def make_patch_targets(label_map: DenseLabelMap, patch_size: int) -> PatchTargets:
    """Mean pixel distribution per patch, row-major over the patch grid."""
    h, w, k = label_map.scores.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"map {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    pooled = label_map.scores.reshape(gh, patch_size, gw, patch_size, k).mean(axis=(1, 3))
    flat = pooled.reshape(gh * gw, k)
    flat = flat / flat.sum(axis=1, keepdims=True)
    return PatchTargets(flat)


def token_label_loss(patch_logits: Tensor, targets: PatchTargets) -> Tensor:
    """Mean over patch positions of soft-target cross entropy.

    One fused taped op; equals the mean of per-row `cross_entropy` calls.
    """
    t = targets.targets
    if patch_logits.shape != t.shape:
        raise DimensionError(f"patch logits {patch_logits.shape} do not match targets {t.shape}")
    j = t.shape[0]
    lv = patch_logits.data
    m = lv.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(lv - m).sum(axis=1, keepdims=True))
    per_row = lse[:, 0] - (t * lv).sum(axis=1)
    out = Tensor(per_row.mean())
    sm = np.exp(lv - lse)

    def rule(g):
        return (g * (sm - t) / j,)

    return record(out, (patch_logits,), rule)


def total_loss(
    class_logits: Tensor,
    class_target,
    patch_logits: Tensor,
    targets: PatchTargets,
    beta: float,
) -> Tensor:
    """Class cross entropy plus beta times the token labeling loss.

    beta = 0 returns the class term itself (bit-exact degenerate form, and
    no gradient reaches the patch branch).
    """
    if beta < 0:
        raise DomainError(f"beta must be >= 0, got {beta}")
    class_term = nm.cross_entropy(class_logits, class_target)
    if beta == 0.0:
        return class_term
    return nm.add(class_term, nm.scale(token_label_loss(patch_logits, targets), beta))


# ---------------------------------------------------------------------------
# synthetic dense-map dataset
# ---------------------------------------------------------------------------


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one rendered shape on a size x size canvas."""
    s = float(rng.uniform(size / 6.0, size / 3.5))
    cy = float(rng.uniform(s + 1, size - s - 2))
    cx = float(rng.uniform(s + 1, size - s - 2))
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    r2 = dy * dy + dx * dx
    if kind == 0:  # disk
        return r2 <= s * s
    if kind == 1:  # square
        return np.maximum(np.abs(dy), np.abs(dx)) <= s
    if kind == 2:  # triangle
        return (dy >= -s) & (dy <= s - 2.0 * np.abs(dx))
    if kind == 3:  # ring
        return (r2 >= (0.5 * s) ** 2) & (r2 <= s * s)
    if kind == 4:  # plus
        third = s / 3.0
        return ((np.abs(dx) <= third) & (np.abs(dy) <= s)) | ((np.abs(dy) <= third) & (np.abs(dx) <= s))
    if kind == 5:  # diamond
        return np.abs(dy) + np.abs(dx) <= s
    if kind == 6:  # horizontal bar
        return (np.abs(dy) <= s / 2.5) & (np.abs(dx) <= s)
    if kind == 7:  # vertical bar
        return (np.abs(dx) <= s / 2.5) & (np.abs(dy) <= s)
    if kind == 8:  # hollow square frame
        outer = np.maximum(np.abs(dy), np.abs(dx))
        return (outer <= s) & (outer >= 0.55 * s)
    raise ConfigError(f"unknown shape kind {kind}")


def _textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-channel noise field, kept dark so shapes stand out."""
    coarse = rng.uniform(0.0, 0.45, (4, 4, 3))
    idx = np.linspace(0, 3, size)
    lo = np.floor(idx).astype(int)
    hi = np.minimum(lo + 1, 3)
    frac = idx - lo
    rows = coarse[lo] * (1 - frac)[:, None, None] + coarse[hi] * frac[:, None, None]
    cols = rows[:, lo] * (1 - frac)[None, :, None] + rows[:, hi] * frac[None, :, None]
    return cols


def synth_sample(seed: int, index: int, image_size: int, n_classes: int) -> Sample:
    """One deterministic sample; the (seed, index) pair fixes everything."""
    if n_classes < 2 or n_classes - 1 > N_SHAPE_KINDS:
        raise ConfigError(f"n_classes must be in [2, {N_SHAPE_KINDS + 1}], got {n_classes}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, index)))
    label = 1 + index % (n_classes - 1)
    mask = _shape_mask(label - 1, image_size, rng)
    image = _textured_background(image_size, rng)
    color = rng.uniform(0.55, 1.0, 3)
    image[mask] = color
    image += rng.normal(0.0, 0.02, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    scores = np.zeros((image_size, image_size, n_classes))
    scores[..., 0] = ~mask
    scores[mask, label] = 1.0
    return Sample(image=image, label=label, dense_map=DenseLabelMap(scores))


def synth_dense_dataset(seed: int, n_samples: int, image_size: int, n_classes: int) -> list[Sample]:
    """Deterministic list of shape images with per-pixel one-hot maps.

    Labels cycle over 1..n_classes-1 so long runs stay class balanced;
    per-sample counter seeding keeps any slice reproducible on its own.
    """
    return [synth_sample(seed, i, image_size, n_classes) for i in range(n_samples)]

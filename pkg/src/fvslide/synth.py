"""Synthetic slide generator for desk-scale validation.

The Fisher encoding is translation-invariant by construction: codebooks are
fit on each cluster's own descriptors, so shifting every patch of a slide
shifts the fitted centers equally and the residual statistics are unchanged.
A useful synthetic signal therefore has to live in the *shape* of the patch
distribution, not just its location. Each class here gets:

  - a base center, so class centers are separated by `separation` in
    expectation (location signal; invisible to the encoder, kept for realism),
  - a shared phenotype constellation (offsets drawn once for all classes),
  - a class-specific covariance shape per phenotype, scaled by
    separation / SHAPE_REFERENCE (shape signal; this is what the encoder and
    classifier can actually use). The shape is per-coordinate variance
    scaling plus a mild dense mixing term; per-coordinate scaling lands
    directly in the encoding's second-order statistics.

At separation 0 every knob vanishes and the class-conditional distributions
are exactly identical, so any classifier's expected AUC is 0.5. Every draw
derives from the generator seed, keyed per slide, so regeneration is
bit-identical and independent of slide order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, ManifestEntry, SLIDEPACK_EXT, SlidePack, ValidationError
from .data import load_manifest, write_manifest, write_slidepack
from .seeds import child_seed, make_rng

# separation at which the per-class covariance perturbation reaches design
# strength
SHAPE_REFERENCE = 20.0
_LOG_SCALE_STD = 0.6  # per-coordinate log variance-scale spread at reference
_MIX_STD = 0.7  # dense mixing strength at reference, relative to 1/sqrt(dim)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 2
    slides_per_class: int = 100
    patches_min: int = 100
    patches_max: int = 300
    dim: int = 32
    phenotypes_per_class: int = 3
    separation: float = 20.0
    phenotype_spread: float = 1.0
    patch_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.slides_per_class < 1 or self.dim < 1 or self.phenotypes_per_class < 1:
            raise ValidationError("slides_per_class, dim and phenotypes_per_class must be >= 1")
        if not (1 <= self.patches_min <= self.patches_max):
            raise ValidationError("need 1 <= patches_min <= patches_max")
        if self.separation < 0:
            raise ValidationError("separation must be >= 0")


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """Write slide packs, manifest and classes.txt under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = make_rng(child_seed(spec.seed, "synth", "centers"))
    # E||mu_a - mu_b|| ~= separation for independent Gaussian class centers
    center_scale = spec.separation / np.sqrt(2.0 * spec.dim)
    class_centers = rng.normal(0.0, 1.0, size=(spec.n_classes, spec.dim)) * center_scale
    offsets = rng.normal(0.0, spec.phenotype_spread, size=(spec.phenotypes_per_class, spec.dim))
    coef = spec.separation / SHAPE_REFERENCE
    log_scales = coef * rng.normal(
        0.0, _LOG_SCALE_STD, size=(spec.n_classes, spec.phenotypes_per_class, spec.dim)
    )
    mixing = coef * rng.normal(
        0.0,
        _MIX_STD / np.sqrt(spec.dim),
        size=(spec.n_classes, spec.phenotypes_per_class, spec.dim, spec.dim),
    )
    shapes = np.empty_like(mixing)
    for c in range(spec.n_classes):
        for p in range(spec.phenotypes_per_class):
            shapes[c, p] = np.diag(np.exp(log_scales[c, p])) @ (np.eye(spec.dim) + mixing[c, p])

    entries = []
    for c in range(spec.n_classes):
        for i in range(spec.slides_per_class):
            slide_id = f"c{c}_s{i:04d}"
            srng = make_rng(child_seed(spec.seed, "synth", "slide", slide_id))
            n_patches = int(srng.integers(spec.patches_min, spec.patches_max + 1))
            phenotype = srng.integers(0, spec.phenotypes_per_class, size=n_patches)
            noise = srng.normal(0.0, spec.patch_noise, size=(n_patches, spec.dim))
            x = np.empty((n_patches, spec.dim))
            for p in range(spec.phenotypes_per_class):
                rows = phenotype == p
                x[rows] = class_centers[c] + offsets[p] + noise[rows] @ shapes[c, p].T
            pack = SlidePack(slide_id, c, x.astype(np.float32))
            rel = slide_id + SLIDEPACK_EXT
            write_slidepack(pack, out_dir / rel)
            entries.append(ManifestEntry(slide_id, c, rel, n_patches, spec.dim))

    manifest_path = out_dir / "manifest.csv"
    write_manifest(entries, manifest_path, class_names=[f"class_{c}" for c in range(spec.n_classes)])
    return load_manifest(manifest_path)

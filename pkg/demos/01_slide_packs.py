"""Slide packs and manifests: the on-disk inputs to everything else.

A slide pack is one slide's bag of patch embeddings in a small binary
format (magic "WSFV", version, shape header, float32 payload). A manifest
CSV indexes many packs and carries the labels.
"""

import tempfile
from pathlib import Path

import numpy as np

from fvslide import (
    ManifestEntry,
    SlidePack,
    load_manifest,
    read_slidepack,
    write_manifest,
    write_slidepack,
)

work = Path(tempfile.mkdtemp(prefix="fvslide_demo_"))
rng = np.random.default_rng(0)

# Two tiny "slides": 6 and 9 patches of 4-dim embeddings.
packs = [
    SlidePack("slide_a", 0, rng.normal(size=(6, 4)).astype(np.float32)),
    SlidePack("slide_b", 1, rng.normal(size=(9, 4)).astype(np.float32)),
]
for pack in packs:
    path = work / f"{pack.slide_id}.wsfv"
    write_slidepack(pack, path)
    print(f"{pack.slide_id}: {pack.n_patches} patches x {pack.dim} dims "
          f"-> {path.stat().st_size} bytes (16 + 4*n*dim)")

# Round trip is bit-exact.
back = read_slidepack(work / "slide_a.wsfv", label=0)
assert back == packs[0]
print("round trip: bit-exact")

# The manifest ties ids, labels and files together; class names live in a
# sibling classes.txt.
entries = [ManifestEntry(p.slide_id, p.label, f"{p.slide_id}.wsfv", p.n_patches, p.dim) for p in packs]
write_manifest(entries, work / "manifest.csv", class_names=["benign", "tumor"])
manifest = load_manifest(work / "manifest.csv")
print(f"manifest: {len(manifest.entries)} slides, dim={manifest.dim}, classes={manifest.class_names}")

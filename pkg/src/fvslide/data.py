"""Domain types and the bit-exact on-disk formats shared by all pipeline stages.

Formats (all multi-byte fields little-endian):

  slide pack (.wsfv)        magic "WSFV" | u32 version=1 | u32 n_patches | u32 dim
                            | n_patches*dim float32, row-major
  cluster model (.wscm)     magic "WSCM" | u32 version=1 | u32 k | u32 dim | u32 n
                            | u32 requested_k | f64 wcss
                            | k*dim float64 centers, row-major | n u32 assignments
  representation (.wsfr)    magic "WSFR" | u32 version=1 | u32 k | u32 m | u32 dim
                            | u32 flags | k*(2*m*dim) float64, row-major
                            | k u32 cluster_order_key
  manifest (.csv)           header "slide_id,label,path,n_patches,dim", one row per
                            slide, paths relative to the manifest's directory;
                            class names in a sibling classes.txt, one per line
  metrics (.csv)            header "split,accuracy,auc,precision,recall,f1"

Embeddings are stored as float32 (compact, matches backbone output precision);
everything downstream computes in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SLIDEPACK_MAGIC = b"WSFV"
CLUSTER_MAGIC = b"WSCM"
REPR_MAGIC = b"WSFR"
FORMAT_VERSION = 1

SLIDEPACK_EXT = ".wsfv"
CLUSTER_EXT = ".wscm"
REPR_EXT = ".wsfr"

MANIFEST_HEADER = "slide_id,label,path,n_patches,dim"
METRICS_HEADER = "split,accuracy,auc,precision,recall,f1"
CLASSES_FILENAME = "classes.txt"

# Representation header flag bits.
FLAG_POWER_L2 = 1
FLAG_SECOND_ORDER_CENTERED = 2
FLAG_RAW_SCALING = 4


class ValidationError(ValueError):
    """Bad inputs or violated invariants. The CLI maps this to exit code 1."""


class DataFormatError(Exception):
    """Unreadable or corrupt on-disk artifact. The CLI maps this to exit code 2."""


def _frozen(values, dtype) -> np.ndarray:
    """Copy to a C-contiguous read-only array; types are immutable once built."""
    arr = np.array(values, dtype=dtype, order="C")
    arr.flags.writeable = False
    return arr


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# Slide packs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SlidePack:
    """One slide's bag of patch embeddings plus identity and label.

    The label lives in the manifest, not the pack file, so the same packs can
    serve different label schemes; `read_slidepack` fills it from its caller.
    """

    slide_id: str
    label: int
    embeddings: np.ndarray  # (n_patches, dim) float32, read-only

    def __post_init__(self):
        emb = np.asarray(self.embeddings)
        if emb.ndim != 2:
            raise ValidationError(f"embeddings must be 2-D, got shape {emb.shape}")
        object.__setattr__(self, "embeddings", _frozen(emb, np.float32))

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        if not self.slide_id:
            raise ValidationError("slide_id must be non-empty")
        if any(c in self.slide_id for c in "/\\") or self.slide_id in (".", ".."):
            raise ValidationError(f"slide_id {self.slide_id!r} is not filesystem-safe")
        if self.label < 0:
            raise ValidationError(f"slide {self.slide_id!r}: label must be >= 0")
        if self.n_patches < 1 or self.dim < 1:
            raise ValidationError(f"empty slide: {self.slide_id!r} has shape {self.embeddings.shape}")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValidationError(f"slide {self.slide_id!r}: non-finite embeddings")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SlidePack):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.label == other.label
            and _bits_equal(self.embeddings, other.embeddings)
        )


def write_slidepack(pack: SlidePack, path: str | Path) -> None:
    """Write `pack` in the version-1 binary format. Rejects invalid packs."""
    pack.validate()
    header = SLIDEPACK_MAGIC + struct.pack("<III", FORMAT_VERSION, pack.n_patches, pack.dim)
    payload = np.ascontiguousarray(pack.embeddings, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_slidepack(path: str | Path, label: int = 0) -> SlidePack:
    """Inverse of `write_slidepack`; slide_id comes from the filename stem.

    The pack format stores no label; pass one (normally from the manifest).
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16:
        raise DataFormatError(f"{path}: truncated")
    if data[:4] != SLIDEPACK_MAGIC:
        raise DataFormatError(f"{path}: not a slidepack")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise DataFormatError(f"{path}: empty slide")
    expected = 16 + 4 * n * d
    if len(data) < expected:
        raise DataFormatError(f"{path}: truncated")
    if len(data) > expected:
        raise DataFormatError(f"{path}: trailing bytes after payload")
    emb = np.frombuffer(data, dtype="<f4", offset=16).reshape(n, d)
    if not np.all(np.isfinite(emb)):
        raise DataFormatError(f"{path}: corrupt embeddings (non-finite values)")
    return SlidePack(slide_id=path.stem, label=label, embeddings=emb)


def peek_slidepack_header(path: str | Path) -> tuple[int, int]:
    """Return (n_patches, dim) from a pack file without reading the payload."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16:
        raise DataFormatError(f"{path}: truncated")
    if head[:4] != SLIDEPACK_MAGIC:
        raise DataFormatError(f"{path}: not a slidepack")
    version, n, d = struct.unpack_from("<III", head, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    return n, d


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    label: int
    path: str  # relative to the manifest's directory
    n_patches: int
    dim: int


@dataclass(frozen=True)
class Manifest:
    """Validated, order-preserving index of slide packs."""

    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]
    root: Path

    @property
    def dim(self) -> int:
        return self.entries[0].dim

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load_pack(self, entry: ManifestEntry) -> SlidePack:
        pack = read_slidepack(self.resolve(entry), label=entry.label)
        if pack.slide_id != entry.slide_id:
            # pack identity is the filename stem; keep the manifest's id
            pack = SlidePack(entry.slide_id, entry.label, pack.embeddings)
        return pack


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest CSV, cross-checking each pack's header."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: manifest not found") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ValidationError(f"{path}: bad manifest header (expected {MANIFEST_HEADER!r})")

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        slide_id, label_s, rel, n_s, d_s = parts
        try:
            label, n, d = int(label_s), int(n_s), int(d_s)
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-integer label/n_patches/dim") from None
        if slide_id in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate slide {slide_id!r}")
        seen.add(slide_id)
        entries.append(ManifestEntry(slide_id, label, rel, n, d))

    if not entries:
        raise ValidationError(f"{path}: manifest has no entries")

    dims = {e.dim for e in entries}
    if len(dims) > 1:
        raise ValidationError(f"{path}: inconsistent dim across entries: {sorted(dims)}")

    class_names = _load_class_names(path.parent, entries)
    for e in entries:
        if not (0 <= e.label < len(class_names)):
            raise ValidationError(f"{path}: slide {e.slide_id!r} label {e.label} out of range [0, {len(class_names)})")

    root = path.parent
    for e in entries:
        pack_path = root / e.path
        if not pack_path.is_file():
            raise DataFormatError(f"{path}: missing slidepack {pack_path}")
        n, d = peek_slidepack_header(pack_path)
        if (n, d) != (e.n_patches, e.dim):
            raise ValidationError(
                f"{path}: slide {e.slide_id!r} header ({n}, {d}) does not match manifest ({e.n_patches}, {e.dim})"
            )

    return Manifest(entries=tuple(entries), class_names=class_names, root=root)


def _load_class_names(manifest_dir: Path, entries: list[ManifestEntry]) -> tuple[str, ...]:
    classes_path = manifest_dir / CLASSES_FILENAME
    if classes_path.is_file():
        names = tuple(ln.strip() for ln in classes_path.read_text().splitlines() if ln.strip())
        if not names:
            raise ValidationError(f"{classes_path}: no class names")
        return names
    n = max(e.label for e in entries) + 1
    return tuple(f"class_{i}" for i in range(n))


def write_manifest(entries, path: str | Path, class_names=None) -> None:
    path = Path(path)
    rows = [MANIFEST_HEADER]
    rows += [f"{e.slide_id},{e.label},{e.path},{e.n_patches},{e.dim}" for e in entries]
    path.write_text("\n".join(rows) + "\n")
    if class_names is not None:
        (path.parent / CLASSES_FILENAME).write_text("\n".join(class_names) + "\n")


# ---------------------------------------------------------------------------
# Cluster models
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """K-means result for one slide: centers, assignments and the objective.

    `k` may be smaller than `requested_k` when the slide had fewer patches
    than requested clusters. `wcss_history` holds the objective after each
    Lloyd iteration (in-memory only, not serialized).
    """

    centers: np.ndarray  # (k, dim) float64
    assignments: np.ndarray  # (n_patches,) int64, values in [0, k)
    wcss: float
    requested_k: int
    wcss_history: tuple[float, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "centers", _frozen(self.centers, np.float64))
        object.__setattr__(self, "assignments", _frozen(self.assignments, np.int64))
        if self.centers.ndim != 2:
            raise ValidationError("centers must be 2-D")
        if self.assignments.ndim != 1:
            raise ValidationError("assignments must be 1-D")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.assignments.size and not (
            0 <= self.assignments.min() and self.assignments.max() < self.k
        ):
            raise ValidationError("assignments out of range")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_patches(self) -> int:
        return self.assignments.shape[0]

    @property
    def per_cluster_size(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClusterModel):
            return NotImplemented
        return (
            _bits_equal(self.centers, other.centers)
            and _bits_equal(self.assignments, other.assignments)
            and self.wcss == other.wcss
            and self.requested_k == other.requested_k
        )


def write_cluster_model(model: ClusterModel, path: str | Path) -> None:
    header = CLUSTER_MAGIC + struct.pack(
        "<IIIIId",
        FORMAT_VERSION,
        model.k,
        model.dim,
        model.n_patches,
        model.requested_k,
        model.wcss,
    )
    body = (
        np.ascontiguousarray(model.centers, dtype="<f8").tobytes()
        + np.ascontiguousarray(model.assignments, dtype="<u4").tobytes()
    )
    Path(path).write_bytes(header + body)


def read_cluster_model(path: str | Path) -> ClusterModel:
    path = Path(path)
    data = path.read_bytes()
    fixed = 4 + struct.calcsize("<IIIIId")
    if len(data) < fixed:
        raise DataFormatError(f"{path}: truncated")
    if data[:4] != CLUSTER_MAGIC:
        raise DataFormatError(f"{path}: not a cluster model")
    version, k, dim, n, requested_k, wcss = struct.unpack_from("<IIIIId", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    expected = fixed + 8 * k * dim + 4 * n
    if len(data) != expected:
        raise DataFormatError(f"{path}: truncated")
    centers = np.frombuffer(data, dtype="<f8", count=k * dim, offset=fixed).reshape(k, dim)
    assignments = np.frombuffer(data, dtype="<u4", count=n, offset=fixed + 8 * k * dim).astype(np.int64)
    return ClusterModel(centers=centers, assignments=assignments, wcss=wcss, requested_k=requested_k)


# ---------------------------------------------------------------------------
# GMM codebook
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GmmCodebook:
    """Isotropic Gaussian mixture codebook: learned centers, fixed pi and sigma.

    `pi` is a shared per-component mixing weight; m*pi need not equal 1
    (posteriors are normalized per descriptor regardless). `padded` marks
    codebooks whose centers were duplicate-padded because the cluster had
    fewer descriptors than components.
    """

    centers: np.ndarray  # (m, dim) float64
    pi: float
    sigma: float
    padded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "centers", _frozen(self.centers, np.float64))
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValidationError("codebook centers must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(self.centers)):
            raise ValidationError("codebook centers must be finite")
        if not (0.0 < self.pi <= 1.0):
            raise ValidationError(f"pi must be in (0, 1], got {self.pi}")
        if not (self.sigma > 0.0):
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, GmmCodebook):
            return NotImplemented
        return (
            _bits_equal(self.centers, other.centers)
            and self.pi == other.pi
            and self.sigma == other.sigma
            and self.padded == other.padded
        )


# ---------------------------------------------------------------------------
# Slide representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SlideRepresentation:
    """Bag of k Fisher vectors for one slide, in canonical cluster order.

    Row i of `fvs` encodes the cluster whose original index is
    `cluster_order_key[i]`; rows are ordered by descending cluster size with
    ties broken by lower cluster index.
    """

    slide_id: str
    fvs: np.ndarray  # (k, 2*m*dim) float64
    cluster_order_key: np.ndarray  # (k,) int64, original cluster indices
    m: int
    dim: int
    flags: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fvs", _frozen(self.fvs, np.float64))
        object.__setattr__(self, "cluster_order_key", _frozen(self.cluster_order_key, np.int64))
        if self.fvs.ndim != 2:
            raise ValidationError("fvs must be 2-D")
        if self.fvs.shape[1] != 2 * self.m * self.dim:
            raise ValidationError(
                f"fv length {self.fvs.shape[1]} != 2*m*dim = {2 * self.m * self.dim}"
            )
        if self.cluster_order_key.shape != (self.fvs.shape[0],):
            raise ValidationError("cluster_order_key length must equal k")
        if not np.all(np.isfinite(self.fvs)):
            raise ValidationError(f"slide {self.slide_id!r}: non-finite Fisher vectors")

    @property
    def k(self) -> int:
        return self.fvs.shape[0]

    @property
    def fv_len(self) -> int:
        return self.fvs.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SlideRepresentation):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and _bits_equal(self.fvs, other.fvs)
            and _bits_equal(self.cluster_order_key, other.cluster_order_key)
            and (self.m, self.dim, self.flags) == (other.m, other.dim, other.flags)
        )


def write_representation(rep: SlideRepresentation, path: str | Path) -> None:
    header = REPR_MAGIC + struct.pack(
        "<IIIII", FORMAT_VERSION, rep.k, rep.m, rep.dim, rep.flags
    )
    body = (
        np.ascontiguousarray(rep.fvs, dtype="<f8").tobytes()
        + np.ascontiguousarray(rep.cluster_order_key, dtype="<u4").tobytes()
    )
    Path(path).write_bytes(header + body)


def read_representation(path: str | Path) -> SlideRepresentation:
    path = Path(path)
    data = path.read_bytes()
    fixed = 4 + struct.calcsize("<IIIII")
    if len(data) < fixed:
        raise DataFormatError(f"{path}: truncated")
    if data[:4] != REPR_MAGIC:
        raise DataFormatError(f"{path}: not a representation file")
    version, k, m, dim, flags = struct.unpack_from("<IIIII", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    fv_len = 2 * m * dim
    expected = fixed + 8 * k * fv_len + 4 * k
    if len(data) != expected:
        raise DataFormatError(f"{path}: truncated")
    fvs = np.frombuffer(data, dtype="<f8", count=k * fv_len, offset=fixed).reshape(k, fv_len)
    order = np.frombuffer(data, dtype="<u4", count=k, offset=fixed + 8 * k * fv_len).astype(np.int64)
    return SlideRepresentation(
        slide_id=path.stem, fvs=fvs, cluster_order_key=order, m=m, dim=dim, flags=flags
    )


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Dataset:
    """Aligned slide representations, labels and a train/val/test split."""

    representations: tuple[SlideRepresentation, ...]
    labels: np.ndarray  # (n_slides,) int64
    split: dict[str, str]  # slide_id -> train|val|test
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        if len(self.representations) != self.labels.shape[0]:
            raise ValidationError("representations and labels must align")
        ids = [r.slide_id for r in self.representations]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate slide in dataset")
        missing = [i for i in ids if i not in self.split]
        if missing:
            raise ValidationError(f"slides missing from split: {missing[:5]}")
        bad = {s for s in self.split.values() if s not in SPLIT_NAMES}
        if bad:
            raise ValidationError(f"unknown split names: {sorted(bad)}")
        if self.labels.size and not (
            0 <= self.labels.min() and self.labels.max() < len(self.class_names)
        ):
            raise ValidationError("labels out of range of class_names")

    @property
    def n_slides(self) -> int:
        return len(self.representations)

    def indices(self, split_name: str) -> np.ndarray:
        """Positions of the slides assigned to `split_name`, in dataset order."""
        if split_name not in SPLIT_NAMES:
            raise ValidationError(f"unknown split {split_name!r}")
        return np.array(
            [i for i, r in enumerate(self.representations) if self.split[r.slide_id] == split_name],
            dtype=np.int64,
        )


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------


def format_metric(value: float) -> str:
    """Shortest round-trip decimal form; deterministic for identical floats."""
    return repr(float(value))


def write_metrics_csv(rows, path: str | Path) -> None:
    """Write `(split_name, report)` pairs as the canonical metrics CSV."""
    lines = [METRICS_HEADER]
    for split_name, rep in rows:
        lines.append(
            ",".join(
                [split_name]
                + [format_metric(v) for v in (rep.accuracy, rep.auc, rep.precision, rep.recall, rep.f1)]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")

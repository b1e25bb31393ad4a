"""End-to-end orchestration: cluster -> encode -> train -> eval, with
content-hash stage caching, stratified splits, and a flat key=value config
file format.

Caching is keyed by a hash chain: each stage's key hashes its parameters
plus the upstream stage's key plus the input data hash, so any change
upstream invalidates everything downstream, while an identical re-run skips
every stage. Timestamps are never consulted.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .amil import TrainConfig, TrainedClassifier, read_model, train, write_model
from .clustering import KmeansConfig, kmeans_fit
from .data import (
    CLUSTER_EXT,
    Dataset,
    Manifest,
    REPR_EXT,
    SPLIT_NAMES,
    ValidationError,
    load_manifest,
    read_cluster_model,
    read_representation,
    write_cluster_model,
    write_metrics_csv,
    write_representation,
)
from .fisher import FvConfig, encode_slide
from .metrics import MetricsReport, evaluate
from .seeds import child_seed, make_rng

log = logging.getLogger(__name__)

SPLIT_FILE_HEADER = "slide_id,split"


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    file: Path | None = None  # explicit split CSV overrides the fractions

    def __post_init__(self):
        if self.file is None:
            fracs = (self.train, self.val, self.test)
            if any(f < 0 for f in fracs) or self.train <= 0:
                raise ValidationError("split fractions must be >= 0 with train > 0")
            if abs(sum(fracs) - 1.0) > 1e-9:
                raise ValidationError(f"split fractions must sum to 1, got {sum(fracs)}")


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path
    work_dir: Path
    seed: int = 0
    threads: int = 1
    clustering: KmeansConfig = field(default_factory=KmeansConfig)
    fv: FvConfig = field(default_factory=FvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def stratified_split(manifest: Manifest, spec: SplitSpec, seed: int) -> dict[str, str]:
    """Per-class shuffled allocation to train/val/test by largest remainder."""
    rng = make_rng(child_seed(seed, "split"))
    out: dict[str, str] = {}
    labels = sorted({e.label for e in manifest.entries})
    for label in labels:
        ids = [e.slide_id for e in manifest.entries if e.label == label]
        order = rng.permutation(len(ids))
        n = len(ids)
        exact = np.array([spec.train * n, spec.val * n, spec.test * n])
        counts = np.floor(exact).astype(int)
        # distribute the remainder by largest fractional part, ties in
        # train/val/test order
        remainder = int(n - counts.sum())
        frac_order = np.lexsort((np.arange(3), -(exact - counts)))
        for j in range(remainder):
            counts[frac_order[j]] += 1
        bounds = np.cumsum(counts)
        for pos, idx in enumerate(order):
            split = SPLIT_NAMES[int(np.searchsorted(bounds, pos, side="right"))]
            out[ids[idx]] = split
    return out


def load_split_file(path: str | Path, manifest: Manifest) -> dict[str, str]:
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != SPLIT_FILE_HEADER:
        raise ValidationError(f"{path}: bad split header (expected {SPLIT_FILE_HEADER!r})")
    out: dict[str, str] = {}
    for ln in lines[1:]:
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != 2 or parts[1] not in SPLIT_NAMES:
            raise ValidationError(f"{path}: bad split row {ln!r}")
        out[parts[0]] = parts[1]
    known = {e.slide_id for e in manifest.entries}
    missing = sorted(known - set(out))
    if missing:
        raise ValidationError(f"{path}: slides missing from split file: {missing[:5]}")
    return out


def write_split_file(split: dict[str, str], order, path: str | Path) -> None:
    lines = [SPLIT_FILE_HEADER] + [f"{sid},{split[sid]}" for sid in order]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Stage cache
# ---------------------------------------------------------------------------


class _StageCache:
    def __init__(self, work_dir: Path):
        self.path = work_dir / "cache.json"
        self.state = {}
        if self.path.is_file():
            try:
                self.state = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                self.state = {}

    def fresh(self, stage: str, key: str, outputs: list[Path]) -> bool:
        entry = self.state.get(stage)
        return (
            isinstance(entry, dict)
            and entry.get("key") == key
            and all(Path(p).is_file() for p in entry.get("outputs", []))
            and {str(p) for p in outputs} <= set(entry.get("outputs", []))
        )

    def record(self, stage: str, key: str, outputs: list[Path]) -> None:
        self.state[stage] = {"key": key, "outputs": sorted(str(p) for p in outputs)}
        self.path.write_text(json.dumps(self.state, indent=2, sort_keys=True))


def _hash_chain(upstream: str, params) -> str:
    h = hashlib.sha256()
    h.update(upstream.encode())
    h.update(json.dumps(params, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _hash_manifest_data(manifest: Manifest) -> str:
    h = hashlib.sha256()
    for e in manifest.entries:
        h.update(f"{e.slide_id},{e.label},{e.n_patches},{e.dim}".encode())
        h.update(manifest.resolve(e).read_bytes())
    return h.hexdigest()


def _run_slides(manifest: Manifest, fn, threads: int):
    """Apply fn(entry) per slide, optionally threaded; re-raise with context."""

    def wrapped(entry):
        try:
            return fn(entry)
        except Exception as e:
            e.args = (f"slide {entry.slide_id!r}: {e}",) + e.args[1:]
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(wrapped, manifest.entries))
    return [wrapped(e) for e in manifest.entries]


def _stage_guard(stage: str, fn):
    try:
        return fn()
    except Exception as e:
        e.args = (f"stage {stage}: {e}",) + e.args[1:]
        raise


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_cluster_stage(manifest: Manifest, cfg: PipelineConfig, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(entry):
        pack = manifest.load_pack(entry)
        kcfg = replace(cfg.clustering, seed=child_seed(cfg.seed, "cluster", entry.slide_id))
        model = kmeans_fit(pack.embeddings, kcfg)
        path = out_dir / (entry.slide_id + CLUSTER_EXT)
        write_cluster_model(model, path)
        return path

    return _run_slides(manifest, one, cfg.threads)


def run_encode_stage(
    manifest: Manifest, cfg: PipelineConfig, clusters_dir: Path, out_dir: Path
) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(entry):
        pack = manifest.load_pack(entry)
        cluster_model = read_cluster_model(clusters_dir / (entry.slide_id + CLUSTER_EXT))
        fv_cfg = replace(cfg.fv, seed=child_seed(cfg.seed, "encode", entry.slide_id))
        rep = encode_slide(pack, cluster_model, fv_cfg)
        path = out_dir / (entry.slide_id + REPR_EXT)
        write_representation(rep, path)
        return path

    return _run_slides(manifest, one, cfg.threads)


def load_dataset(manifest: Manifest, representations_dir: Path, split: dict[str, str]) -> Dataset:
    reps = []
    labels = []
    for entry in manifest.entries:
        rep = read_representation(Path(representations_dir) / (entry.slide_id + REPR_EXT))
        reps.append(rep)
        labels.append(entry.label)
    return Dataset(
        representations=tuple(reps),
        labels=np.asarray(labels, dtype=np.int64),
        split=split,
        class_names=manifest.class_names,
    )


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def run_pipeline(cfg: PipelineConfig) -> dict[str, MetricsReport]:
    """Run every stage, reusing cached outputs when inputs are unchanged.

    Returns the metrics report per non-empty split; the same rows are written
    to <work_dir>/metrics.csv.
    """
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    manifest = _stage_guard("manifest", lambda: load_manifest(cfg.manifest))
    cache = _StageCache(work)
    data_key = _hash_manifest_data(manifest)
    order = [e.slide_id for e in manifest.entries]

    # split
    split_path = work / "split.csv"
    split_key = _hash_chain(
        data_key,
        {"stage": "split", "file": cfg.split.file, "fractions": (cfg.split.train, cfg.split.val, cfg.split.test), "seed": cfg.seed},
    )
    if cache.fresh("split", split_key, [split_path]):
        log.info("stage split: cached")
    else:
        log.info("stage split: running")
        _stage_guard("split", lambda: _make_split(manifest, cfg, split_path, order))
        cache.record("split", split_key, [split_path])
    split = load_split_file(split_path, manifest)

    # cluster
    clusters_dir = work / "clusters"
    cluster_outputs = [clusters_dir / (sid + CLUSTER_EXT) for sid in order]
    cluster_key = _hash_chain(data_key, {"stage": "cluster", "cfg": _kmeans_params(cfg.clustering), "seed": cfg.seed})
    if cache.fresh("cluster", cluster_key, cluster_outputs):
        log.info("stage cluster: cached")
    else:
        log.info("stage cluster: running")
        _stage_guard("cluster", lambda: run_cluster_stage(manifest, cfg, clusters_dir))
        cache.record("cluster", cluster_key, cluster_outputs)

    # encode
    repr_dir = work / "representations"
    repr_outputs = [repr_dir / (sid + REPR_EXT) for sid in order]
    encode_key = _hash_chain(cluster_key, {"stage": "encode", "cfg": _fv_params(cfg.fv)})
    if cache.fresh("encode", encode_key, repr_outputs):
        log.info("stage encode: cached")
    else:
        log.info("stage encode: running")
        _stage_guard("encode", lambda: run_encode_stage(manifest, cfg, clusters_dir, repr_dir))
        cache.record("encode", encode_key, repr_outputs)

    # train
    model_path = work / "model.wsam"
    train_key = _hash_chain(encode_key, {"stage": "train", "split": split_key, "cfg": _train_params(cfg.train), "seed": cfg.seed})
    dataset = _stage_guard("train", lambda: load_dataset(manifest, repr_dir, split))
    if cache.fresh("train", train_key, [model_path]):
        log.info("stage train: cached")
    else:
        log.info("stage train: running")
        tcfg = replace(cfg.train, seed=child_seed(cfg.seed, "train"))
        classifier = _stage_guard("train", lambda: train(dataset, tcfg))
        write_model(classifier.model, model_path)
        cache.record("train", train_key, [model_path])
    model = read_model(model_path)

    # eval
    metrics_path = work / "metrics.csv"
    reports: dict[str, MetricsReport] = {}
    for name in SPLIT_NAMES:
        if dataset.indices(name).size > 0:
            reports[name] = _stage_guard("eval", lambda n=name: evaluate(model, dataset, n))
    write_metrics_csv(reports.items(), metrics_path)
    for name, rep in reports.items():
        log.info(
            "%s: accuracy=%.4f auc=%.4f precision=%.4f recall=%.4f f1=%.4f",
            name, rep.accuracy, rep.auc, rep.precision, rep.recall, rep.f1,
        )
    return reports


def _make_split(manifest, cfg, split_path, order):
    if cfg.split.file is not None:
        split = load_split_file(cfg.split.file, manifest)
    else:
        split = stratified_split(manifest, cfg.split, cfg.seed)
    write_split_file(split, order, split_path)


def _kmeans_params(c: KmeansConfig) -> dict:
    return {"k": c.k, "max_iters": c.max_iters, "rel_tol": c.rel_tol, "n_init": c.n_init, "scope": c.scope}


def _fv_params(c: FvConfig) -> dict:
    return {
        "m": c.m, "pi": c.pi, "sigma": c.sigma, "iters": c.gmm_center_iters,
        "normalize": c.normalize, "second_order": c.second_order,
        "scaling": c.scaling, "center_fit": c.center_fit,
    }


def _train_params(c: TrainConfig) -> dict:
    return {
        "lr": c.lr, "wd": c.weight_decay, "betas": (c.beta1, c.beta2), "eps": c.eps,
        "epochs": c.epochs, "batch": c.batch_size, "scale": (c.scale_low, c.scale_high),
        "per_instance": c.scale_per_instance, "jitter": (c.jitter_dist, c.jitter_level),
        "alpha": c.mixup_alpha, "hidden": c.hidden, "attn": c.attn_dim, "head": c.head,
    }


# ---------------------------------------------------------------------------
# Config file: flat "key = value" lines, '#' comments, dotted section keys.
# ---------------------------------------------------------------------------

CONFIG_KEYS = {
    "manifest": str,
    "work_dir": str,
    "seed": int,
    "threads": int,
    "split.train": float,
    "split.val": float,
    "split.test": float,
    "split.file": str,
    "clustering.k": int,
    "clustering.max_iters": int,
    "clustering.rel_tol": float,
    "clustering.scope": str,
    "fv.m": int,
    "fv.pi": float,
    "fv.sigma": float,
    "fv.center_iters": int,
    "fv.normalize": str,
    "fv.second_order": str,
    "fv.scaling": str,
    "fv.center_fit": str,
    "train.lr": float,
    "train.weight_decay": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.hidden": int,
    "train.attn_dim": int,
    "train.mixup_alpha": float,
    "train.jitter_level": float,
    "train.jitter_dist": str,
    "train.scale_low": float,
    "train.scale_high": float,
    "train.scale_per_instance": bool,
    "train.head": str,
}


def parse_config_file(path: str | Path) -> dict:
    """Parse `key = value` lines into typed values per CONFIG_KEYS."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip("\"'"), f"{path}:{lineno}")
    return out


def _coerce(key: str, value: str, where: str):
    target = CONFIG_KEYS[key]
    try:
        if target is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return target(value)
    except ValueError:
        raise ValidationError(f"{where}: cannot parse {value!r} as {target.__name__}") from None


def config_from_mapping(values: dict) -> PipelineConfig:
    """Build a PipelineConfig from flat config keys (file plus overrides)."""
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    if "manifest" not in values or "work_dir" not in values:
        raise ValidationError("config requires 'manifest' and 'work_dir'")

    def pick(prefix: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(prefix + ".")}

    fv_kwargs = pick("fv")
    if "center_iters" in fv_kwargs:
        fv_kwargs["gmm_center_iters"] = fv_kwargs.pop("center_iters")
    split_kwargs = pick("split")
    if "file" in split_kwargs:
        split_kwargs["file"] = Path(split_kwargs["file"])
    return PipelineConfig(
        manifest=Path(values["manifest"]),
        work_dir=Path(values["work_dir"]),
        seed=values.get("seed", 0),
        threads=values.get("threads", 1),
        clustering=KmeansConfig(**pick("clustering")),
        fv=FvConfig(**fv_kwargs),
        train=TrainConfig(**pick("train")),
        split=SplitSpec(**split_kwargs),
    )

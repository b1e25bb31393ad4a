"""fvslide command line: synth, cluster, elbow, encode, train, eval, run.

Exit codes: 0 success, 1 validation error, 2 I/O or format error. Logs go to
stderr; machine-readable outputs go to files (the elbow subcommand, whose
defined output is its WCSS curve, prints CSV to stdout).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .amil import TrainConfig, read_model, train, write_model
from .clustering import KmeansConfig, choose_knee, kmeans_fit
from .data import (
    CLUSTER_EXT,
    DataFormatError,
    ValidationError,
    load_manifest,
    write_metrics_csv,
)
from .fisher import FvConfig
from .metrics import evaluate
from .pipeline import (
    CONFIG_KEYS,
    config_from_mapping,
    load_dataset,
    load_split_file,
    parse_config_file,
    run_cluster_stage,
    run_encode_stage,
    run_pipeline,
)
from .seeds import child_seed
from .synth import SyntheticSpec, generate_synthetic

log = logging.getLogger("fvslide")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); bad flags are validation
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fvslide", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--slides-per-class", type=int, default=100)
    p.add_argument("--patches-min", type=int, default=100)
    p.add_argument("--patches-max", type=int, default=300)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--phenotypes", type=int, default=3)
    p.add_argument("--separation", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("cluster", help="fit per-slide k-means models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("elbow", help="WCSS curve over candidate ks, summed across slides")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ks", default="1,2,3,4,5,6,7,8,9,10,11,12,13,14,15")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("encode", help="Fisher-encode slides against their cluster models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clusters-dir", required=True)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--pi", type=float, default=0.2)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--normalize", choices=("none", "power_l2"), default="power_l2")
    p.add_argument("--second-order", choices=("centered", "paper_literal"), default="centered")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="train the bag classifier")
    p.add_argument("--representations-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-file", required=True)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=0.0001)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mixup-alpha", type=float, default=0.2)
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--scale-low", type=float, default=0.9)
    p.add_argument("--scale-high", type=float, default=1.0)
    p.add_argument("--head", choices=("amil", "mlp"), default="amil")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a trained model on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--representations-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-file", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default="metrics.csv")

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest")
    p.add_argument("--work-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable); see the README key list",
    )
    return parser


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_classes=args.n_classes,
        slides_per_class=args.slides_per_class,
        patches_min=args.patches_min,
        patches_max=args.patches_max,
        dim=args.dim,
        phenotypes_per_class=args.phenotypes,
        separation=args.separation,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out_dir)
    log.info("wrote %d slides to %s", len(manifest.entries), args.out_dir)
    return 0


def _cmd_cluster(args) -> int:
    manifest = load_manifest(args.manifest)
    from .pipeline import PipelineConfig

    cfg = PipelineConfig(
        manifest=Path(args.manifest),
        work_dir=Path(args.out_dir),
        seed=args.seed,
        threads=args.threads,
        clustering=KmeansConfig(k=args.k, max_iters=args.max_iters),
    )
    run_cluster_stage(manifest, cfg, Path(args.out_dir))
    log.info("wrote %d cluster models to %s", len(manifest.entries), args.out_dir)
    return 0


def _cmd_elbow(args) -> int:
    manifest = load_manifest(args.manifest)
    ks = [int(s) for s in args.ks.split(",") if s.strip()]
    if len(ks) < 3:
        raise ValidationError("need at least 3 candidate ks")
    totals = []
    for k in ks:
        total = 0.0
        for entry in manifest.entries:
            pack = manifest.load_pack(entry)
            kcfg = KmeansConfig(k=k, seed=child_seed(args.seed, "cluster", entry.slide_id))
            total += kmeans_fit(pack.embeddings, kcfg).wcss
        totals.append(total)
    chosen = choose_knee(ks, totals)
    print("k,wcss")
    for k, w in zip(ks, totals):
        print(f"{k},{w!r}")
    print(f"chosen_k,{chosen}")
    return 0


def _cmd_encode(args) -> int:
    manifest = load_manifest(args.manifest)
    from .pipeline import PipelineConfig

    cfg = PipelineConfig(
        manifest=Path(args.manifest),
        work_dir=Path(args.out_dir),
        seed=args.seed,
        threads=args.threads,
        fv=FvConfig(
            m=args.m,
            pi=args.pi,
            sigma=args.sigma,
            normalize=args.normalize,
            second_order=args.second_order,
        ),
    )
    run_encode_stage(manifest, cfg, Path(args.clusters_dir), Path(args.out_dir))
    log.info("wrote %d representations to %s", len(manifest.entries), args.out_dir)
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    split = load_split_file(args.split_file, manifest)
    dataset = load_dataset(manifest, Path(args.representations_dir), split)
    cfg = TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        mixup_alpha=args.mixup_alpha,
        jitter_level=args.jitter,
        scale_low=args.scale_low,
        scale_high=args.scale_high,
        head=args.head,
    )
    classifier = train(dataset, cfg)
    write_model(classifier.model, args.out)
    log.info(
        "trained %s head for %d epochs (best epoch %d); model written to %s",
        cfg.head, cfg.epochs, classifier.best_epoch, args.out,
    )
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    split = load_split_file(args.split_file, manifest)
    dataset = load_dataset(manifest, Path(args.representations_dir), split)
    model = read_model(args.model)
    report = evaluate(model, dataset, args.split)
    write_metrics_csv([(args.split, report)], args.out)
    log.info(
        "%s: accuracy=%.4f auc=%.4f precision=%.4f recall=%.4f f1=%.4f",
        args.split, report.accuracy, report.auc, report.precision, report.recall, report.f1,
    )
    return 0


def _cmd_run(args) -> int:
    values = parse_config_file(args.config)
    for flag, key in (
        ("manifest", "manifest"),
        ("work_dir", "work_dir"),
        ("seed", "seed"),
        ("threads", "threads"),
    ):
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValidationError(f"--set: unknown key {key!r}")
        from .pipeline import _coerce

        values[key] = _coerce(key, value, "--set")
    run_pipeline(config_from_mapping(values))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "cluster": _cmd_cluster,
    "elbow": _cmd_elbow,
    "encode": _cmd_encode,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ValidationError as e:
        log.error("%s", e)
        return 1
    except (DataFormatError, OSError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Run with `pytest tests/test_acceptance.py -v -s`.

The criteria are property-based (independent oracles at fixed tolerances)
plus one scaled-down end-to-end run with the method's default
hyperparameters (k=10 clusters, m=5 coding centers, pi=0.2, sigma=0.1,
AdamW lr=0.001 / weight decay 0.0001, mixup alpha=0.2, jitter 0.01,
scale 0.9-1.0).
"""

import itertools
import time

import numpy as np
import pytest

from fvslide.amil import TrainConfig, adamw_step, forward, init_adam_state, init_model, loss_and_grads
from fvslide.cli import main
from fvslide.clustering import KmeansConfig, elbow_select, kmeans_fit
from fvslide.data import GmmCodebook
from fvslide.fisher import FvConfig, fisher_encode
from fvslide.metrics import auc_binary
from fvslide.seeds import make_rng

from test_classifier import flatten_params, numeric_gradient
from test_fisher import oracle_fisher


def _report(name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"{status}  {name}" + (f"  [{detail}]" if detail else ""), flush=True)
    assert ok, f"{name}: {detail}"


def test_fisher_vector_oracle_equivalence():
    """fisher_encode matches a brute-force transcription of the encoding
    formula to 1e-12 (relative to oracle scale) on 200 random small
    instances, in both second-order modes, before normalization."""
    start = time.monotonic()
    rng = make_rng(2024)
    worst = 0.0
    for trial in range(200):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 4))
        d = int(rng.integers(1, 4))
        x = rng.uniform(0.0, 1.0, size=(n, d))
        centers = rng.uniform(0.0, 1.0, size=(m, d))
        sigma = float(rng.uniform(0.1, 0.5))
        mode = "centered" if trial % 2 == 0 else "paper_literal"
        cfg = FvConfig(m=m, sigma=sigma, normalize="none", second_order=mode)
        codebook = GmmCodebook(centers, pi=0.2, sigma=sigma)
        got = fisher_encode(x, codebook, cfg).values
        want = oracle_fisher(x, centers, 0.2, sigma, centered=mode == "centered")
        scale = max(1.0, float(np.abs(want).max()))
        worst = max(worst, float(np.abs(got - want).max()) / scale)
    elapsed = time.monotonic() - start
    _report(
        "FV oracle equivalence (200 instances, both second-order modes, tol 1e-12)",
        worst <= 1e-12 and elapsed < 5.0,
        f"worst={worst:.2e} elapsed={elapsed:.1f}s",
    )


def _exhaustive_wcss(points: np.ndarray, k: int) -> float:
    best = np.inf
    for assign in itertools.product(range(k), repeat=points.shape[0]):
        assign = np.array(assign)
        total = 0.0
        for c in range(k):
            members = points[assign == c]
            if members.shape[0]:
                total += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, total)
    return best


def test_kmeans_global_optimum():
    """On 100 seeded instances (n <= 8, k <= 3), converged WCSS is within
    1e-9 of the exhaustive-partition optimum in at least 90, and the Lloyd
    history is monotone in every instance."""
    start = time.monotonic()
    hits, monotone_everywhere = 0, True
    for seed in range(100):
        rng = make_rng(seed)
        n = int(rng.integers(4, 9))
        k = int(rng.integers(2, 4))
        x = rng.uniform(0.0, 1.0, size=(n, 2))
        model = kmeans_fit(x, KmeansConfig(k=k, seed=seed))
        hist = np.array(model.wcss_history)
        if not np.all(np.diff(hist) <= 1e-12 * np.maximum(hist[:-1], 1.0)):
            monotone_everywhere = False
        if model.wcss <= _exhaustive_wcss(x, min(k, n)) + 1e-9:
            hits += 1
    elapsed = time.monotonic() - start
    _report(
        "K-means global-optimum check (>=90/100 within 1e-9, monotone WCSS)",
        hits >= 90 and monotone_everywhere and elapsed < 10.0,
        f"hits={hits}/100 monotone={monotone_everywhere} elapsed={elapsed:.1f}s",
    )


def test_elbow_recovery():
    """elbow_select over k in 1..6 returns 3 on 3-blob data (separation
    25x blob sigma) in at least 95 of 100 seeds."""
    start = time.monotonic()
    hits = 0
    for seed in range(100):
        rng = make_rng(seed)
        centers = np.array([[0.0, 0.0], [25.0, 0.0], [0.0, 25.0]])
        x = np.concatenate([c + rng.normal(size=(40, 2)) for c in centers])
        report = elbow_select(x, range(1, 7), KmeansConfig(seed=seed))
        hits += report.chosen_k == 3
    elapsed = time.monotonic() - start
    _report(
        "Elbow recovery (3 blobs, >=95/100 seeds choose k=3)",
        hits >= 95 and elapsed < 30.0,
        f"hits={hits}/100 elapsed={elapsed:.1f}s",
    )


def test_gradient_check():
    """Analytic gradients match central finite differences (h=1e-5) on 20
    random tiny models with max relative error < 1e-4."""
    start = time.monotonic()
    worst = 0.0
    for seed in range(20):
        rng = make_rng(500 + seed)
        model = init_model(input_dim=4, hidden=3, attn_dim=2, n_classes=2, seed=seed)
        bags = [rng.normal(size=(3, 4)) for _ in range(2)]
        targets = rng.integers(0, 2, size=2)
        pairs = None
        if seed % 2:
            pairs = [(int(rng.integers(0, 2)), float(rng.uniform(0.2, 0.8))) for _ in range(2)]
        _, grads = loss_and_grads(model, bags, targets, pairs)
        analytic = np.concatenate([grads[name].ravel() for name in model.params()])
        numeric = numeric_gradient(model, bags, targets, pairs, h=1e-5)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3)
        worst = max(worst, float(rel.max()))
    elapsed = time.monotonic() - start
    _report(
        "AMIL gradient check (20 models, central differences h=1e-5, rel err < 1e-4)",
        worst < 1e-4 and elapsed < 10.0,
        f"worst={worst:.2e} elapsed={elapsed:.1f}s",
    )


def test_permutation_invariance():
    """Logits move by less than 1e-12 under 100 random bag shuffles for each
    of 20 random models."""
    rng = make_rng(99)
    worst = 0.0
    for seed in range(20):
        model = init_model(input_dim=6, hidden=5, attn_dim=3, n_classes=3, seed=seed)
        bag = rng.normal(size=(9, 6))
        logits, _ = forward(model, bag)
        for _ in range(100):
            shuffled = bag[rng.permutation(bag.shape[0])]
            logits_p, _ = forward(model, shuffled)
            worst = max(worst, float(np.abs(logits - logits_p).max()))
    _report(
        "Permutation invariance (2000 shuffles, logit drift < 1e-12)",
        worst < 1e-12,
        f"worst={worst:.2e}",
    )


def test_adamw_decoupled_decay():
    """A zero-gradient step scales every weight by exactly (1 - lr*wd) with
    the default lr=0.001 and weight decay 0.0001."""
    config = TrainConfig()
    model = init_model(input_dim=5, hidden=4, attn_dim=3, n_classes=2, seed=1)
    zero = {k: np.zeros_like(p) for k, p in model.params().items()}
    stepped, _ = adamw_step(model, zero, init_adam_state(model), config)
    factor = 1.0 - config.lr * config.weight_decay
    exact = all(
        np.array_equal(stepped.params()[name], p * factor) for name, p in model.params().items()
    )
    _report(
        "AdamW decoupled decay (zero gradient scales weights by exactly 1 - lr*wd)",
        exact and (config.lr, config.weight_decay) == (0.001, 0.0001),
        f"factor={factor!r}",
    )


def test_auc_pair_counting_oracle():
    """Rank-based AUC equals exhaustive pair counting (ties 0.5) to 1e-12 on
    100 random score sets with n up to 1000."""
    rng = make_rng(4242)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(10, 1001))
        scores = rng.uniform(size=n)
        if trial % 2:
            scores = np.round(scores, 2)  # force tie groups
        labels = rng.integers(0, 2, size=n).astype(bool)
        if labels.all() or not labels.any():
            labels[0] = ~labels[0]
        pos, neg = scores[labels], scores[~labels]
        wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        oracle = wins / (len(pos) * len(neg))
        worst = max(worst, abs(auc_binary(scores, labels) - oracle))
    _report(
        "AUC pair-counting oracle (100 score sets, n <= 1000, tol 1e-12)",
        worst <= 1e-12,
        f"worst={worst:.2e}",
    )


@pytest.fixture(scope="module")
def synthetic_datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    for name, sep in (("sep20", "20"), ("sep0", "0")):
        code = main(
            [
                "synth", "--out-dir", str(root / name),
                "--n-classes", "2", "--slides-per-class", "100",
                "--patches-min", "100", "--patches-max", "300",
                "--dim", "32", "--separation", sep, "--seed", "1",
            ]
        )
        assert code == 0
    return root


def _run_cli_pipeline(root, data_name, work_name) -> tuple[int, bytes]:
    config = root / f"{work_name}.cfg"
    config.write_text(
        f"manifest = {root / data_name / 'manifest.csv'}\n"
        f"work_dir = {root / work_name}\n"
        "seed = 42\n"
    )
    code = main(["run", "--config", str(config)])
    metrics = (root / work_name / "metrics.csv").read_bytes()
    return code, metrics


def _metric(metrics_bytes: bytes, split: str, column: str) -> float:
    lines = metrics_bytes.decode().splitlines()
    cols = lines[0].split(",")
    for line in lines[1:]:
        parts = line.split(",")
        if parts[0] == split:
            return float(parts[cols.index(column)])
    raise AssertionError(f"split {split} missing from metrics")


def test_end_to_end_synthetic_run(synthetic_datasets):
    """`fvslide run` with all method defaults on 200 generated slides
    (dim 32, separation 20) reaches test accuracy >= 0.95 and AUC >= 0.98;
    the separation-0 control stays at chance (AUC in [0.4, 0.6])."""
    start = time.monotonic()
    code, metrics = _run_cli_pipeline(synthetic_datasets, "sep20", "work_main")
    assert code == 0
    acc = _metric(metrics, "test", "accuracy")
    auc = _metric(metrics, "test", "auc")

    code0, metrics0 = _run_cli_pipeline(synthetic_datasets, "sep0", "work_control")
    assert code0 == 0
    auc0 = _metric(metrics0, "test", "auc")
    elapsed = time.monotonic() - start
    _report(
        "End-to-end synthetic run (acc >= 0.95, AUC >= 0.98; control AUC in [0.4, 0.6])",
        acc >= 0.95 and auc >= 0.98 and 0.4 <= auc0 <= 0.6 and elapsed < 300.0,
        f"acc={acc:.3f} auc={auc:.3f} control_auc={auc0:.3f} elapsed={elapsed:.0f}s",
    )


def test_pipeline_determinism(synthetic_datasets):
    """Two cold runs with the same seed produce byte-identical metrics CSVs."""
    code_a, metrics_a = _run_cli_pipeline(synthetic_datasets, "sep20", "work_det_a")
    code_b, metrics_b = _run_cli_pipeline(synthetic_datasets, "sep20", "work_det_b")
    _report(
        "Pipeline determinism (two cold runs, byte-identical metrics CSV)",
        code_a == 0 and code_b == 0 and metrics_a == metrics_b,
        f"bytes={len(metrics_a)}",
    )

"""Per-slide K-means (k-means++ seeding, Lloyd refinement) and elbow selection.

Everything here is deterministic: seeding is driven entirely by the config
seed, distance ties break toward the lowest center index, and empty clusters
are repaired by re-seeding them to the point farthest from their center.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import ClusterModel, ValidationError
from .seeds import make_rng


@dataclass(frozen=True)
class KmeansConfig:
    k: int = 10
    max_iters: int = 300
    rel_tol: float = 1e-6  # stop when relative WCSS improvement falls below this
    seed: int = 0
    n_init: int = 10  # restarts; the lowest-WCSS run wins
    scope: str = "per_slide"  # placeholder for a future dataset-global mode

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.rel_tol < 0:
            raise ValidationError(f"rel_tol must be >= 0, got {self.rel_tol}")
        if self.n_init < 1:
            raise ValidationError(f"n_init must be >= 1, got {self.n_init}")
        if self.scope != "per_slide":
            raise ValidationError(f"only per_slide clustering is implemented, got {self.scope!r}")


@dataclass(frozen=True)
class ElbowReport:
    """WCSS curve over candidate k values and the knee chosen from it.

    `monotone_violations` lists candidates whose WCSS exceeded the previous
    one (possible with local optima); flagged, not fatal.
    """

    candidate_ks: tuple[int, ...]
    wcss_curve: tuple[float, ...]
    chosen_k: int
    monotone_violations: tuple[int, ...] = ()


def sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, (n, k), clamped at zero."""
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeanspp_init(
    x: np.ndarray, k: int, rng: np.random.Generator, n_trials: int | None = None
) -> np.ndarray:
    """Greedy k-means++ seeding.

    Each new center is the best of `n_trials` D^2-weighted samples (best =
    lowest resulting potential), the usual 2 + log(k) heuristic by default.
    When all remaining distances are zero (fewer distinct points than k),
    falls back to the lowest-index unused point.
    """
    n = x.shape[0]
    if n_trials is None:
        n_trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            rs = rng.random(n_trials) * total
            cum = np.cumsum(d2)
            candidates = np.minimum(np.searchsorted(cum, rs, side="right"), n - 1)
            idx, best_pot, best_d2 = -1, np.inf, d2
            for c in candidates:
                cand_d2 = np.minimum(d2, np.sum((x - x[int(c)]) ** 2, axis=1))
                pot = float(cand_d2.sum())
                if pot < best_pot:
                    idx, best_pot, best_d2 = int(c), pot, cand_d2
            d2 = best_d2
        else:
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(unused[0]) if unused.size else chosen[-1]
        chosen.append(idx)
    return x[chosen].copy()


def _mean_update(x: np.ndarray, assign: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Means of each cluster's members; empty clusters keep their old center."""
    k = centers.shape[0]
    sums = np.zeros_like(centers)
    np.add.at(sums, assign, x)
    counts = np.bincount(assign, minlength=k)
    out = centers.copy()
    nonempty = counts > 0
    out[nonempty] = sums[nonempty] / counts[nonempty, None]
    return out


def _repair_empty(x, centers, assign):
    """Re-seed each empty cluster to the point farthest from its center.

    Candidates exclude points whose cluster would be emptied in turn and
    points already used this round. Reassignment after a repair can only
    lower each point's min distance, so WCSS stays monotone.
    """
    k = centers.shape[0]
    taken: set[int] = set()
    for _ in range(k):
        sizes = np.bincount(assign, minlength=k)
        empties = np.flatnonzero(sizes == 0)
        if empties.size == 0:
            break
        changed = False
        for c in empties:
            candidates = (sizes[assign] > 1).copy()
            for t in taken:
                candidates[t] = False
            if not candidates.any():
                continue  # pathological (duplicates); the cluster stays empty
            dist_c = np.sum((x - centers[c]) ** 2, axis=1)
            dist_c[~candidates] = -1.0
            pick = int(np.argmax(dist_c))
            centers[c] = x[pick]
            taken.add(pick)
            changed = True
        if not changed:
            break
        assign = np.argmin(sq_distances(x, centers), axis=1)
    return centers, assign


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int, rel_tol: float):
    """Lloyd iterations from the given centers.

    Returns (centers, assignments, wcss, history); assignments are argmin with
    respect to the returned centers, and history is non-increasing.
    """
    centers = np.array(centers, dtype=np.float64)
    history: list[float] = []
    prev = None
    assign = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        d2 = sq_distances(x, centers)
        assign = np.argmin(d2, axis=1)
        centers, assign = _repair_empty(x, centers, assign)
        d2 = sq_distances(x, centers)
        wcss = float(np.take_along_axis(d2, assign[:, None], axis=1).sum())
        history.append(wcss)
        if prev is not None and (prev - wcss) < rel_tol * prev:
            break
        prev = wcss
        centers = _mean_update(x, assign, centers)
    else:
        # max_iters exhausted right after a mean update: re-derive assignments
        # so the returned model satisfies the argmin invariant.
        d2 = sq_distances(x, centers)
        assign = np.argmin(d2, axis=1)
        wcss = float(np.take_along_axis(d2, assign[:, None], axis=1).sum())
        history.append(wcss)
    return centers, assign, history[-1], history


def kmeans_fit(embeddings: np.ndarray, config: KmeansConfig) -> ClusterModel:
    """Cluster one slide's patch embeddings into config.k groups.

    Runs config.n_init seeded restarts and keeps the lowest-WCSS run (its
    iteration history is the one recorded). If the slide has fewer patches
    than k, the effective k drops to n_patches; the request is recorded in
    the model. Identical inputs give a bit-identical model.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValidationError(f"embeddings must be a non-empty 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite embeddings")

    k_eff = min(config.k, x.shape[0])
    rng = make_rng(config.seed)
    best = None
    for _ in range(config.n_init):
        centers0 = kmeanspp_init(x, k_eff, rng)
        result = _lloyd(x, centers0, config.max_iters, config.rel_tol)
        if best is None or result[2] < best[2]:  # strict <: earliest run wins ties
            best = result
    centers, assign, wcss, history = best
    return ClusterModel(
        centers=centers,
        assignments=assign,
        wcss=wcss,
        requested_k=config.k,
        wcss_history=tuple(history),
    )


def choose_knee(candidate_ks, wcss_curve) -> int:
    """Knee of a WCSS curve: the interior candidate maximizing the discrete
    second difference wcss[i-1] - 2*wcss[i] + wcss[i+1]; ties take smaller k.
    """
    ks = list(candidate_ks)
    w = list(wcss_curve)
    if len(ks) < 3:
        raise ValidationError("need at least 3 candidates (no interior point)")
    second = [w[i - 1] - 2.0 * w[i] + w[i + 1] for i in range(1, len(ks) - 1)]
    best = int(np.argmax(second))  # first max wins: smaller k on ties
    return ks[best + 1]


def elbow_select(embeddings: np.ndarray, candidate_ks, config: KmeansConfig) -> ElbowReport:
    """Run kmeans_fit per candidate k (same seed) and pick the knee."""
    ks = [int(k) for k in candidate_ks]
    if len(ks) < 3:
        raise ValidationError("need at least 3 candidates (no interior point)")
    if any(k < 1 for k in ks):
        raise ValidationError("candidate ks must all be >= 1")
    if ks != sorted(ks) or len(set(ks)) != len(ks):
        raise ValidationError("candidate ks must be sorted ascending and unique")

    curve = [kmeans_fit(embeddings, replace(config, k=k)).wcss for k in ks]
    violations = tuple(ks[i] for i in range(1, len(ks)) if curve[i] > curve[i - 1])
    chosen = choose_knee(ks, curve)
    return ElbowReport(
        candidate_ks=tuple(ks),
        wcss_curve=tuple(curve),
        chosen_k=chosen,
        monotone_violations=violations,
    )

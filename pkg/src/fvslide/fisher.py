"""Fisher-vector encoding of clustered patch embeddings.

Each cluster of a slide gets its own small Gaussian mixture codebook: centers
are learned from the cluster's descriptors, while the mixing weight pi and
the isotropic scale sigma stay fixed at their configured values. A cluster's
Fisher vector stacks, per mixture component j, the posterior-weighted
first-order statistic

    mean_i  s_ij / c_j * (x_i - v_j)

and the second-order statistic

    mean_i  s_ij / c_hat_j * ((x_i - v_j)^2 - sigma^2)

with c_j = sigma * sqrt(pi) and c_hat_j = sigma^2 * sqrt(2 * pi). The
sigma^2 centering makes the second-order block zero-mean at the model; the
"paper_literal" mode omits it, and "raw" scaling sets both constants to 1.
The default normalization applies a signed square root followed by L2.

Descriptors are put into a canonical (lexicographic) row order before any
fitting or averaging, so encoding is bit-exact under permutation of the
input rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .clustering import KmeansConfig, kmeans_fit, kmeanspp_init, sq_distances
from .data import ClusterModel, GmmCodebook, SlidePack, SlideRepresentation, ValidationError
from .data import FLAG_POWER_L2, FLAG_RAW_SCALING, FLAG_SECOND_ORDER_CENTERED
from .seeds import child_seed, make_rng

log = logging.getLogger(__name__)

NORMALIZE_MODES = ("none", "power_l2")
SECOND_ORDER_MODES = ("centered", "paper_literal")
SCALING_MODES = ("improved", "raw")
CENTER_FIT_MODES = ("lloyd", "em")


@dataclass(frozen=True)
class FvConfig:
    m: int = 5
    pi: float = 0.2
    sigma: float = 0.1
    gmm_center_iters: int = 50
    seed: int = 0
    normalize: str = "power_l2"
    second_order: str = "centered"
    scaling: str = "improved"
    center_fit: str = "lloyd"

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError(f"m must be >= 1, got {self.m}")
        if not (0.0 < self.pi <= 1.0):
            raise ValidationError(f"pi must be in (0, 1], got {self.pi}")
        if not (self.sigma > 0.0):
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if self.gmm_center_iters < 1:
            raise ValidationError("gmm_center_iters must be >= 1")
        for value, allowed, name in (
            (self.normalize, NORMALIZE_MODES, "normalize"),
            (self.second_order, SECOND_ORDER_MODES, "second_order"),
            (self.scaling, SCALING_MODES, "scaling"),
            (self.center_fit, CENTER_FIT_MODES, "center_fit"),
        ):
            if value not in allowed:
                raise ValidationError(f"{name} must be one of {allowed}, got {value!r}")

    @property
    def flags(self) -> int:
        bits = 0
        if self.normalize == "power_l2":
            bits |= FLAG_POWER_L2
        if self.second_order == "centered":
            bits |= FLAG_SECOND_ORDER_CENTERED
        if self.scaling == "raw":
            bits |= FLAG_RAW_SCALING
        return bits


@dataclass(frozen=True)
class FisherVector:
    values: np.ndarray  # (2*m*dim,): first-order block, then second-order block
    source_cluster: int


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically (column 0 primary). Stable under any
    input permutation, which is what makes encoding order-invariant."""
    if x.shape[0] <= 1:
        return x
    return x[np.lexsort(x.T[::-1])]


def _as_descriptor_matrix(embeddings, allow_empty=False) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"descriptors must be 2-D, got shape {x.shape}")
    if not allow_empty and x.shape[0] < 1:
        raise ValidationError("need at least one descriptor")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite descriptors")
    return x


def compute_posteriors(cluster_embeddings, codebook: GmmCodebook) -> np.ndarray:
    """Soft assignments s_ij = pi*N(x_i; v_j, sigma^2 I) / sum_l pi*N(x_i; v_l, ...).

    With a shared pi this is a softmax over -||x_i - v_j||^2 / (2 sigma^2),
    computed in log space with max subtraction; rows sum to 1.
    """
    x = _as_descriptor_matrix(cluster_embeddings)
    if x.shape[1] != codebook.dim:
        raise ValidationError(f"descriptor dim {x.shape[1]} != codebook dim {codebook.dim}")
    logits = -sq_distances(x, codebook.centers) / (2.0 * codebook.sigma**2)
    logits -= logits.max(axis=1, keepdims=True)
    s = np.exp(logits)
    s /= s.sum(axis=1, keepdims=True)
    return s


def fit_codebook(cluster_embeddings, config: FvConfig) -> GmmCodebook:
    """Fit the per-cluster codebook: k-means++ centers refined by Lloyd
    iterations (or soft-EM mean updates with center_fit="em"); pi and sigma
    are fixed, never fitted.

    Clusters with fewer descriptors than components get duplicate-padded
    centers (index-order cycling) and a `padded` flag.
    """
    x = canonical_order(_as_descriptor_matrix(cluster_embeddings))
    n = x.shape[0]
    m_eff = min(config.m, n)

    if config.center_fit == "lloyd":
        km = kmeans_fit(
            x,
            KmeansConfig(
                k=m_eff, max_iters=config.gmm_center_iters, rel_tol=1e-6, seed=config.seed
            ),
        )
        centers = np.asarray(km.centers)
    else:
        centers = _em_mean_updates(x, m_eff, config)

    if m_eff < config.m:
        centers = centers[np.arange(config.m) % m_eff]
    return GmmCodebook(centers=centers, pi=config.pi, sigma=config.sigma, padded=m_eff < config.m)


def _em_mean_updates(x: np.ndarray, m: int, config: FvConfig) -> np.ndarray:
    """Soft-EM refinement of the means only: posterior-weighted averaging from
    a k-means++ start. Components with vanishing responsibility keep their
    previous center."""
    centers = kmeanspp_init(x, m, make_rng(config.seed))
    for _ in range(config.gmm_center_iters):
        s = compute_posteriors(x, GmmCodebook(centers, config.pi, config.sigma))
        mass = s.sum(axis=0)
        new = centers.copy()
        ok = mass > 1e-12
        new[ok] = (s.T @ x)[ok] / mass[ok, None]
        if np.max(np.abs(new - centers)) < 1e-12:
            centers = new
            break
        centers = new
    return centers


def _scale_constants(pi: float, sigma: float, scaling: str) -> tuple[float, float]:
    if scaling == "raw":
        return 1.0, 1.0
    return sigma * np.sqrt(pi), sigma**2 * np.sqrt(2.0 * pi)


def fisher_encode(
    cluster_embeddings, codebook: GmmCodebook, config: FvConfig, source_cluster: int = 0
) -> FisherVector:
    """Encode one cluster's descriptors against its codebook.

    The vector is the mean over descriptors of the per-descriptor statistic
    (see module docstring), first-order block first. An empty cluster yields
    the zero vector of the same length, with a warning.
    """
    x = _as_descriptor_matrix(cluster_embeddings, allow_empty=True)
    m, dim = codebook.m, codebook.dim
    if x.shape[0] == 0:
        log.warning("cluster %d is empty; emitting a zero Fisher vector", source_cluster)
        return FisherVector(values=np.zeros(2 * m * dim), source_cluster=source_cluster)
    x = canonical_order(x)

    s = compute_posteriors(x, codebook)  # (n, m)
    diff = x[:, None, :] - codebook.centers[None, :, :]  # (n, m, dim)
    c1, c2 = _scale_constants(codebook.pi, codebook.sigma, config.scaling)

    first = (s[:, :, None] * diff).mean(axis=0) / c1  # (m, dim)
    sq = diff**2
    if config.second_order == "centered":
        sq = sq - codebook.sigma**2
    second = (s[:, :, None] * sq).mean(axis=0) / c2  # (m, dim)

    values = np.concatenate([first.ravel(), second.ravel()])
    if config.normalize == "power_l2":
        values = np.sign(values) * np.sqrt(np.abs(values))
        norm = float(np.linalg.norm(values))
        if norm > 0.0:
            values = values / norm
    return FisherVector(values=values, source_cluster=source_cluster)


def encode_slide(pack: SlidePack, cluster_model: ClusterModel, config: FvConfig) -> SlideRepresentation:
    """Build the slide's bag: per cluster, fit a codebook and Fisher-encode
    its member descriptors; order the bag by descending cluster size (ties by
    lower cluster index) and record that order.
    """
    x = np.asarray(pack.embeddings, dtype=np.float64)
    if cluster_model.n_patches != x.shape[0] or cluster_model.dim != x.shape[1]:
        raise ValidationError(
            f"cluster model ({cluster_model.n_patches}, {cluster_model.dim}) was not fit "
            f"on slide {pack.slide_id!r} ({x.shape[0]}, {x.shape[1]})"
        )
    k = cluster_model.k
    sizes = cluster_model.per_cluster_size
    order = np.lexsort((np.arange(k), -sizes))  # descending size, ties by index

    fv_len = 2 * config.m * x.shape[1]
    rows = np.zeros((k, fv_len))
    for pos, c in enumerate(order):
        members = x[np.asarray(cluster_model.assignments) == c]
        if members.shape[0] == 0:
            log.warning("slide %s: cluster %d is empty; zero Fisher vector", pack.slide_id, c)
            continue
        codebook = fit_codebook(members, replace(config, seed=child_seed(config.seed, "codebook", int(c))))
        rows[pos] = fisher_encode(members, codebook, config, source_cluster=int(c)).values
    return SlideRepresentation(
        slide_id=pack.slide_id,
        fvs=rows,
        cluster_order_key=order.astype(np.int64),
        m=config.m,
        dim=x.shape[1],
        flags=config.flags,
    )

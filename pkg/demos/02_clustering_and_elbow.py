"""Per-slide K-means and choosing k with the elbow rule.

K-means (k-means++ seeding, Lloyd refinement) groups a slide's patches by
embedding similarity. The elbow rule picks the candidate k maximizing the
discrete second difference of the WCSS curve.
"""

import numpy as np

from fvslide import KmeansConfig, elbow_select, kmeans_fit

rng = np.random.default_rng(7)

# Three well-separated phenotype blobs, as if one slide had three tissue
# patterns.
centers = np.array([[0.0, 0.0], [12.0, 0.0], [0.0, 12.0]])
patches = np.concatenate([c + rng.normal(size=(60, 2)) for c in centers])

model = kmeans_fit(patches, KmeansConfig(k=3, seed=1))
print(f"k=3 fit: wcss={model.wcss:.1f}, cluster sizes={model.per_cluster_size.tolist()}")
print(f"lloyd iterations: {len(model.wcss_history)} "
      f"(wcss {model.wcss_history[0]:.0f} -> {model.wcss_history[-1]:.0f})")

# Requesting more clusters than patches degrades gracefully.
tiny = kmeans_fit(patches[:4], KmeansConfig(k=10, seed=1))
print(f"4 patches, k=10 requested -> effective k={tiny.k} (requested_k={tiny.requested_k})")

# The elbow: WCSS per candidate k, knee by max second difference.
report = elbow_select(patches, range(1, 7), KmeansConfig(seed=1))
print("\n k   wcss")
for k, w in zip(report.candidate_ks, report.wcss_curve):
    marker = "  <- chosen" if k == report.chosen_k else ""
    print(f"{k:2d}   {w:8.1f}{marker}")

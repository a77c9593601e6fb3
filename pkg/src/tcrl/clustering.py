"""DBSCAN pseudo-labelling over cosine distances of global features."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

OUTLIER = -1
DEFAULT_EPS = 0.1
DEFAULT_MIN_PTS = 4


class ClusteringError(ValueError):
    pass


class NoClusters(ClusteringError):
    """Every sample was labelled an outlier."""


@dataclass
class PseudoLabeling:
    labels: np.ndarray  # per sample, OUTLIER or 0..K-1

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def num_clusters(self) -> int:
        valid = self.labels[self.labels != OUTLIER]
        return int(valid.max()) + 1 if valid.size else 0

    @property
    def num_outliers(self) -> int:
        return int(np.sum(self.labels == OUTLIER))

    @property
    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.num_clusters)]

    @property
    def inliers(self) -> np.ndarray:
        return np.flatnonzero(self.labels != OUTLIER)


def pairwise_distance(features) -> np.ndarray:
    """Cosine distance ``1 - a.b`` between unit-norm rows; symmetric with a zero diagonal."""
    f = np.asarray(features, dtype=np.float64)
    d = 1.0 - f @ f.T
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, 2.0)


def dbscan(dist, eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS) -> PseudoLabeling:
    """DBSCAN on a precomputed distance matrix.

    Neighbourhoods are inclusive (``d <= eps``) and count the point itself.
    Clusters are numbered in the order their first core point appears; a
    border point joins the first cluster whose expansion reaches it.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ClusteringError(f"expected a square distance matrix, got {dist.shape}")
    n = dist.shape[0]
    if n == 0:
        raise ClusteringError("cannot cluster an empty set")
    if eps <= 0 or min_pts < 1:
        raise ClusteringError("need eps > 0 and min_pts >= 1")
    adj = dist <= eps
    neighbors = [np.flatnonzero(row) for row in adj]
    core = adj.sum(axis=1) >= min_pts
    labels = np.full(n, OUTLIER, dtype=np.int64)
    k = 0
    for i in range(n):
        if labels[i] != OUTLIER or not core[i]:
            continue
        labels[i] = k
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for j in neighbors[p]:
                if labels[j] == OUTLIER:
                    labels[j] = k
                    if core[j]:
                        queue.append(j)
        k += 1
    return PseudoLabeling(labels)


def canonicalize(labels) -> np.ndarray:
    """Rename clusters by order of first appearance; outliers stay OUTLIER."""
    labels = np.asarray(labels)
    out = np.full(len(labels), OUTLIER, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab == OUTLIER:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def relabel_epoch(features_global, eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS) -> PseudoLabeling:
    labeling = dbscan(pairwise_distance(features_global), eps, min_pts)
    if labeling.num_clusters == 0:
        raise NoClusters(
            f"DBSCAN marked all {len(labeling.labels)} samples as outliers "
            f"(eps={eps}, min_pts={min_pts}); try a larger eps or a smaller min_pts"
        )
    return labeling


def write_labels_csv(path, labeling: PseudoLabeling) -> None:
    lines = ["sample_index,pseudo_label"]
    lines += [f"{i},{int(lab)}" for i, lab in enumerate(labeling.labels)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

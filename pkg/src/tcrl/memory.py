"""Part, global and cluster memory banks with momentum updates.

Banks are indexed by position in the epoch's inlier set (outliers get no
row). Rows are re-normalized after every write so dot products stay
cosine similarities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .clustering import OUTLIER, PseudoLabeling
from .numerics import l2_normalize

ALPHA = 0.1
BETA = 0.1
GAMMA = 0.1


class BankError(ValueError):
    pass


class UpdatePolicy(str, Enum):
    ALL = "all"
    HARD = "hard"
    RANDOM = "random"


@dataclass
class MomentumConfig:
    alpha: float = ALPHA
    beta: float = BETA
    gamma: float = GAMMA

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BankError(f"{name}={v} outside [0, 1]")


@dataclass
class InstanceBank:
    rows: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) pseudo label of each row
    kind: str = "global"

    def __post_init__(self):
        if self.kind not in ("part", "global"):
            raise BankError(f"unknown instance bank kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class ClusterBank:
    rows: np.ndarray  # (K, D)
    label_map: dict[int, int] = field(default_factory=dict)

    def row_of(self, k: int) -> int:
        try:
            return self.label_map[int(k)]
        except KeyError:
            raise BankError(f"cluster {k} not in bank") from None

    @property
    def num_clusters(self) -> int:
        return len(self.rows)


def init_banks(f_part, f_global, labeling: PseudoLabeling) -> tuple[InstanceBank, InstanceBank, ClusterBank]:
    """Banks for one epoch.

    `f_part` and `f_global` are aligned with ``labeling.labels``; outlier rows
    are dropped. Centroids are the re-normalized mean global feature of each
    cluster.
    """
    f_part = np.asarray(f_part, dtype=np.float64)
    f_global = np.asarray(f_global, dtype=np.float64)
    if f_part.shape != f_global.shape or len(f_global) != len(labeling.labels):
        raise BankError("part/global features must align with the labeling")
    keep = labeling.labels != OUTLIER
    labels = labeling.labels[keep]
    part = InstanceBank(f_part[keep].copy(), labels.copy(), "part")
    glob = InstanceBank(f_global[keep].copy(), labels.copy(), "global")
    k = labeling.num_clusters
    centroids = np.zeros((k, f_global.shape[1]))
    np.add.at(centroids, labels, f_global[keep])
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise BankError("empty cluster in labeling")
    centroids = l2_normalize(centroids / counts[:, None])
    return part, glob, ClusterBank(centroids, {i: i for i in range(k)})


def momentum_blend(row, q, m: float) -> np.ndarray:
    """``m * row + (1 - m) * q`` before re-normalization."""
    return m * np.asarray(row, dtype=np.float64) + (1.0 - m) * np.asarray(q, dtype=np.float64)


def update_instance(bank: InstanceBank, idx: int, q, m: float) -> None:
    if not 0 <= idx < len(bank.rows):
        raise BankError(f"row {idx} out of range for bank of {len(bank.rows)}")
    if not 0.0 <= m <= 1.0:
        raise BankError(f"momentum {m} outside [0, 1]")
    if m == 1.0:
        return
    bank.rows[idx] = l2_normalize(momentum_blend(bank.rows[idx], q, m))


def update_cluster(
    bank: ClusterBank,
    k: int,
    batch_members,
    gamma: float,
    policy: UpdatePolicy | str = UpdatePolicy.ALL,
    rng: np.random.Generator | None = None,
) -> None:
    """Momentum-update centroid `k` from the batch features carrying label `k`.

    `batch_members` is a sequence of ``(index, feature)`` pairs in batch order.
    ALL folds every member in sequentially; HARD uses only the member least
    similar to the current centroid; RANDOM uses one member chosen uniformly.
    """
    policy = UpdatePolicy(policy)
    members = list(batch_members)
    if not members:
        return
    r = bank.row_of(k)
    feats = [np.asarray(f, dtype=np.float64) for _, f in members]
    if policy is UpdatePolicy.HARD:
        sims = [float(bank.rows[r] @ f) / (np.linalg.norm(f) or 1.0) for f in feats]
        feats = [feats[int(np.argmin(sims))]]
    elif policy is UpdatePolicy.RANDOM:
        if rng is None:
            raise BankError("RANDOM policy needs an rng")
        feats = [feats[int(rng.integers(len(feats)))]]
    for f in feats:
        if gamma != 1.0:
            bank.rows[r] = l2_normalize(momentum_blend(bank.rows[r], f, gamma))

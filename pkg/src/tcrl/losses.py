"""Contrastive losses with analytic gradients w.r.t. the query features.

Every function accepts a single query of shape ``(D,)`` or a batch of shape
``(B, D)``; per-query losses come back with the matching leading shape.
Memory-bank rows are read as constants and never receive gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .memory import ClusterBank, InstanceBank
from .numerics import InvalidInput, log_softmax, logsumexp, softmax

TAU = 0.05
LAMBDA = 0.5
ETA = 1.0
TRIPLET_MARGIN = 0.3


@dataclass
class LossConfig:
    tau: float = TAU
    lambda_: float = LAMBDA
    eta: float = ETA
    enable_pcl: bool = True
    enable_hcl: bool = True
    enable_wrccl: bool = True
    baseline_ccl: bool = False
    baseline_id: bool = False
    baseline_triplet: bool = False
    stop_gradient: bool = False
    triplet_margin: float = TRIPLET_MARGIN

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidInput(f"tau must be positive, got {self.tau}")

    @property
    def any_enabled(self) -> bool:
        return any((self.enable_pcl, self.enable_hcl, self.enable_wrccl,
                    self.baseline_ccl, self.baseline_id, self.baseline_triplet))


TERMS = ("pcl_g", "pcl_p", "hcl_g", "hcl_p", "wrccl", "ccl", "id", "triplet")


@dataclass
class LossBundle:
    pcl_g: float = 0.0
    pcl_p: float = 0.0
    hcl_g: float = 0.0
    hcl_p: float = 0.0
    wrccl: float = 0.0
    ccl: float = 0.0
    id: float = 0.0
    triplet: float = 0.0
    total: float = 0.0
    grad_q: np.ndarray | None = None
    grad_q_masked: np.ndarray | None = None
    grad_head: np.ndarray | None = None
    hcl_degenerate: bool = False

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TERMS + ("total",)}


class PCLResult(NamedTuple):
    loss_g: np.ndarray
    loss_p: np.ndarray
    grad_q: np.ndarray
    grad_q_masked: np.ndarray


def _rows(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise InvalidInput(f"expected (D,) or (B, D), got {arr.shape}")
    return arr, False


def _out(value: np.ndarray, single: bool):
    return value[0] if single else value


def _proxy_term(q: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # KL(softmax(c) || softmax(q)) + ||q - c||, target c held fixed
    p = softmax(c)
    kl = np.sum(p * (log_softmax(c) - log_softmax(q)), axis=1)
    diff = q - c
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    g_dist = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)
    return np.maximum(kl, 0.0) + dist, softmax(q) - p + g_dist


def pcl(q, q_masked, c_k) -> PCLResult:
    """Proxy loss tying the global and part features to their cluster centroid."""
    qg, single = _rows(q)
    qp, _ = _rows(q_masked)
    c, _ = _rows(c_k)
    if qg.shape != qp.shape or c.shape[1] != qg.shape[1]:
        raise InvalidInput("query, masked query and centroid dims must agree")
    c = np.broadcast_to(c, qg.shape)
    lg, gg = _proxy_term(qg, c)
    lp, gp = _proxy_term(qp, c)
    return PCLResult(_out(lg, single), _out(lp, single), _out(gg, single), _out(gp, single))


def hcl(q, bank: InstanceBank, y_k, tau: float = TAU):
    """Instance-level contrastive loss against every row of an instance bank.

    Positives are all rows whose pseudo label equals `y_k`; every other row
    is a negative. Returns ``(loss, grad_q)``. With no negatives the loss is
    0 by convention (see `has_negatives`).
    """
    qs, single = _rows(q)
    y = np.broadcast_to(np.asarray(y_k, dtype=np.int64), (len(qs),))
    rows = np.asarray(bank.rows, dtype=np.float64)
    pos = bank.labels[None, :] == y[:, None]
    if not np.all(pos.any(axis=1)):
        raise InvalidInput("query label has no positive rows in the bank")
    has_neg = (~pos).any(axis=1)
    logits = qs @ rows.T / tau
    neg_inf = np.where(pos, logits, -np.inf)
    lse_all = logsumexp(logits, axis=1)
    lse_pos = logsumexp(neg_inf, axis=1)
    loss = np.where(has_neg, np.maximum(lse_all - lse_pos, 0.0), 0.0)
    p_all = np.exp(logits - lse_all[:, None])
    p_pos = np.exp(neg_inf - lse_pos[:, None])
    grad = (p_all - p_pos) @ rows / tau
    grad[~has_neg] = 0.0
    return _out(loss, single), _out(grad, single)


def has_negatives(bank: InstanceBank, y_k) -> bool:
    return bool(np.any(bank.labels != y_k))


def wrccl_weight(q, same_label_feats) -> float:
    """Mean cosine similarity between `q` and its same-label batch features (self included)."""
    q = np.asarray(q, dtype=np.float64)
    feats = np.atleast_2d(np.asarray(same_label_feats, dtype=np.float64))
    if feats.size == 0:
        raise InvalidInput("weight needs at least one same-label feature")
    nq = np.linalg.norm(q)
    nf = np.linalg.norm(feats, axis=1)
    if nq == 0 or np.any(nf == 0):
        raise InvalidInput("zero-norm feature in weight computation")
    return float(np.clip(np.mean(feats @ q / (nf * nq)), -1.0, 1.0))


def batch_weights(q, labels) -> np.ndarray:
    """`wrccl_weight` for every row of a batch, using the batch itself as the pool."""
    qs = np.asarray(q, dtype=np.float64)
    unit = qs / np.linalg.norm(qs, axis=1, keepdims=True)
    sims = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    return np.clip(np.sum(sims * same, axis=1) / same.sum(axis=1), -1.0, 1.0)


def wrccl(q, cbank: ClusterBank, y_k, w, tau: float = TAU):
    """Cluster cross-entropy scaled by a (non-negative) reliability weight.

    Negative weights are clamped to zero. `w` is a constant: no gradient
    flows through it. Returns ``(loss, grad_q)``.
    """
    qs, single = _rows(q)
    y = np.broadcast_to(np.asarray(y_k, dtype=np.int64), (len(qs),))
    rows = np.asarray([cbank.row_of(k) for k in y], dtype=np.int64)
    w = np.maximum(np.broadcast_to(np.asarray(w, dtype=np.float64), (len(qs),)), 0.0)
    c = np.asarray(cbank.rows, dtype=np.float64)
    logits = qs @ c.T / tau
    logp = log_softmax(logits)
    idx = np.arange(len(qs))
    loss = -w * logp[idx, rows]
    resid = np.exp(logp)
    resid[idx, rows] -= 1.0
    grad = (w[:, None] * resid) @ c / tau
    return _out(loss, single), _out(grad, single)


def baseline_ccl(q, cbank: ClusterBank, y_k, tau: float = TAU):
    """Plain cluster contrastive loss: `wrccl` with unit weight."""
    return wrccl(q, cbank, y_k, 1.0, tau)


class IDTripletResult(NamedTuple):
    id_loss: float
    triplet_loss: float
    grad_features: np.ndarray
    grad_head: np.ndarray


def id_loss(features, labels, head) -> tuple[float, np.ndarray, np.ndarray]:
    """Softmax cross-entropy of a linear identity head, averaged over the batch.

    Returns ``(loss, grad_features, grad_head)``.
    """
    f = np.asarray(features, dtype=np.float64)
    head = np.asarray(head, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = len(f)
    logp = log_softmax(f @ head.T)
    loss = -np.mean(logp[np.arange(b), labels])
    resid = np.exp(logp)
    resid[np.arange(b), labels] -= 1.0
    resid /= b
    return float(loss), resid @ head, resid.T @ f


def batch_hard_triplet(features, labels, margin: float = TRIPLET_MARGIN) -> tuple[float, np.ndarray]:
    """Hinge on (hardest positive distance - hardest negative distance + margin).

    Euclidean distances; the anchor itself is never its own positive.
    Gradient reaches anchors, hardest positives and hardest negatives.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = len(f)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not np.all(pos_mask.any(axis=1)) or not np.all(neg_mask.any(axis=1)):
        raise InvalidInput("every anchor needs at least one positive and one negative in the batch")
    diff = f[:, None, :] - f[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    hp = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hn = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    idx = np.arange(b)
    d_ap = dist[idx, hp]
    d_an = dist[idx, hn]
    hinge = d_ap - d_an + margin
    grad = np.zeros_like(f)
    for i in np.flatnonzero(hinge > 0):
        if d_ap[i] > 0:
            u = (f[i] - f[hp[i]]) / (d_ap[i] * b)
            grad[i] += u
            grad[hp[i]] -= u
        if d_an[i] > 0:
            v = (f[i] - f[hn[i]]) / (d_an[i] * b)
            grad[i] -= v
            grad[hn[i]] += v
    return float(np.mean(np.maximum(hinge, 0.0))), grad


def baseline_id_triplet(features, labels, head, margin: float = TRIPLET_MARGIN) -> IDTripletResult:
    """Identity cross-entropy plus batch-hard triplet, as one baseline."""
    li, gi, gh = id_loss(features, labels, head)
    lt, gt = batch_hard_triplet(features, labels, margin)
    return IDTripletResult(li, lt, gi + gt, gh)


def total(bundle: LossBundle, cfg: LossConfig) -> LossBundle:
    """Fill `bundle.total` from its term values; disabled terms are zeroed first."""
    enabled = {
        "pcl_g": cfg.enable_pcl, "pcl_p": cfg.enable_pcl,
        "hcl_g": cfg.enable_hcl, "hcl_p": cfg.enable_hcl,
        "wrccl": cfg.enable_wrccl, "ccl": cfg.baseline_ccl,
        "id": cfg.baseline_id, "triplet": cfg.baseline_triplet,
    }
    for k, on in enabled.items():
        if not on:
            setattr(bundle, k, 0.0)
    bundle.total = (
        cfg.lambda_ * (bundle.pcl_p + bundle.pcl_g)
        + cfg.eta * (bundle.hcl_p + bundle.hcl_g)
        + bundle.wrccl + bundle.ccl + bundle.id + bundle.triplet
    )
    return bundle


def batch_loss(
    q,
    q_masked,
    labels,
    part_bank: InstanceBank,
    global_bank: InstanceBank,
    cluster_bank: ClusterBank,
    cfg: LossConfig,
    head=None,
) -> LossBundle:
    """All enabled terms for a batch, averaged over queries, with gradients.

    `q` and `q_masked` are the ``(B, D)`` global and part features of the
    batch, `labels` their pseudo labels.
    """
    q = np.asarray(q, dtype=np.float64)
    qm = np.asarray(q_masked, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = len(q)
    gq = np.zeros_like(q)
    gqm = np.zeros_like(qm)
    bundle = LossBundle()

    if cfg.enable_pcl:
        cents = cluster_bank.rows[[cluster_bank.row_of(k) for k in labels]]
        res = pcl(q, qm, cents)
        bundle.pcl_g = float(res.loss_g.mean())
        bundle.pcl_p = float(res.loss_p.mean())
        gq += cfg.lambda_ * res.grad_q / b
        gqm += cfg.lambda_ * res.grad_q_masked / b
    if cfg.enable_hcl:
        lg, g = hcl(q, global_bank, labels, cfg.tau)
        lp, gp = hcl(qm, part_bank, labels, cfg.tau)
        bundle.hcl_g = float(lg.mean())
        bundle.hcl_p = float(lp.mean())
        bundle.hcl_degenerate = not np.any(global_bank.labels != global_bank.labels[0])
        gq += cfg.eta * g / b
        gqm += cfg.eta * gp / b
    if cfg.enable_wrccl:
        w = batch_weights(q, labels)
        loss, g = wrccl(q, cluster_bank, labels, w, cfg.tau)
        bundle.wrccl = float(loss.mean())
        gq += g / b
    if cfg.baseline_ccl:
        loss, g = baseline_ccl(q, cluster_bank, labels, cfg.tau)
        bundle.ccl = float(loss.mean())
        gq += g / b
    if cfg.baseline_id:
        if head is None:
            raise InvalidInput("the identity baseline needs a classifier head")
        bundle.id, g, bundle.grad_head = id_loss(q, labels, head)
        gq += g
    if cfg.baseline_triplet:
        bundle.triplet, g = batch_hard_triplet(q, labels, cfg.triplet_margin)
        gq += g

    if cfg.stop_gradient:
        gqm[:] = 0.0
    bundle.grad_q = gq
    bundle.grad_q_masked = gqm
    return total(bundle, cfg)



_OFF = dict(enable_pcl=False, enable_hcl=False, enable_wrccl=False,
            baseline_ccl=False, baseline_id=False, baseline_triplet=False)

# Loss compositions of the ablation table, keyed by row name.
ABLATION_ROWS: dict[str, dict[str, bool]] = {
    "ccl": dict(_OFF, baseline_ccl=True),
    "wrccl": dict(_OFF, enable_wrccl=True),
    "hcl": dict(_OFF, enable_hcl=True),
    "pcl": dict(_OFF, enable_pcl=True),
    "id+triplet": dict(_OFF, baseline_id=True, baseline_triplet=True),
    "id+ccl": dict(_OFF, baseline_id=True, baseline_ccl=True),
    "wrccl+hcl": dict(_OFF, enable_wrccl=True, enable_hcl=True),
    "wrccl+pcl": dict(_OFF, enable_wrccl=True, enable_pcl=True),
    "hcl+pcl": dict(_OFF, enable_hcl=True, enable_pcl=True),
    "ccl+id+triplet": dict(_OFF, baseline_ccl=True, baseline_id=True, baseline_triplet=True),
    "tcrl(ccl+id+triplet)": dict(_OFF, enable_hcl=True, enable_pcl=True, baseline_ccl=True,
                                 baseline_id=True, baseline_triplet=True),
    "tcrl": dict(_OFF, enable_wrccl=True, enable_hcl=True, enable_pcl=True),
}


def ablation_config(row: str, base: LossConfig | None = None) -> LossConfig:
    """`base` (default LossConfig) with the toggles of ablation row `row`."""
    if row not in ABLATION_ROWS:
        raise InvalidInput(f"unknown ablation row {row!r}; choose from {list(ABLATION_ROWS)}")
    base = base or LossConfig()
    return LossConfig(**{**asdict(base), **ABLATION_ROWS[row]})

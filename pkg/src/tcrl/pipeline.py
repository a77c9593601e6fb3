"""Training loop, PK sampling, retrieval evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import encoder as enc
from .clustering import DEFAULT_EPS, DEFAULT_MIN_PTS, PseudoLabeling, relabel_epoch
from .data import MASKERS, Dataset, augment
from .losses import TERMS, LossConfig, batch_loss
from .memory import MomentumConfig, UpdatePolicy, init_banks, update_cluster, update_instance

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TCRLCKPT"
CHECKPOINT_VERSION = 1
ENCODE_CHUNK = 256
MAX_RANK = 25


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    P: int = 8
    k: int = 4
    base_lr: float = 3e-3
    eps: float = DEFAULT_EPS
    min_pts: int = DEFAULT_MIN_PTS
    momentum: MomentumConfig = field(default_factory=MomentumConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mask_strategy: str = "random"
    cluster_update_policy: str = "all"
    seed: int = 0
    hidden: int = 128
    dim: int = 64
    weight_decay: float = enc.WEIGHT_DECAY
    iters_per_epoch: int = 0  # 0 -> inliers // (P * k)

    def __post_init__(self):
        if isinstance(self.momentum, dict):
            self.momentum = MomentumConfig(**self.momentum)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not 1 <= self.epochs <= enc.MAX_EPOCH:
            out.append(f"epochs must be in 1..{enc.MAX_EPOCH}")
        if self.P < 1 or self.k < 1:
            out.append("P and k must be positive")
        if self.mask_strategy not in MASKERS:
            out.append(f"mask_strategy must be one of {sorted(MASKERS)}")
        if self.cluster_update_policy not in [p.value for p in UpdatePolicy]:
            out.append(f"cluster_update_policy must be one of {[p.value for p in UpdatePolicy]}")
        if self.base_lr < 0:
            out.append("base_lr must be >= 0")
        if self.eps <= 0 or self.min_pts < 1:
            out.append("need eps > 0 and min_pts >= 1")
        if self.iters_per_epoch < 0:
            out.append("iters_per_epoch must be >= 0")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    config: TrainConfig
    params: enc.EncoderParams
    optim: enc.OptimState
    rng: np.random.Generator
    epoch: int = 0  # last completed epoch


def init_state(config: TrainConfig, image_shape: tuple[int, ...]) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = enc.init_params(int(np.prod(image_shape)), config.hidden, config.dim, rng)
    return TrainState(config, params, enc.OptimState.zeros_like(params), rng)


def encode_all(params: enc.EncoderParams, images) -> np.ndarray:
    images = np.asarray(images)
    out = [enc.encode(params, images[i:i + ENCODE_CHUNK])[0] for i in range(0, len(images), ENCODE_CHUNK)]
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def pk_sample(labeling: PseudoLabeling, P: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """P distinct clusters, k members each (with replacement only for clusters smaller than k)."""
    members = labeling.members
    if len(members) < P:
        raise ValueError(f"need at least {P} clusters, have {len(members)}")
    chosen = rng.choice(len(members), size=P, replace=False)
    batch = [rng.choice(members[c], size=k, replace=len(members[c]) < k) for c in chosen]
    return np.concatenate(batch).astype(np.int64)


# ---------------------------------------------------------------------------
# telemetry
# ---------------------------------------------------------------------------

TELEMETRY_COLUMNS = ("epoch", "step", "lr", "K", "outliers", "hcl_degenerate") + TERMS + ("total",)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Telemetry:
    """Per-step CSV log. Header lines starting with '#' carry the effective config."""

    def __init__(self, path=None, config: TrainConfig | None = None, append: bool = False):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path and not append:
            with open(self.path, "w", newline="") as fh:
                if config is not None:
                    fh.write("# config " + json.dumps(config.to_dict(), sort_keys=True) + "\n")
                fh.write(",".join(TELEMETRY_COLUMNS) + "\n")

    def log(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                fh.write(",".join(_fmt(row[c]) for c in TELEMETRY_COLUMNS) + "\n")


def read_telemetry(path) -> tuple[dict, list[dict]]:
    config = {}
    lines = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# config "):
            config = json.loads(line[len("# config "):])
        elif not line.startswith("#"):
            lines.append(line)
    return config, list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _mask_batch(images, strategy: str, rng) -> np.ndarray:
    masker = MASKERS[strategy]
    return np.stack([masker(img, rng).pixels for img in images])


def train_epoch(state: TrainState, train: Dataset, epoch: int, telemetry: Telemetry | None = None) -> TrainState:
    """One epoch: cluster, initialise banks, then PK batches with loss, step and bank updates."""
    cfg = state.config
    lcfg = cfg.loss
    rng = state.rng
    images = train.images
    params = state.params
    optim = state.optim

    feats_g = encode_all(params, images)
    labeling = relabel_epoch(feats_g, cfg.eps, cfg.min_pts)
    K = labeling.num_clusters
    inliers = labeling.inliers
    masked_all = _mask_batch(images, cfg.mask_strategy, rng)
    feats_p = encode_all(params, masked_all)
    part_bank, global_bank, cluster_bank = init_banks(feats_p, feats_g, labeling)
    row_of = np.full(len(images), -1, dtype=np.int64)
    row_of[inliers] = np.arange(len(inliers))

    head = head_m = head_v = None
    if lcfg.baseline_id:
        head = cluster_bank.rows / lcfg.tau
        head_m = np.zeros_like(head)
        head_v = np.zeros_like(head)

    P = min(cfg.P, K)
    iters = cfg.iters_per_epoch or max(1, len(inliers) // (P * cfg.k))
    lr = enc.lr_at(epoch, cfg.base_lr)
    policy = UpdatePolicy(cfg.cluster_update_policy)
    mom = cfg.momentum

    for step in range(iters):
        idx = pk_sample(labeling, P, cfg.k, rng)
        labels = labeling.labels[idx]
        originals = np.stack([augment(images[i], rng) for i in idx])
        masked = _mask_batch(originals, cfg.mask_strategy, rng)
        q, cache_g = enc.encode(params, originals)
        qm, cache_p = enc.encode(params, masked)

        bundle = batch_loss(q, qm, labels, part_bank, global_bank, cluster_bank, lcfg, head)
        terms = bundle.terms()
        if not all(math.isfinite(v) for v in terms.values()):
            raise TrainingAborted(f"non-finite loss at epoch {epoch} batch {step}: {terms}")

        if lcfg.any_enabled:
            grads = enc.add_grads(
                enc.backward(cache_g, bundle.grad_q, params),
                enc.backward(cache_p, bundle.grad_q_masked, params),
            )
            try:
                params, optim = enc.adam_step(params, grads, optim, lr, cfg.weight_decay)
            except enc.NonFiniteGradient as exc:
                raise TrainingAborted(f"epoch {epoch} batch {step}: {exc}; terms {terms}") from exc
            if head is not None:
                head, head_m, head_v = enc.adam_update(
                    head, bundle.grad_head, head_m, head_v, optim.step, lr, cfg.weight_decay
                )

        for j, i in enumerate(idx):
            update_instance(part_bank, row_of[i], qm[j], mom.alpha)
            update_instance(global_bank, row_of[i], q[j], mom.beta)
        for lab in dict.fromkeys(labels.tolist()):
            sel = np.flatnonzero(labels == lab)
            update_cluster(cluster_bank, lab, [(int(idx[j]), q[j]) for j in sel], mom.gamma, policy, rng)

        if telemetry is not None:
            telemetry.log({
                "epoch": epoch, "step": step, "lr": lr, "K": K,
                "outliers": labeling.num_outliers, "hcl_degenerate": bundle.hcl_degenerate,
                **terms,
            })

    state.params = params
    state.optim = optim
    state.epoch = epoch
    return state


def train(
    config: TrainConfig,
    train_data: Dataset,
    telemetry_path=None,
    checkpoint_path=None,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> tuple[TrainState, Telemetry]:
    """Run (or resume) training up to ``config.epochs``.

    When `checkpoint_path` is given the state is written after every epoch.
    """
    if config.P * config.k > len(train_data):
        raise ValueError(f"P*k = {config.P * config.k} exceeds the {len(train_data)} training images")
    if state is None:
        state = init_state(config, train_data.shape)
    telemetry = Telemetry(telemetry_path, config, append=state.epoch > 0)
    for epoch in range(state.epoch + 1, config.epochs + 1):
        train_epoch(state, train_data, epoch, telemetry)
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
        if on_epoch:
            on_epoch(state)
        log.info("epoch %d done", epoch)
    return state, telemetry


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mAP: float
    cmc: list[float]
    ap: list[float]
    query_indices: list[int]
    skipped: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path=None, cmc_csv_path=None) -> None:
        if json_path:
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if cmc_csv_path:
            lines = ["rank,accuracy"] + [f"{r},{repr(float(a))}" for r, a in enumerate(self.cmc, 1)]
            Path(cmc_csv_path).write_text("\n".join(lines) + "\n")


def rank_gallery(sims: np.ndarray) -> np.ndarray:
    """Gallery order by descending similarity, ties broken by lower index."""
    return np.lexsort((np.arange(len(sims)), -sims))


def evaluate_features(qf, gf, q_ids, g_ids, q_cams, g_cams, max_rank: int = MAX_RANK) -> EvalReport:
    """mAP and CMC for cosine-similarity retrieval.

    Gallery items sharing both identity and camera with the query are
    removed from its ranking. Queries with no remaining true match are
    skipped with a warning.
    """
    qf = np.asarray(qf, dtype=np.float64)
    gf = np.asarray(gf, dtype=np.float64)
    qf = qf / np.maximum(np.linalg.norm(qf, axis=1, keepdims=True), 1e-12)
    gf = gf / np.maximum(np.linalg.norm(gf, axis=1, keepdims=True), 1e-12)
    g_ids = np.asarray(g_ids)
    g_cams = np.asarray(g_cams)
    sims = qf @ gf.T
    aps, firsts, used, skipped = [], [], [], []
    for i in range(len(qf)):
        order = rank_gallery(sims[i])
        keep = ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        hits = g_ids[order][keep] == q_ids[i]
        if not hits.any():
            skipped.append(i)
            continue
        ranks = np.flatnonzero(hits) + 1
        aps.append(math.fsum((j + 1) / r for j, r in enumerate(ranks)) / len(ranks))
        firsts.append(int(ranks[0]))
        used.append(i)
    if skipped:
        log.warning("%d queries have no true match in the gallery and were skipped", len(skipped))
    if not used:
        raise ValueError("no query has a true match in the gallery")
    firsts = np.asarray(firsts)
    cmc = [float(np.sum(firsts <= r)) / len(firsts) for r in range(1, max_rank + 1)]
    return EvalReport(math.fsum(aps) / len(aps), cmc, aps, used, skipped)


def evaluate(params: enc.EncoderParams, query: Dataset, gallery: Dataset, max_rank: int = MAX_RANK) -> EvalReport:
    """Retrieval with global features of original images only."""
    return evaluate_features(
        encode_all(params, query.images), encode_all(params, gallery.images),
        query.identities, gallery.identities, query.cameras, gallery.cameras, max_rank,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout (all integers little-endian):
#   8 bytes   magic b"TCRLCKPT"
#   4 bytes   uint32 format version
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header (sorted keys): version, epoch, config,
#             rng_state, optim_step, arrays=[{name, shape, offset, nbytes}]
#   payload   float64 arrays back to back, offsets relative to payload start
#   32 bytes  SHA-256 of every preceding byte

def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {f"params.{k}": v for k, v in state.params.as_dict().items()}
    arrays.update({f"adam_m.{k}": v for k, v in state.optim.m.items()})
    arrays.update({f"adam_v.{k}": v for k, v in state.optim.v.items()})
    return arrays


def checkpoint_bytes(state: TrainState) -> bytes:
    arrays = _state_arrays(state)
    meta, payload, offset = [], io.BytesIO(), 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        meta.append({"name": name, "shape": list(arrays[name].shape), "offset": offset, "nbytes": len(data)})
        payload.write(data)
        offset += len(data)
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "config": state.config.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "optim_step": state.optim.step,
        "arrays": meta,
    }, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + payload.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < fixed + 32 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint or is truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path} is corrupt or truncated (checksum mismatch)")
    version, hlen = struct.unpack("<IQ", body[len(CHECKPOINT_MAGIC):fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    header = json.loads(body[fixed:fixed + hlen])
    payload = body[fixed + hlen:]
    arrays = {}
    for m in header["arrays"]:
        raw = payload[m["offset"]:m["offset"] + m["nbytes"]]
        arrays[m["name"]] = np.frombuffer(raw, dtype="<f8").reshape(m["shape"]).astype(np.float64)
    pick = lambda prefix: {k: arrays[f"{prefix}.{k}"] for k in enc.PARAM_NAMES}
    params = enc.EncoderParams(**pick("params"))
    optim = enc.OptimState(pick("adam_m"), pick("adam_v"), header["optim_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(TrainConfig(**header["config"]), params, optim, rng, header["epoch"])


def state_digest(state: TrainState) -> str:
    return hashlib.sha256(checkpoint_bytes(state)).hexdigest()


def run_summary(report: EvalReport, ranks: Iterable[int] = (1, 5, 10)) -> dict:
    return {"mAP": report.mAP, **{f"rank{r}": report.cmc[r - 1] for r in ranks if r <= len(report.cmc)}}

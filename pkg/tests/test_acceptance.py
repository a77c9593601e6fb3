"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

The desk-scale training runs (criteria 6 to 8) take several minutes.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from tcrl import encoder as enc
from tcrl.clustering import canonicalize, dbscan, pairwise_distance
from tcrl.data import gen_synthetic
from tcrl.losses import (
    ablation_config,
    baseline_ccl,
    baseline_id_triplet,
    hcl,
    id_loss,
    pcl,
    wrccl,
)
from tcrl.memory import ClusterBank, InstanceBank, momentum_blend, update_instance
from tcrl.numerics import grad_check, l2_normalize
from tcrl.pipeline import TrainConfig, evaluate, evaluate_features, init_state, train

from test_clustering import _blobs, brute_force_dbscan
from test_pipeline import brute_force_eval

GRAD_TOL = 1e-4
CONFIGS = 100
SEEDS_LEARN = (0, 1, 2)
SEEDS_ABLATE = (0, 1, 2, 3, 4)
MAP_GAIN = 0.30
LEARN_BUDGET_S = 600.0


def report(capsys, ok, criterion, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------

def _grad_config(i):
    rng = np.random.default_rng(10_000 + i)
    d = (4, 16, 64)[i % 3]
    k = (2, 5)[(i // 3) % 2]
    n = int(rng.integers(k + 1, 65))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    bank = InstanceBank(l2_normalize(rng.normal(size=(n, d))), labels)
    cbank = ClusterBank(l2_normalize(rng.normal(size=(k, d))), {j: j for j in range(k)})
    tau = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
    return rng, d, k, bank, cbank, tau


def _check_pcl(i):
    rng, d, *_ = _grad_config(i)
    q, qm, c = (l2_normalize(rng.normal(size=d)) for _ in range(3))
    r = pcl(q, qm, c)
    return max(grad_check(lambda x: float(pcl(x, qm, c).loss_g), q, r.grad_q),
               grad_check(lambda x: float(pcl(q, x, c).loss_p), qm, r.grad_q_masked))


def _check_hcl(i):
    rng, d, k, bank, _, tau = _grad_config(i)
    q = l2_normalize(rng.normal(size=d))
    y = int(rng.integers(k))
    return grad_check(lambda x: float(hcl(x, bank, y, tau)[0]), q, hcl(q, bank, y, tau)[1])


def _check_wrccl(i):
    rng, d, k, _, cb, tau = _grad_config(i)
    q = l2_normalize(rng.normal(size=d))
    y, w = int(rng.integers(k)), float(rng.uniform(0, 1))
    return grad_check(lambda x: float(wrccl(x, cb, y, w, tau)[0]), q, wrccl(q, cb, y, w, tau)[1])


def _check_ccl(i):
    rng, d, k, _, cb, tau = _grad_config(i)
    q = l2_normalize(rng.normal(size=d))
    y = int(rng.integers(k))
    return grad_check(lambda x: float(baseline_ccl(x, cb, y, tau)[0]), q, baseline_ccl(q, cb, y, tau)[1])


def _check_id_triplet(i):
    rng, d, k, *_ = _grad_config(i)
    per = int(rng.integers(2, 4))
    labels = np.repeat(np.arange(k), per)
    f = l2_normalize(rng.normal(size=(len(labels), d)))
    head = rng.normal(size=(k, d))
    res = baseline_id_triplet(f, labels, head)

    def obj(x):
        r = baseline_id_triplet(x, labels, head)
        return r.id_loss + r.triplet_loss

    return max(grad_check(obj, f, res.grad_features),
               grad_check(lambda h: id_loss(f, labels, h)[0], head, res.grad_head))


def _check_encoder(i):
    rng = np.random.default_rng(20_000 + i)
    side, hidden, dim = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 7))
    p = enc.init_params(side * side * 3, hidden, dim, rng)
    p.b1[:] = rng.normal(scale=0.1, size=hidden)
    p.b2[:] = rng.normal(scale=0.1, size=dim)
    x = rng.uniform(size=(int(rng.integers(1, 4)), side, side, 3))
    gf = rng.normal(size=(len(x), dim))
    _, cache = enc.encode(p, x)
    g = enc.backward(cache, gf, p)
    worst = 0.0
    for name in enc.PARAM_NAMES:
        def obj(a, name=name):
            q = p.copy()
            setattr(q, name, a)
            return float(np.sum(enc.encode(q, x)[0] * gf))
        worst = max(worst, grad_check(obj, getattr(p, name), getattr(g, name)))
    return worst


GRAD_SUITE = {
    "PCL": _check_pcl,
    "HCL": _check_hcl,
    "WRCCL": _check_wrccl,
    "CCL": _check_ccl,
    "ID+triplet": _check_id_triplet,
    "encoder": _check_encoder,
}


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst = {name: max(fn(i) for i in range(CONFIGS)) for name, fn in GRAD_SUITE.items()}
    elapsed = time.perf_counter() - t0
    ok = all(v <= GRAD_TOL for v in worst.values()) and elapsed <= 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(capsys, ok, 1, f"{CONFIGS} configs each, max rel err {detail}; {elapsed:.1f}s (limit 60s)")
    assert ok


# ---------------------------------------------------------------------------
# 2, 3. oracles
# ---------------------------------------------------------------------------

def test_criterion_2_dbscan_oracle(capsys):
    matches = 0
    for seed in range(50):
        rng = np.random.default_rng(500 + seed)
        n = int(rng.integers(2, 201))
        dist = pairwise_distance(_blobs(rng, n))
        eps, min_pts = float(rng.uniform(0.01, 0.4)), int(rng.integers(1, 8))
        got = canonicalize(dbscan(dist, eps, min_pts).labels)
        matches += np.array_equal(got, canonicalize(brute_force_dbscan(dist, eps, min_pts)))
    report(capsys, matches == 50, 2, f"{matches}/50 DBSCAN instances equal the reachability oracle")
    assert matches == 50


def test_criterion_3_eval_oracle(capsys):
    matches = 0
    for seed in range(100):
        rng = np.random.default_rng(700 + seed)
        ng, nq = int(rng.integers(2, 51)), int(rng.integers(1, 8))
        protos = rng.normal(size=(int(rng.integers(2, 8)), 3))
        gf = protos[rng.integers(0, len(protos), ng)]
        qf = rng.normal(size=(nq, 3))
        g_ids = rng.integers(0, int(rng.integers(2, 6)), ng)
        q_ids = g_ids[rng.integers(0, ng, nq)]
        g_cams, q_cams = rng.integers(0, 3, ng), rng.integers(0, 3, nq)
        for i in range(nq):
            g_cams[int(np.flatnonzero(g_ids == q_ids[i])[0])] = (q_cams[i] + 1) % 3
        rep = evaluate_features(qf, gf, q_ids, g_ids, q_cams, g_cams, max_rank=ng)
        m, cmc, aps = brute_force_eval(qf, gf, q_ids, g_ids, q_cams, g_cams, ng)
        matches += bool(np.allclose(rep.ap, aps, rtol=0, atol=1e-15)
                        and abs(rep.mAP - m) <= 1e-15 and rep.cmc == cmc)
    report(capsys, matches == 100, 3, f"{matches}/100 mAP/CMC instances equal the brute-force oracle")
    assert matches == 100


# ---------------------------------------------------------------------------
# 4, 5. spot values and bank algebra
# ---------------------------------------------------------------------------

def test_criterion_4_loss_spot_values(capsys):
    bank = InstanceBank(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    h = float(hcl(np.array([1.0, 0.0]), bank, 0, tau=1.0)[0])
    h_err = abs(h - math.log(1 + math.exp(-1)))
    cb = ClusterBank(np.array([[1.0, 0.0], [0.0, 1.0]]), {0: 0, 1: 1})
    q = l2_normalize(np.array([1.0, 1.0]))
    w_err = max(abs(float(wrccl(q, cb, 0, w)[0]) - w * math.log(2)) for w in (0.25, 0.5, 1.0))
    c = l2_normalize(np.arange(1.0, 6.0))
    r = pcl(c, c, c)
    p_err = max(abs(float(r.loss_g)), abs(float(r.loss_p)))
    ok = h_err <= 1e-9 and w_err <= 1e-9 and p_err <= 1e-9
    report(capsys, ok, 4, f"HCL err {h_err:.1e}, WRCCL err {w_err:.1e}, PCL err {p_err:.1e} (tol 1e-9)")
    assert ok


def test_criterion_5_bank_algebra(capsys):
    blend = momentum_blend([1.0, 0.0], [0.0, 1.0], 0.1)
    row, qv = np.array([0.6, 0.8]), np.array([0.0, 1.0])
    ends = np.array_equal(momentum_blend(row, qv, 1.0), row) and np.array_equal(momentum_blend(row, qv, 0.0), qv)
    b = InstanceBank(np.array([[0.6, 0.8]]), np.array([0]))
    update_instance(b, 0, qv, 1.0)
    ends = ends and np.array_equal(b.rows[0], row)
    ok = blend.tolist() == [0.1, 0.9] and ends
    report(capsys, ok, 5, f"m=0.1 blend {blend.tolist()}, endpoints exact: {ends}")
    assert ok


# ---------------------------------------------------------------------------
# 6, 7, 8. desk-scale training
# ---------------------------------------------------------------------------

_runs: dict = {}


def _run(row: str, seed: int, telemetry=None, checkpoint=None):
    key = (row, seed)
    if key not in _runs or telemetry is not None:
        data = gen_synthetic(20, 20, 32, 32, seed=seed)
        cfg = TrainConfig(seed=seed, loss=ablation_config(row))
        t0 = time.perf_counter()
        state, _ = train(cfg, data.train, telemetry, checkpoint)
        elapsed = time.perf_counter() - t0
        base = evaluate(init_state(cfg, data.train.shape).params, data.query, data.gallery).mAP
        final = evaluate(state.params, data.query, data.gallery).mAP
        _runs[key] = {"base": base, "final": final, "seconds": elapsed}
    return _runs[key]


def test_criterion_6_desk_scale_learning(capsys, tmp_path):
    t0 = time.perf_counter()
    results = [_run("tcrl", s, tmp_path / f"tel{s}.csv", tmp_path / f"ck{s}.tcrl") for s in SEEDS_LEARN]
    elapsed = time.perf_counter() - t0
    gains = [r["final"] - r["base"] for r in results]
    mean_gain = float(np.mean(gains))
    ok = mean_gain >= MAP_GAIN and elapsed <= LEARN_BUDGET_S
    per_seed = "; ".join(f"seed {s}: {r['base']:.3f} -> {r['final']:.3f}" for s, r in zip(SEEDS_LEARN, results))
    report(capsys, ok, 6, f"mean mAP gain {mean_gain:.3f} (need >= {MAP_GAIN}) over {per_seed}; "
                          f"{elapsed:.0f}s (limit {LEARN_BUDGET_S:.0f}s)")
    assert ok


def test_criterion_7_ablation_trend(capsys):
    rows = ("tcrl", "ccl", "wrccl", "hcl", "pcl")
    means = {row: float(np.mean([_run(row, s)["final"] for s in SEEDS_ABLATE])) for row in rows}
    ok = means["tcrl"] >= means["ccl"]
    singles = sorted(("wrccl", "hcl", "pcl"), key=lambda r: -means[r])
    order = " > ".join(f"{r} {means[r]:.3f}" for r in singles)
    report(capsys, ok, 7, f"mean mAP over {len(SEEDS_ABLATE)} seeds: tcrl {means['tcrl']:.3f} vs "
                          f"ccl {means['ccl']:.3f}; single-loss ordering (recorded only): {order}")
    assert ok


def test_criterion_8_determinism(capsys, tmp_path):
    data = gen_synthetic(20, 20, 32, 32, seed=0)
    digests = []
    for run in ("a", "b"):
        state, _ = train(TrainConfig(seed=0), data.train, tmp_path / f"{run}.csv", tmp_path / f"{run}.tcrl")
        digests.append(hashlib.sha256((tmp_path / f"{run}.tcrl").read_bytes()).hexdigest())
    same_tel = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ok = same_tel and digests[0] == digests[1]
    report(capsys, ok, 8, f"telemetry identical: {same_tel}; checkpoint sha256 {digests[0][:16]} vs {digests[1][:16]}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcrl.clustering import (
    OUTLIER,
    ClusteringError,
    NoClusters,
    PseudoLabeling,
    canonicalize,
    dbscan,
    pairwise_distance,
    relabel_epoch,
    write_labels_csv,
)
from tcrl.numerics import l2_normalize


def brute_force_dbscan(dist, eps, min_pts):
    """Reference labels from reachability closure instead of queue expansion."""
    n = len(dist)
    adj = dist <= eps
    core = adj.sum(axis=1) >= min_pts
    # transitive closure over core-core edges (boolean Floyd-Warshall)
    reach = adj & core[:, None] & core[None, :]
    reach |= np.eye(n, dtype=bool) & core[:, None]
    for m in range(n):
        reach |= reach[:, m:m + 1] & reach[m:m + 1, :]
    comp_of = {}
    comps = []
    for i in range(n):
        if core[i] and i not in comp_of:
            members = [j for j in range(n) if reach[i, j]]
            for j in members:
                comp_of[j] = len(comps)
            comps.append(min(members))
    labels = np.full(n, OUTLIER)
    for i in range(n):
        if core[i]:
            labels[i] = comp_of[i]
        else:
            # border: the cluster with the smallest first-core index among core neighbours
            owners = {comp_of[j] for j in range(n) if adj[i, j] and core[j]}
            if owners:
                labels[i] = min(owners, key=lambda c: comps[c])
    return labels


def _blobs(rng, n, dim=4):
    centers = l2_normalize(rng.normal(size=(rng.integers(1, 6), dim)))
    pts = centers[rng.integers(0, len(centers), n)] + rng.normal(scale=rng.uniform(0.02, 0.3), size=(n, dim))
    return l2_normalize(pts)


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    dist = pairwise_distance(_blobs(rng, n))
    eps = float(rng.uniform(0.01, 0.4))
    min_pts = int(rng.integers(1, 8))
    got = dbscan(dist, eps, min_pts).labels
    assert np.array_equal(got, brute_force_dbscan(dist, eps, min_pts))


def test_identical_points_single_cluster():
    f = np.tile([[1.0, 0.0]], (6, 1))
    lab = dbscan(pairwise_distance(f), 0.1, 4)
    assert lab.num_clusters == 1 and lab.num_outliers == 0


def test_two_groups_and_isolate():
    f = l2_normalize(np.array([[1, 0.01], [1, 0], [1, -0.01], [0, 1], [0.01, 1], [-0.01, 1], [-1, -1]], float))
    lab = dbscan(pairwise_distance(f), 0.05, 2)
    assert lab.num_clusters == 2
    assert lab.labels.tolist() == [0, 0, 0, 1, 1, 1, OUTLIER]


def test_eps_covering_everything():
    rng = np.random.default_rng(0)
    d = pairwise_distance(l2_normalize(rng.normal(size=(15, 3))))
    lab = dbscan(d, 2.0, 1)
    assert lab.num_clusters == 1 and lab.num_outliers == 0


def test_border_point_joins_first_cluster():
    # index 0 borders group A (1..4) through 4 and group B (5..8) through 5
    d = np.full((9, 9), 1.0)
    d[1:5, 1:5] = 0.1
    d[5:9, 5:9] = 0.1
    d[0, 4] = d[4, 0] = 0.5
    d[0, 5] = d[5, 0] = 0.5
    np.fill_diagonal(d, 0.0)
    lab = dbscan(d, 0.5, 4)
    assert lab.labels.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]
    assert np.array_equal(lab.labels, brute_force_dbscan(d, 0.5, 4))


def test_bad_arguments():
    with pytest.raises(ClusteringError):
        dbscan(np.zeros((2, 3)), 0.1, 2)
    with pytest.raises(ClusteringError):
        dbscan(np.zeros((2, 2)), 0.0, 2)
    with pytest.raises(ClusteringError):
        dbscan(np.zeros((2, 2)), 0.1, 0)


def test_pairwise_distance_properties():
    rng = np.random.default_rng(1)
    f = l2_normalize(rng.normal(size=(30, 8)))
    d = pairwise_distance(f)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)
    assert d.min() >= 0 and d.max() <= 2
    assert d[0, 1] == pytest.approx(1 - f[0] @ f[1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.02, 0.5), st.integers(1, 6))
def test_every_inlier_within_eps_of_a_core_of_its_cluster(seed, eps, min_pts):
    rng = np.random.default_rng(seed)
    d = pairwise_distance(_blobs(rng, int(rng.integers(5, 60))))
    lab = dbscan(d, eps, min_pts).labels
    core = (d <= eps).sum(axis=1) >= min_pts
    for i in np.flatnonzero(lab != OUTLIER):
        same_core = core & (lab == lab[i])
        assert np.any(d[i, same_core] <= eps)
    # outliers are never within eps of any core
    for i in np.flatnonzero(lab == OUTLIER):
        assert not np.any(d[i, core] <= eps)
    # labels are contiguous 0..K-1
    k = lab.max() + 1
    assert set(lab[lab != OUTLIER]) == set(range(k))


def test_canonicalize():
    assert canonicalize([5, 5, -1, 2, 5, 2]).tolist() == [0, 0, -1, 1, 0, 1]


def test_relabel_epoch_all_outliers_raises():
    f = np.eye(5)
    with pytest.raises(NoClusters, match="larger eps"):
        relabel_epoch(f, 0.1, 2)


def test_relabel_epoch_composes():
    rng = np.random.default_rng(3)
    f = _blobs(rng, 40)
    a = relabel_epoch(f, 0.2, 3).labels
    b = dbscan(pairwise_distance(f), 0.2, 3).labels
    assert np.array_equal(a, b)


def test_labeling_helpers(tmp_path):
    lab = PseudoLabeling([0, -1, 1, 0])
    assert lab.num_clusters == 2 and lab.num_outliers == 1
    assert lab.inliers.tolist() == [0, 2, 3]
    assert [m.tolist() for m in lab.members] == [[0, 3], [2]]
    write_labels_csv(tmp_path / "l.csv", lab)
    assert (tmp_path / "l.csv").read_text().splitlines()[2] == "1,-1"

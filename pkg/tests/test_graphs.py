import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goodlab import graphs
from goodlab.graphs import Graph, TRAIN, VAL, TEST


def make_graph(num_nodes, edges, labels=None, num_classes=2, envs=None, split=None, features=None):
    labels = np.zeros(num_nodes, dtype=np.int64) if labels is None else np.asarray(labels)
    return Graph(
        num_nodes=num_nodes,
        num_classes=num_classes,
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        features=np.zeros((num_nodes, 2)) if features is None else features,
        labels=labels,
        envs=np.zeros(num_nodes, dtype=np.int64) if envs is None else np.asarray(envs),
        split=np.zeros(num_nodes, dtype=np.int64) if split is None else np.asarray(split),
    )


def random_er_graph(rng, n, p, num_classes=3):
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    return make_graph(n, edges, labels=rng.integers(0, num_classes, n), num_classes=num_classes)


def dense_hop_distances(graph):
    """Floyd-Warshall oracle over the unweighted graph."""
    n = graph.num_nodes
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for u, v in graph.edges:
        dist[u, v] = dist[v, u] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, k : k + 1] + dist[k : k + 1, :])
    return dist


class TestBuildNormalized:
    def test_single_isolated_node(self):
        adj = graphs.build_normalized(make_graph(1, np.empty((0, 2))))
        assert adj.bar_a.to_dense() == pytest.approx(np.array([[0.0]]))
        assert adj.tilde_a.to_dense() == pytest.approx(np.array([[1.0]]))
        assert adj.row_norm_a.to_dense() == pytest.approx(np.array([[0.0]]))

    def test_two_nodes_one_edge(self):
        adj = graphs.build_normalized(make_graph(2, [[0, 1]]))
        assert adj.tilde_a.to_dense() == pytest.approx(np.array([[0.5, 0.5], [0.5, 0.5]]))

    def test_k4_rows_sum_to_one(self):
        k4 = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]
        adj = graphs.build_normalized(make_graph(4, k4))
        assert adj.tilde_a.to_dense().sum(axis=1) == pytest.approx(np.ones(4))

    def test_bar_entries_formula(self):
        g = random_er_graph(np.random.default_rng(0), 12, 0.3)
        adj = graphs.build_normalized(g)
        deg = g.degrees()
        dense = adj.bar_a.to_dense()
        for u, v in g.edges:
            expect = 1.0 / np.sqrt((deg[u] + 1) * (deg[v] + 1))
            assert dense[u, v] == pytest.approx(expect)
            assert dense[v, u] == pytest.approx(expect)
        mask = np.zeros((g.num_nodes, g.num_nodes), dtype=bool)
        mask[g.edges[:, 0], g.edges[:, 1]] = True
        assert np.all(dense[~(mask | mask.T)] == 0.0)

    def test_row_norm_rows(self):
        g = make_graph(4, [[0, 1], [1, 2]])
        rn = graphs.build_normalized(g).row_norm_a.to_dense()
        sums = rn.sum(axis=1)
        assert sums[:3] == pytest.approx(np.ones(3))
        assert sums[3] == 0.0

    def test_edge_order_invariance(self):
        edges = [[0, 1], [1, 2], [0, 3]]
        a = graphs.build_normalized(make_graph(4, edges))
        b = graphs.build_normalized(make_graph(4, edges[::-1]))
        assert np.array_equal(a.tilde_a.data, b.tilde_a.data)
        assert np.array_equal(a.tilde_a.indices, b.tilde_a.indices)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        g = random_er_graph(rng, 15, 0.25)
        perm = rng.permutation(g.num_nodes)
        pedges = np.sort(perm[g.edges], axis=1)
        pg = make_graph(g.num_nodes, pedges, labels=np.zeros(g.num_nodes, dtype=np.int64))
        a = graphs.build_normalized(g).tilde_a.to_dense()
        b = graphs.build_normalized(pg).tilde_a.to_dense()
        assert b[np.ix_(perm, perm)] == pytest.approx(a)

    def test_masked_all_ones_bit_exact(self):
        g = random_er_graph(np.random.default_rng(5), 10, 0.3)
        a = graphs.build_normalized(g)
        b = graphs.normalized_from_edge_weights(g.num_nodes, g.edges, np.ones(g.edges.shape[0]))
        assert np.array_equal(a.tilde_a.data, b.tilde_a.data)


class TestBoundedShortestPaths:
    def test_path_graph(self):
        t = graphs.bounded_shortest_paths(make_graph(3, [[0, 1], [1, 2]]), 2)
        assert t.lookup([0], [2])[0] == 2
        assert t.lookup([0], [1])[0] == 1

    def test_disconnected_absent(self):
        t = graphs.bounded_shortest_paths(make_graph(4, [[0, 1], [2, 3]]), 5)
        assert t.lookup([0], [2])[0] == -1
        assert t.lookup([1], [3])[0] == -1

    def test_matches_floyd_warshall_er50(self):
        g = random_er_graph(np.random.default_rng(42), 50, 0.06)
        t = graphs.bounded_shortest_paths(g, 4)
        oracle = dense_hop_distances(g)
        got = np.full((50, 50), -1, dtype=np.int64)
        got[t.rows, t.cols] = t.dists
        got[t.cols, t.rows] = t.dists
        iu, ju = np.triu_indices(50, k=1)
        within = oracle[iu, ju] <= 4
        assert np.array_equal(got[iu[within], ju[within]], oracle[iu, ju][within].astype(np.int64))
        assert np.all(got[iu[~within], ju[~within]] == -1)

    def test_symmetry_and_bounds(self):
        g = random_er_graph(np.random.default_rng(7), 30, 0.1)
        t = graphs.bounded_shortest_paths(g, 3)
        assert np.all(t.dists >= 1)
        assert np.all(t.dists <= 3)
        assert np.all(t.rows < t.cols)
        assert np.array_equal(t.lookup(t.rows, t.cols), t.lookup(t.cols, t.rows))

    def test_rejects_zero_hops(self):
        with pytest.raises(ValueError):
            graphs.bounded_shortest_paths(make_graph(2, [[0, 1]]), 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 100))
    def test_property_matches_unbounded_bfs(self, seed, n):
        g = random_er_graph(np.random.default_rng(seed), n, 3.0 / n)
        t = graphs.bounded_shortest_paths(g, max_hops=4)
        oracle = dense_hop_distances(g)
        if t.num_pairs:
            assert np.all(oracle[t.rows, t.cols] == t.dists)
        beyond = graphs.bounded_shortest_paths(g, max_hops=n)
        finite = np.isfinite(oracle) & ~np.eye(n, dtype=bool)
        assert beyond.num_pairs * 2 == finite.sum()


class TestNeighborhoodProfile:
    def test_isolated_zero_row(self):
        g = make_graph(3, [[0, 1]], labels=[0, 1, 1])
        prof = graphs.neighborhood_label_distribution(g, graphs.build_normalized(g), 3)
        assert prof.ratios[2] == pytest.approx(np.array([0.0, 0.0]))

    def test_two_adjacent_same_class_dense_oracle(self):
        g = make_graph(2, [[0, 1]], labels=[0, 0])
        adj = graphs.build_normalized(g)
        prof = graphs.neighborhood_label_distribution(g, adj, 1)
        assert prof.ratios == pytest.approx(np.array([[1, 0], [1, 0]]))
        dense = np.linalg.matrix_power(adj.row_norm_a.to_dense(), 1) @ graphs.one_hot(g.labels, 2)
        assert prof.ratios == pytest.approx(dense)

    def test_star_graph(self):
        g = make_graph(4, [[0, 1], [0, 2], [0, 3]], labels=[0, 1, 1, 1])
        prof = graphs.neighborhood_label_distribution(g, graphs.build_normalized(g), 1)
        assert prof.ratios[0] == pytest.approx(np.array([0.0, 1.0]))
        for leaf in (1, 2, 3):
            assert prof.ratios[leaf] == pytest.approx(np.array([1.0, 0.0]))

    def test_matches_dense_power_oracle(self):
        rng = np.random.default_rng(11)
        g = random_er_graph(rng, 20, 0.2, num_classes=3)
        adj = graphs.build_normalized(g)
        for depth in (1, 2, 3):
            prof = graphs.neighborhood_label_distribution(g, adj, depth)
            dense = np.linalg.matrix_power(adj.row_norm_a.to_dense(), depth) @ graphs.one_hot(
                g.labels, 3)
            assert prof.ratios == pytest.approx(dense, abs=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_property_row_sums(self, seed):
        rng = np.random.default_rng(seed)
        g = random_er_graph(rng, 25, 0.15, num_classes=3)
        adj = graphs.build_normalized(g)
        prof = graphs.neighborhood_label_distribution(g, adj, 2)
        sums = prof.ratios.sum(axis=1)
        assert np.all(sums >= -1e-12) and np.all(sums <= 1 + 1e-12)
        reach = np.linalg.matrix_power(adj.row_norm_a.to_dense(), 2).sum(axis=1)
        assert sums == pytest.approx(reach, abs=1e-12)
        if np.all(g.degrees() > 0):
            assert sums == pytest.approx(np.ones(25))


class TestRatioDiscrepancies:
    def test_identical_rows(self):
        g = make_graph(2, [[0, 1]], labels=[0, 0])
        prof = graphs.neighborhood_label_distribution(g, graphs.build_normalized(g), 1)
        assert graphs.ratio_discrepancies(prof, g.labels, 0, 1, 0) == (0.0, 0.0)

    def test_hand_values(self):
        prof = graphs.NeighborhoodProfile(
            ratios=np.array([[0.5, 0.3, 0.2], [0.5, 0.1, 0.4]]), depth=1)
        r_same, r_diff = graphs.ratio_discrepancies(prof, np.array([0, 0]), 0, 1, 0)
        assert r_same == pytest.approx(0.0)
        assert r_diff == pytest.approx(0.4)

    def test_class_mismatch_raises(self):
        prof = graphs.NeighborhoodProfile(ratios=np.zeros((2, 2)), depth=1)
        with pytest.raises(ValueError):
            graphs.ratio_discrepancies(prof, np.array([0, 1]), 0, 1, 0)

    def test_matches_recount_oracle(self):
        rng = np.random.default_rng(23)
        g = random_er_graph(rng, 10, 0.4, num_classes=3)
        adj = graphs.build_normalized(g)
        prof = graphs.neighborhood_label_distribution(g, adj, 1)
        deg = g.degrees()
        neigh = [[] for _ in range(10)]
        for u, v in g.edges:
            neigh[u].append(v)
            neigh[v].append(u)
        same_class = [(i, j) for i in range(10) for j in range(10)
                      if i < j and g.labels[i] == g.labels[j] and deg[i] and deg[j]]
        for i, j in same_class:
            c = int(g.labels[i])
            counts_i = np.bincount(g.labels[neigh[i]], minlength=3) / deg[i]
            counts_j = np.bincount(g.labels[neigh[j]], minlength=3) / deg[j]
            r_same, r_diff = graphs.ratio_discrepancies(prof, g.labels, i, j, c)
            assert r_same == pytest.approx(abs(counts_i[c] - counts_j[c]))
            expect_diff = sum(abs(counts_i[k] - counts_j[k]) for k in range(3) if k != c)
            assert r_diff == pytest.approx(expect_diff)


class TestGraphValidation:
    def test_rejects_self_loop(self):
        with pytest.raises(ValueError, match="self-loop"):
            make_graph(2, [[1, 1]])

    def test_rejects_duplicate_edge(self):
        with pytest.raises(ValueError, match="duplicate"):
            make_graph(3, [[0, 1], [0, 1]])

    def test_rejects_bad_endpoint(self):
        with pytest.raises(ValueError, match="out of range"):
            make_graph(2, [[0, 5]])

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError, match="label"):
            make_graph(2, [[0, 1]], labels=[0, 7])

    def test_rejects_feature_row_mismatch(self):
        with pytest.raises(ValueError, match="features"):
            make_graph(3, [[0, 1]], features=np.zeros((2, 2)))


class TestDatasetDirectory:
    def test_roundtrip_and_determinism(self, tmp_path):
        rng = np.random.default_rng(9)
        g = random_er_graph(rng, 12, 0.3, num_classes=4)
        g = Graph(num_nodes=12, num_classes=4, edges=g.edges,
                  features=rng.standard_normal((12, 3)), labels=g.labels,
                  envs=rng.integers(-1, 3, 12), split=rng.integers(0, 3, 12))
        d1, d2 = tmp_path / "a", tmp_path / "b"
        graphs.save_dataset(g, str(d1))
        graphs.save_dataset(g, str(d2))
        for name in ["meta.json", "edges.tsv", "features.tsv", "labels.tsv", "envs.tsv", "splits.tsv"]:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
        back = graphs.load_dataset(str(d1))
        assert np.array_equal(back.edges, g.edges)
        assert np.array_equal(back.features, g.features)
        assert np.array_equal(back.labels, g.labels)
        assert np.array_equal(back.envs, g.envs)
        assert np.array_equal(back.split, g.split)

    def test_split_tokens(self, tmp_path):
        g = make_graph(3, [[0, 1]], split=[TRAIN, VAL, TEST])
        graphs.save_dataset(g, str(tmp_path))
        text = (tmp_path / "splits.tsv").read_text().split()
        assert text == ["train", "val", "test"]

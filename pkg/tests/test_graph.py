import logging

import numpy as np
import pytest

from gtnrec.errors import FormatError, ParseError, RangeError, TooSmallError
from gtnrec.graph import (
    RatingRecord,
    SplitSet,
    TrustRecord,
    build_graph,
    dataset_stats,
    init_features,
    load_ratings,
    load_trust,
    normalize_adjacency,
    renormalize,
    split,
    subsample_users,
    write_ratings,
    write_trust,
)
from gtnrec.sparse import SparseMatrix

from conftest import random_symmetric_adjacency, toy_ratings, toy_trust


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadRatings:
    def test_parses_rows(self, tmp_path):
        p = write(tmp_path / "r.csv", "user,item,rating\nu1,i1,5\nu2,i1,3.5\n")
        assert load_ratings(p) == [RatingRecord("u1", "i1", 5.0), RatingRecord("u2", "i1", 3.5)]

    def test_header_only_is_empty(self, tmp_path):
        assert load_ratings(write(tmp_path / "r.csv", "user,item,rating\n")) == []

    def test_duplicates_keep_last_value_and_warn_once(self, tmp_path, caplog):
        p = write(tmp_path / "r.csv", "user,item,rating\nu1,i1,5\nu2,i2,1\nu1,i1,2\nu1,i1,3\n")
        with caplog.at_level(logging.WARNING):
            out = load_ratings(p)
        assert out == [RatingRecord("u1", "i1", 3.0), RatingRecord("u2", "i2", 1.0)]
        assert len(caplog.records) == 1 and "2 duplicate" in caplog.text

    def test_malformed_row_reports_line(self, tmp_path):
        p = write(tmp_path / "r.csv", "user,item,rating\nu1,i1,5\nu2,i2\n")
        with pytest.raises(ParseError, match=r"r\.csv:3"):
            load_ratings(p)

    def test_non_numeric_rating(self, tmp_path):
        p = write(tmp_path / "r.csv", "user,item,rating\nu1,i1,five\n")
        with pytest.raises(ParseError, match=":2"):
            load_ratings(p)

    @pytest.mark.parametrize("value", ["0", "5.5", "-1"])
    def test_out_of_range(self, tmp_path, value):
        p = write(tmp_path / "r.csv", f"user,item,rating\nu1,i1,{value}\n")
        with pytest.raises(RangeError):
            load_ratings(p)

    def test_wrong_header(self, tmp_path):
        with pytest.raises(ParseError, match=":1"):
            load_ratings(write(tmp_path / "r.csv", "a,b,c\n"))


class TestLoadTrust:
    def test_parses(self, tmp_path):
        p = write(tmp_path / "t.csv", "trustor,trustee\na,b\nb,a\n")
        assert load_trust(p) == [TrustRecord("a", "b"), TrustRecord("b", "a")]

    def test_single_self_edge_dropped_with_one_warning(self, tmp_path, caplog):
        p = write(tmp_path / "t.csv", "trustor,trustee\na,a\n")
        with caplog.at_level(logging.WARNING):
            assert load_trust(p) == []
        assert len(caplog.records) == 1

    def test_malformed(self, tmp_path):
        with pytest.raises(ParseError, match=":2"):
            load_trust(write(tmp_path / "t.csv", "trustor,trustee\na,b,c\n"))

    def test_round_trip_writers(self, tmp_path, rng):
        ratings, trust = toy_ratings(rng, 5, 5, 8), toy_trust(rng, 5, 4)
        write_ratings(tmp_path / "r.csv", ratings)
        write_trust(tmp_path / "t.csv", trust)
        assert load_ratings(tmp_path / "r.csv") == ratings
        assert load_trust(tmp_path / "t.csv") == trust


class TestBuildGraph:
    def test_smallest_graph(self):
        g = build_graph([RatingRecord("u", "i", 5.0)], [], 4, 0)
        assert (g.n_users, g.n_items, g.n_nodes) == (1, 1, 2)
        np.testing.assert_array_equal(g.adjacency.to_dense(), [[0, 1], [1, 0]])

    def test_trust_only(self):
        g = build_graph([], [TrustRecord("a", "b"), TrustRecord("b", "a")], 4, 0)
        assert g.n_nodes == 2
        np.testing.assert_array_equal(g.adjacency.to_dense(), [[0, 1], [1, 0]])

    def test_unknown_trust_user_still_becomes_node(self):
        g = build_graph([RatingRecord("u", "i", 4.0)], [TrustRecord("u", "ghost")], 2, 0)
        assert g.n_users == 2 and g.user_node("ghost") == 1
        assert g.item_node("i") == 2
        assert g.degrees[g.user_node("ghost")] == 1

    def test_universe_adds_nodes_without_edges(self):
        train = [RatingRecord("u", "i", 4.0)]
        held_out = [RatingRecord("v", "j", 2.0)]
        g = build_graph(train, [], 2, 0, universe=train + held_out)
        assert g.n_nodes == 4
        assert g.is_cold([g.user_node("v"), g.item_node("j")]).all()
        assert not g.is_cold([g.user_node("u")]).any()

    def test_nnz_counts_rating_and_deduplicated_trust_pairs(self, rng):
        ratings = toy_ratings(rng, 20, 30, 120)
        trust = toy_trust(rng, 20, 60)
        g = build_graph(ratings, trust, 4, 0)
        trust_pairs = {frozenset((t.trustor, t.trustee)) for t in trust}
        assert g.adjacency.nnz == 2 * len(ratings) + 2 * len(trust_pairs)

    def test_symmetric_zero_diagonal_and_degrees(self, rng):
        g = build_graph(toy_ratings(rng, 10, 12, 40), toy_trust(rng, 10, 15), 3, 0)
        dense = g.adjacency.to_dense()
        np.testing.assert_array_equal(dense, dense.T)
        assert np.all(np.diag(dense) == 0)
        assert set(np.unique(dense)) <= {0.0, 1.0}
        np.testing.assert_array_equal(g.degrees, dense.sum(axis=1))
        assert g.features.shape == (g.n_nodes, 3)

    def test_ids_stable_across_runs(self, rng):
        ratings, trust = toy_ratings(rng, 10, 12, 40), toy_trust(rng, 10, 15)
        a, b = build_graph(ratings, trust, 3, 1), build_graph(ratings, trust, 3, 1)
        assert a.user_ids == b.user_ids and a.item_ids == b.item_ids
        np.testing.assert_array_equal(a.features.data, b.features.data)


def dense_renormalized(a):
    a_hat = a + np.eye(len(a))
    d = a_hat.sum(axis=1)
    return a_hat / np.sqrt(np.outer(d, d))


class TestNormalizeAdjacency:
    def test_edgeless_is_identity(self):
        g = build_graph([], [], 2, 0)
        g2 = build_graph([], [TrustRecord("a", "b")], 2, 0)
        empty = SparseMatrix((2, 2), [0, 0, 0], [], [])
        np.testing.assert_array_equal(renormalize(empty).to_dense(), np.eye(2))
        assert g.n_nodes == 0 and g2.n_nodes == 2

    def test_single_edge(self):
        g = build_graph([RatingRecord("u", "i", 3.0)], [], 2, 0)
        np.testing.assert_allclose(normalize_adjacency(g).to_dense(), np.full((2, 2), 0.5), atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = random_symmetric_adjacency(rng, int(rng.integers(1, 51)), p=rng.uniform(0, 0.4))
        got = renormalize(SparseMatrix.from_dense(a)).to_dense()
        np.testing.assert_allclose(got, dense_renormalized(a), rtol=0, atol=1e-12)

    def test_symmetric_with_nonempty_rows_but_not_stochastic(self, rng):
        g = build_graph(toy_ratings(rng, 15, 15, 60), toy_trust(rng, 15, 20), 2, 0)
        a_hat = normalize_adjacency(g)
        dense = a_hat.to_dense()
        np.testing.assert_allclose(dense, dense.T, atol=1e-12)
        assert a_hat.empty_rows().size == 0
        assert np.all(np.diag(dense) > 0)
        assert not np.allclose(dense.sum(axis=1), 1.0)


class TestInitFeatures:
    def test_shape(self):
        g = build_graph([RatingRecord("u", "i", 3.0), RatingRecord("v", "i", 3.0)], [], 1, 0)
        assert init_features(g, 4, 0).shape == (3, 4)

    def test_deterministic(self):
        g = build_graph([RatingRecord("u", "i", 3.0)], [], 1, 0)
        np.testing.assert_array_equal(init_features(g, 5, 7).data, init_features(g, 5, 7).data)

    def test_gaussian_statistics(self):
        ratings = [RatingRecord(f"u{k}", f"i{k}", 3.0) for k in range(5000)]
        x = init_features(build_graph(ratings, [], 1, 0), 10, 3).data
        assert x.size == 100_000
        assert abs(x.mean()) < 0.01
        assert abs(x.std() - 0.1) < 0.01

    def test_is_a_parameter(self):
        g = build_graph([RatingRecord("u", "i", 3.0)], [], 1, 0)
        assert init_features(g, 2, 0).requires_grad


class TestSplit:
    def test_sizes(self, rng):
        s = split(toy_ratings(rng, 5, 5, 10), 0)
        assert (len(s.train), len(s.val), len(s.test)) == (6, 2, 2)

    @pytest.mark.parametrize("n", [5, 7, 13, 101])
    def test_partition(self, rng, n):
        s = split(toy_ratings(rng, 20, 20, n), 4)
        assert len(s.train) == int(0.6 * n) and len(s.val) == int(0.2 * n)
        everything = s.train + s.val + s.test
        assert sorted(everything) == list(range(n))

    def test_deterministic(self, rng):
        r = toy_ratings(rng, 9, 9, 30)
        assert split(r, 3) == split(r, 3)

    def test_seed_changes_train(self, rng):
        r = toy_ratings(rng, 100, 100, 1000)
        assert split(r, 1).train != split(r, 2).train

    def test_too_small(self, rng):
        with pytest.raises(TooSmallError):
            split(toy_ratings(rng, 3, 3, 4), 0)

    def test_json_round_trip(self, tmp_path, rng):
        s = split(toy_ratings(rng, 9, 9, 30), 3)
        s.save(tmp_path / "splits.json")
        back = SplitSet.load(tmp_path / "splits.json")
        assert back == s and back.digest() == s.digest()

    def test_rejects_foreign_json(self, tmp_path):
        (tmp_path / "x.json").write_text('{"train": []}')
        with pytest.raises(FormatError):
            SplitSet.load(tmp_path / "x.json")


class TestStats:
    def test_table_style_fields(self):
        ratings = [RatingRecord("a", "x", 4.0), RatingRecord("b", "x", 2.0), RatingRecord("a", "y", 3.0)]
        s = dataset_stats(ratings, [TrustRecord("a", "b")])
        assert s["users"] == 2 and s["items"] == 2 and s["ratings"] == 3 and s["connections"] == 1
        assert s["rating_density"] == pytest.approx(0.75)
        assert s["social_density"] == pytest.approx(0.25)
        assert s["mean_rating"] == pytest.approx(3.0)

    def test_subsample_keeps_induced_trust(self, rng):
        ratings, trust = toy_ratings(rng, 40, 40, 300), toy_trust(rng, 40, 80)
        sub_r, sub_t = subsample_users(ratings, trust, 0.25, seed=0)
        users = {r.user for r in sub_r}
        assert len(users) == 10
        assert all(t.trustor in users and t.trustee in users for t in sub_t)
        assert subsample_users(ratings, trust, 0.25, seed=0) == (sub_r, sub_t)

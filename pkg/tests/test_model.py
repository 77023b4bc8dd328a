import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from treeprune.io import ensemble_to_dict
from treeprune.model import (Ensemble, Example, Leaf, ModelError, Split, Tree, evaluate_tree,
                             predict_label, predict_margin, predict_proba, prune, random_ensemble,
                             sigmoid)

from oracles import descend, margin

STUMP = Tree((Split(0, 0.5, 1, 2), Leaf(1.0), Leaf(-1.0)))


def const(v):
    return Tree((Leaf(v),))


class TestTreeValidation:
    def test_children_must_differ(self):
        with pytest.raises(ModelError, match="distinct"):
            Tree((Split(0, 0.5, 1, 1), Leaf(1.0)))

    def test_child_out_of_range(self):
        with pytest.raises(ModelError, match="out of range"):
            Tree((Split(0, 0.5, 1, 5), Leaf(1.0)))

    def test_shared_child_rejected(self):
        nodes = (Split(0, 0.5, 1, 2), Split(1, 0.5, 3, 4), Split(1, 0.2, 3, 4),
                 Leaf(0.0), Leaf(1.0))
        with pytest.raises(ModelError, match="parent"):
            Tree(nodes)

    def test_unreachable_node_rejected(self):
        with pytest.raises(ModelError, match="unreachable"):
            Tree((Leaf(0.0), Leaf(1.0)))

    def test_non_finite_threshold(self):
        with pytest.raises(ModelError, match="threshold"):
            Tree((Split(0, math.nan, 1, 2), Leaf(1.0), Leaf(-1.0)))

    def test_split_feature_beyond_d(self):
        with pytest.raises(ModelError, match="num_features"):
            Ensemble((Tree((Split(3, 0.5, 1, 2), Leaf(1.0), Leaf(-1.0))),), 3)

    def test_example_rejects_nan(self):
        with pytest.raises(ModelError):
            Example((0.0, math.nan))


class TestEvaluation:
    def test_single_leaf(self):
        assert evaluate_tree(const(0.7), (0.1, 0.2)) == 0.7

    def test_threshold_goes_right(self):
        assert evaluate_tree(STUMP, (0.5,)) == -1.0
        assert evaluate_tree(STUMP, (math.nextafter(0.5, 0),)) == 1.0

    def test_matches_recursive_descent(self):
        rng = random.Random(11)
        e = random_ensemble(1, 3, 5, seed=4)
        for _ in range(100):
            x = [rng.uniform(-0.2, 1.2) for _ in range(5)]
            assert evaluate_tree(e.trees[0], x) == descend(e.trees[0], x)

    def test_cancellation(self):
        e = Ensemble((const(0.3), const(-0.3)), 1)
        assert predict_margin(e, (0.0,)) == 0.0

    def test_probability_view(self):
        e = Ensemble((const(0.7),), 1)
        assert predict_margin(e, (0.0,)) == 0.7
        assert predict_proba(e, (0.0,)) == pytest.approx(0.668187772, abs=1e-9)

    def test_bias_only(self):
        assert predict_margin(Ensemble((), 2, 1.5), (0.0, 0.0)) == 1.5

    def test_dimension_mismatch(self):
        with pytest.raises(ModelError, match="features"):
            predict_margin(Ensemble((STUMP,), 2), (0.1,))

    def test_label_tie_goes_positive(self):
        assert predict_label(Ensemble((), 1, 0.0), (0.0,)) == 1
        assert predict_label(Ensemble((), 1, -2.0), (0.0,)) == -1

    def test_label_agrees_with_margin(self):
        rng = random.Random(2)
        e = random_ensemble(10, 3, 6, seed=9)
        for _ in range(1000):
            x = [rng.random() for _ in range(6)]
            m = margin(e, x)
            assert predict_margin(e, x) == pytest.approx(m, abs=1e-12)
            assert predict_label(e, x) == (1 if predict_margin(e, x) >= 0 else -1)

    @given(st.floats(-700, 700))
    def test_sigmoid_symmetry(self, z):
        assert sigmoid(z) + sigmoid(-z) == pytest.approx(1.0, abs=1e-12)


class TestRandomEnsemble:
    def test_depth_zero_is_single_leaf(self):
        e = random_ensemble(1, 0, 4, seed=7)
        assert len(e.trees[0].nodes) == 1 and isinstance(e.trees[0].nodes[0], Leaf)

    def test_seed_determinism(self):
        a = json.dumps(ensemble_to_dict(random_ensemble(5, 3, 10, seed=3)))
        b = json.dumps(ensemble_to_dict(random_ensemble(5, 3, 10, seed=3)))
        assert a == b

    def test_feature_indices_in_range(self):
        e = random_ensemble(50, 6, 100, seed=42)
        assert max(e.split_features) < 100

    def test_feature_restriction(self):
        e = random_ensemble(10, 4, 50, seed=1, features=[3, 9])
        assert e.split_features <= {3, 9}


def fig2_tree():
    # Height is feature 0, Age is feature 1
    return Tree((
        Split(0, 200.0, 1, 4),
        Split(0, 150.0, 2, 3), Leaf(-1.0), Leaf(-0.5),        # subtree (a)
        Split(1, 50.0, 5, 6), Leaf(0.25),                      # Age node, subtree (b)
        Split(0, 220.0, 7, 8), Leaf(0.5), Leaf(1.0),           # subtree (c)
    ))


class TestPrune:
    def test_height_age_example(self):
        e = Ensemble((fig2_tree(),), 2)
        pruned = prune(e, (180.0, 55.0), {0}).trees[0]
        assert pruned.nodes[pruned.root].feature == 0
        assert all(not (isinstance(n, Split) and n.feature == 1) for n in pruned.nodes)
        assert 0.25 not in [n.value for n in pruned.nodes if isinstance(n, Leaf)]
        assert sorted(n.value for n in pruned.nodes if isinstance(n, Leaf)) == [-1.0, -0.5, 0.5, 1.0]
        # inputs that keep Age at 55 see the same model
        for height in (100.0, 160.0, 210.0, 230.0):
            z = (height, 55.0)
            assert predict_margin(Ensemble((pruned,), 2), z) == predict_margin(e, z)

    def test_all_features_is_identity(self):
        e = random_ensemble(5, 4, 8, seed=5)
        assert prune(e, [0.5] * 8, range(8)) == e

    def test_empty_subset_collapses(self):
        e = random_ensemble(5, 4, 8, seed=5)
        p = prune(e, [0.3] * 8, ())
        assert len(p.trees) == 5
        assert all(t.num_nodes == 1 for t in p.trees)

    def test_input_unchanged(self):
        e = random_ensemble(5, 4, 8, seed=5)
        before = json.dumps(ensemble_to_dict(e))
        prune(e, [0.3] * 8, (1, 2))
        assert json.dumps(ensemble_to_dict(e)) == before

    def test_agreement_on_fixed_complement(self):
        rng = random.Random(0)
        e = random_ensemble(5, 4, 8, seed=21)
        x = [rng.random() for _ in range(8)]
        keep = rng.sample(range(8), 3)
        p = prune(e, x, keep)
        for _ in range(200):
            z = list(x)
            for f in keep:
                z[f] = rng.random()
            assert predict_margin(p, z) == predict_margin(e, z)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), data=st.data())
    def test_identity_at_x_and_size(self, seed, data):
        d = 6
        e = random_ensemble(4, 3, d, seed=seed)
        x = data.draw(st.lists(st.floats(0, 1), min_size=d, max_size=d))
        keep = data.draw(st.sets(st.integers(0, d - 1)))
        p = prune(e, x, keep)
        assert predict_margin(p, x) == predict_margin(e, x)
        assert p.num_nodes <= e.num_nodes
        assert p.split_features <= keep

    def test_rejects_bad_feature(self):
        with pytest.raises(ModelError):
            prune(random_ensemble(1, 2, 3), [0.0] * 3, {5})

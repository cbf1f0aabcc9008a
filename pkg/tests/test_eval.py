"""Retrieval metrics against brute-force oracles, plus report structure."""

import numpy as np
import pytest

from musenet import evaluate as E
from musenet import model as M
from musenet import weather as W
from musenet.dataset import Task
from musenet.errors import InputError, UsageError


def brute_recall_at_k(ranking, relevant, k):
    return 1.0 if set(int(i) for i in ranking[:k]) & relevant else 0.0


def brute_average_precision(ranking, relevant):
    """Explicit PR-curve construction; step areas summed without interpolation."""
    n_rel = len(relevant)
    precisions, recalls, hits = [], [], 0
    for t, idx in enumerate(ranking, start=1):
        hits += int(idx) in relevant
        precisions.append(hits / t)
        recalls.append(hits / n_rel)
    step_precisions = []
    prev = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev:  # the curve steps up exactly at hit ranks
            step_precisions.append(p)
            prev = r
    return float(np.sum(step_precisions) / n_rel)


class TestRank:
    def test_query_in_gallery_ranks_first(self):
        gallery = np.array([[3.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
        order = E.rank(np.array([1.0, 1.0]), gallery)
        assert order[0] == 1

    def test_scalar_distances(self):
        gallery = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
        order = E.rank(np.array([0.0, 0.0]), gallery)
        np.testing.assert_array_equal(order, [0, 1, 2])

    def test_tie_breaks_to_lower_index(self):
        gallery = np.array([[0.0, 2.0], [2.0, 0.0], [1.0, 0.0]])
        order = E.rank(np.array([0.0, 0.0]), gallery)
        np.testing.assert_array_equal(order, [2, 0, 1])

    def test_dim_mismatch_rejected(self):
        with pytest.raises(InputError):
            E.rank(np.zeros(3), np.zeros((4, 2)))

    def test_invariant_under_uniform_scaling(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal(8)
        g = rng.standard_normal((20, 8))
        np.testing.assert_array_equal(E.rank(q, g), E.rank(q * 7.5, g * 7.5))


class TestRecallAtK:
    def test_hit_at_rank_one(self):
        assert E.recall_at_k(np.array([4, 1, 2]), {4}, 1) == 1.0

    def test_hit_at_rank_three(self):
        ranking = np.array([5, 1, 4, 2])
        assert E.recall_at_k(ranking, {4}, 1) == 0.0
        assert E.recall_at_k(ranking, {4}, 5) == 1.0

    def test_full_gallery_always_hits(self):
        ranking = np.arange(10)
        assert E.recall_at_k(ranking, {7}, 10) == 1.0

    def test_empty_relevant_rejected(self):
        with pytest.raises(UsageError):
            E.recall_at_k(np.arange(3), set(), 1)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            g = int(rng.integers(2, 12))
            ranking = rng.permutation(g)
            relevant = {int(i) for i in rng.choice(g, size=rng.integers(1, 4), replace=False)}
            values = [E.recall_at_k(ranking, relevant, k) for k in range(1, g + 1)]
            assert values == sorted(values)


class TestAveragePrecision:
    def test_single_relevant_at_rank_three(self):
        assert E.average_precision(np.array([9, 8, 4, 7]), {4}) == 1.0 / 3.0

    def test_two_relevant_at_ranks_one_and_three(self):
        assert E.average_precision(np.array([4, 8, 9, 7]), {4, 9}) == (1.0 + 2.0 / 3.0) / 2.0

    def test_all_relevant_first_is_one(self):
        assert E.average_precision(np.array([2, 0, 1, 5]), {2, 0, 1}) == 1.0

    def test_single_gt_is_exactly_reciprocal_rank(self):
        for r in range(1, 13):
            ranking = np.arange(12)
            assert E.average_precision(ranking, {r - 1}) == 1.0 / r


class TestOracleEquivalence:
    def test_thousand_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            g = int(rng.integers(1, 13))
            ranking = rng.permutation(g)
            n_rel = int(rng.integers(1, min(4, g) + 1))
            relevant = {int(i) for i in rng.choice(g, size=n_rel, replace=False)}
            for k in (1, 5, 10):
                assert E.recall_at_k(ranking, relevant, k) == brute_recall_at_k(ranking, relevant, k)
            assert E.average_precision(ranking, relevant) == brute_average_precision(ranking, relevant)


@pytest.fixture(scope="module")
def model():
    config = M.ModelConfig(input_size=32, stem_channels=4,
                           stage_channels=(8, 12, 16, 24),
                           num_identities=8)
    return M.build_model(config, np.random.default_rng(0))


class TestEvaluate:

    def test_report_structure(self, model, small_dataset):
        report = E.evaluate(model, small_dataset, list(W.StyleKind) + [W.UNSEEN_COMPOSITE],
                            [Task.DRONE_TO_SAT])
        assert len(report.rows) == 11
        assert "d2s" in report.means
        tokens = [token for _, token, _ in report.rows]
        assert W.UNSEEN_COMPOSITE in tokens

    def test_mean_requires_all_seen_conditions(self, model, small_dataset):
        report = E.evaluate(model, small_dataset, [W.StyleKind.FOG], [Task.DRONE_TO_SAT])
        assert report.means == {}

    def test_metrics_are_reproducible(self, model, small_dataset):
        a = E.evaluate(model, small_dataset, [W.StyleKind.DARK], [Task.DRONE_TO_SAT])
        b = E.evaluate(model, small_dataset, [W.StyleKind.DARK], [Task.DRONE_TO_SAT])
        assert a.rows[0][2] == b.rows[0][2]

    def test_unknown_condition_rejected(self, model, small_dataset):
        with pytest.raises(UsageError):
            E.evaluate(model, small_dataset, ["blizzard"], [Task.DRONE_TO_SAT])

    def test_csv_layout(self, model, small_dataset, tmp_path):
        report = E.evaluate(model, small_dataset, [W.StyleKind.NORMAL, W.StyleKind.WIND],
                            [Task.DRONE_TO_SAT, Task.SAT_TO_DRONE])
        path = tmp_path / "report.csv"
        E.report_to_csv(report, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "condition,task,r1,r5,r10,ap,num_queries"
        assert len(lines) == 1 + 4  # two conditions x two tasks, no mean rows
        assert all(len(line.split(",")) == 7 for line in lines[1:])

    def test_monotone_recall_in_report(self, model, small_dataset):
        report = E.evaluate(model, small_dataset, [W.StyleKind.SNOW], [Task.SAT_TO_DRONE])
        m = report.rows[0][2]
        assert m.recall_at[1] <= m.recall_at[5] <= m.recall_at[10]

    def test_style_accuracy_runs(self, model, small_dataset):
        acc = E.style_accuracy(model, small_dataset)
        assert 0.0 <= acc <= 1.0

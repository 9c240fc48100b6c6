"""Tests for sign-recovery accuracy and fold aggregation."""

import json
import os
import sys
import unittest

import numpy as np

# Add the parent directory to Python path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.base_models import UndefinedMetricError, UsageError
from services.evalmetrics import (
    METRIC_NOTE, FoldScore, aggregate, chain_sign_matches, direct_edge_accuracy, format_pct, render_table,
    transitive_chain_accuracy, try_transitive_chain_accuracy,
)

CHAIN = np.array([[0, 1, 0], [0, 0, -1], [0, 0, 0]], dtype=float)


def brute_force_chains(w, a):
    correct = total = 0
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if a[i, j] != 0 and a[j, k] != 0:
                    total += 1
                    correct += np.sign(a[i, j] * a[j, k]) == np.sign(w[i, j] * w[j, k])
    return int(correct), total


class TestDirectEdgeAccuracy(unittest.TestCase):
    def test_counts_matching_signs(self):
        w = np.array([[0, 0.5, 0], [0, 0, 0.3], [0, 0, 0]])
        self.assertEqual(direct_edge_accuracy(w, CHAIN), 0.5)
        w[1, 2] = -0.3
        self.assertEqual(direct_edge_accuracy(w, CHAIN), 1.0)

    def test_zero_weight_is_wrong(self):
        self.assertEqual(direct_edge_accuracy(np.zeros((3, 3)), CHAIN), 0.0)

    def test_needs_an_edge(self):
        with self.assertRaises(UndefinedMetricError):
            direct_edge_accuracy(np.zeros((2, 2)), np.zeros((2, 2)))


class TestTransitiveChainAccuracy(unittest.TestCase):
    def test_single_chain(self):
        self.assertEqual(transitive_chain_accuracy(np.array([[0, 0.5, 0], [0, 0, 0.3], [0, 0, 0]]), CHAIN), 0.0)
        self.assertEqual(transitive_chain_accuracy(np.array([[0, -0.5, 0], [0, 0, 0.3], [0, 0, 0]]), CHAIN), 1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n = int(rng.integers(3, 8))
            a = rng.choice([-1.0, 0.0, 0.0, 1.0], size=(n, n))
            np.fill_diagonal(a, 0.0)
            w = rng.normal(size=(n, n))
            self.assertEqual(chain_sign_matches(w, a), brute_force_chains(w, a))

    def test_undefined_without_chains(self):
        a = np.array([[0, 1], [0, 0]], dtype=float)
        with self.assertRaises(UndefinedMetricError):
            transitive_chain_accuracy(np.ones((2, 2)), a)
        self.assertIsNone(try_transitive_chain_accuracy(np.ones((2, 2)), a))


class TestAggregate(unittest.TestCase):
    def test_population_std_and_best_fold(self):
        folds = [FoldScore(0, 0.5, 1.0, 0.2), FoldScore(1, 1.0, None, 0.4), FoldScore(2, 1.0, 0.5, 0.1)]
        report = aggregate(folds)
        self.assertAlmostEqual(report.direct_mean, 2.5 / 3)
        self.assertAlmostEqual(report.direct_std, float(np.std([0.5, 1.0, 1.0])))
        self.assertAlmostEqual(report.transitive_mean, 0.75)
        self.assertAlmostEqual(report.transitive_std, 0.25)
        self.assertEqual(report.best_fold, 2)

    def test_ties_fall_back_to_lower_index(self):
        report = aggregate([FoldScore(0, 0.8, None, 0.3), FoldScore(1, 0.8, None, 0.3)])
        self.assertEqual(report.best_fold, 0)
        self.assertIsNone(report.transitive_mean)

    def test_report_json_leaves_out_runtime(self):
        report = aggregate([FoldScore(0, 1.0, 1.0)], runtime=12.5, config={"seed": 3})
        payload = json.loads(report.to_json())
        self.assertNotIn("runtime", payload)
        self.assertEqual(payload["config"], {"seed": 3})
        self.assertEqual(payload["note"], METRIC_NOTE)

    def test_empty(self):
        with self.assertRaises(UsageError):
            aggregate([])


class TestRendering(unittest.TestCase):
    def test_format_pct(self):
        self.assertEqual(format_pct(0.9929, 0.022), "99.29% ± 2.20%")
        self.assertEqual(format_pct(None, None), "N/A")

    def test_table_columns(self):
        report = aggregate([FoldScore(0, 1.0, None)])
        table = render_table([("Base Urban Policy", 9, report)])
        header = table.splitlines()[0]
        for column in ("Experiment", "Nodes", "Direct Edge Acc.", "Transitive Chain Acc."):
            self.assertIn(column, header)
        self.assertIn("Base Urban Policy", table)
        self.assertIn("100.00% ± 0.00%", table)
        self.assertIn("N/A", table)


if __name__ == "__main__":
    unittest.main()

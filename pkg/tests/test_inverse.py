"""Tests for the annealed inverse solver."""

import json
import os
import sys
import tempfile
import unittest
from dataclasses import replace

import numpy as np

# Add the parent directory to Python path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.base_models import ConfigurationError, FcmGraph, UsageError
from services.data import TopologySpec, generate_synthetic
from services.inverse import (
    DEFAULT_NOISE_STD, InverseProblem, InverseSchedule, annealed_output, fuzzy_query, inverse_losses,
    lambda_schedule, solve, split_flows, write_solution,
)
from services.tensorcore import Tape
from services.training import TrainConfig, train_fold

RUN_SLOW = os.getenv("FHM_RUN_SLOW") == "1"

CHAIN_GRAPH = FcmGraph(["a", "b", "c"], np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]], dtype=float),
                       ["inputs", "outputs"], [[0, 2], [1]])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class SpyRng:
    """Counts normal draws while delegating to a real generator."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.normal_calls = 0

    def normal(self, *args, **kwargs):
        self.normal_calls += 1
        return self.rng.normal(*args, **kwargs)


class TestSchedule(unittest.TestCase):
    def test_lambda_endpoints(self):
        self.assertAlmostEqual(lambda_schedule(0, 1000, 2.5), 2.5, delta=1e-12)
        self.assertAlmostEqual(lambda_schedule(1000, 1000, 2.5), 5.0, delta=1e-12)

    def test_default_noise(self):
        self.assertEqual(DEFAULT_NOISE_STD, 0.01)
        self.assertEqual(InverseSchedule().noise_std, 0.01)

    def test_noise_only_in_first_half(self):
        for steps in (10, 11):
            spy = SpyRng()
            problem = InverseProblem.from_graph(np.zeros((3, 3)), CHAIN_GRAPH, {1: 0.5},
                                                InverseSchedule(steps=steps))
            solve(problem, rng=spy)
            self.assertEqual(spy.normal_calls, steps // 2)

    def test_invalid_schedule(self):
        with self.assertRaises(ConfigurationError):
            InverseSchedule(late_phase="cubic")
        with self.assertRaises(ConfigurationError):
            InverseSchedule(lambda_soft=-1.0)


class TestFlows(unittest.TestCase):
    def test_flows_follow_edge_direction(self):
        weights = np.array([[0.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
        tape = Tape()
        x = tape.leaf(np.zeros((3, 1)))
        f_valid, f_forbidden = split_flows(weights, CHAIN_GRAPH.mask, 1.0 - CHAIN_GRAPH.mask, x)
        np.testing.assert_allclose(f_valid.value.ravel(), [0.0, 1.0, 0.0])
        np.testing.assert_allclose(f_forbidden.value.ravel(), [0.0, 1.5, 0.0])

    def test_late_phase_is_linear_by_default(self):
        tape = Tape()
        f_valid = tape.constant([[2.0]])
        f_forbidden = tape.constant([[0.5]])
        rng = np.random.default_rng(0)
        late = annealed_output(f_valid, f_forbidden, 6, 10, rng)
        self.assertEqual(late.value[0, 0], 2.5)
        squashed = annealed_output(f_valid, f_forbidden, 6, 10, rng, late_phase="sigmoid")
        self.assertAlmostEqual(squashed.value[0, 0], sigmoid(2.5))
        with self.assertRaises(UsageError):
            annealed_output(f_valid, f_forbidden, 10, 10, rng)

    def test_losses(self):
        tape = Tape()
        y = tape.constant([[0.2], [0.9]])
        forbidden = tape.constant([[3.0], [4.0]])
        l_target, l_topology, l_total = inverse_losses(y, {1: 0.5}, forbidden, 0, 10, 2.0)
        self.assertAlmostEqual(l_target.value[0, 0], 100 * 0.16)
        self.assertAlmostEqual(l_topology.value[0, 0], 10.0)
        self.assertAlmostEqual(l_total.value[0, 0], 26.0)


class TestProblem(unittest.TestCase):
    def test_masks_must_be_complementary(self):
        with self.assertRaises(ConfigurationError):
            InverseProblem(np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2)), {0: 0.5})

    def test_target_range(self):
        with self.assertRaises(UsageError):
            InverseProblem.from_graph(np.zeros((3, 3)), CHAIN_GRAPH, {1: 1.5})
        with self.assertRaises(UsageError):
            InverseProblem.from_graph(np.zeros((3, 3)), CHAIN_GRAPH, {7: 0.5})

    def test_needs_targets(self):
        with self.assertRaises(UsageError):
            solve(InverseProblem.from_graph(np.zeros((3, 3)), CHAIN_GRAPH, {}))


class TestSolve(unittest.TestCase):
    def test_reaches_single_target(self):
        weights = np.zeros((3, 3))
        weights[0, 1] = 2.0
        schedule = InverseSchedule(steps=1000, late_phase="sigmoid")
        solution = solve(InverseProblem.from_graph(weights, CHAIN_GRAPH, {1: 0.7}, schedule))
        self.assertEqual(len(solution.loss_trace), 1000)
        self.assertLess(abs(solution.predicted[1] - 0.7), 0.02)

    def test_own_prediction_starts_near_zero_loss(self):
        rng = np.random.default_rng(2)
        weights = rng.uniform(-1, 1, size=(3, 3))
        start = sigmoid(weights.T @ np.full(3, 0.5))
        solution = solve(InverseProblem.from_graph(weights, CHAIN_GRAPH, {1: float(start[1])},
                                                   InverseSchedule(steps=4)))
        self.assertLess(solution.loss_trace[0][0], 1e-2)

    def test_larger_lambda_shrinks_forbidden_flow(self):
        weights = np.array([[0.0, 1.5, 0.0], [0.0, 0.0, 0.0], [0.0, 1.5, 0.0]])
        base = InverseSchedule(steps=400, late_phase="sigmoid")
        loose = solve(InverseProblem.from_graph(weights, CHAIN_GRAPH, {1: 0.8}, replace(base, lambda_soft=0.0)))
        strict = solve(InverseProblem.from_graph(weights, CHAIN_GRAPH, {1: 0.8}, replace(base, lambda_soft=10.0)))
        self.assertLess(strict.forbidden_norm, loose.forbidden_norm)

    def test_solution_file(self):
        solution = solve(InverseProblem.from_graph(np.zeros((3, 3)), CHAIN_GRAPH, {1: 0.5},
                                                   InverseSchedule(steps=6)))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "solution.json")
            write_solution(path, solution, CHAIN_GRAPH.node_names)
            with open(path) as f:
                payload = json.load(f)
        self.assertEqual(payload["nodes"], ["a", "b", "c"])
        self.assertEqual(len(payload["loss_trace"]), 6)
        self.assertEqual(len(payload["x"]), 3)


class TestFuzzyQuery(unittest.TestCase):
    TERMS = {"low": 0.2, "high": 0.8}

    def test_resolves_terms_to_indices(self):
        self.assertEqual(fuzzy_query({"b": "high"}, self.TERMS, CHAIN_GRAPH), {1: 0.8})
        self.assertEqual(fuzzy_query({"b": "low"}, self.TERMS), {"b": 0.2})

    def test_unknown_term_lists_known_ones(self):
        with self.assertRaises(UsageError) as ctx:
            fuzzy_query({"b": "huge"}, self.TERMS, CHAIN_GRAPH)
        self.assertIn("high, low", str(ctx.exception))

    def test_unknown_node(self):
        with self.assertRaises(UsageError):
            fuzzy_query({"z": "high"}, self.TERMS, CHAIN_GRAPH)


def trained_problem(k):
    """A random connected 5-node DAG, a briefly trained fold on its synthetic data and a reachable target."""
    rng = np.random.default_rng(100 + k)
    nodes = [f"n{i}" for i in range(5)]
    edges = [(nodes[i], nodes[i + 1], int(rng.choice([-1, 1]))) for i in range(4)]
    edges += [(nodes[i], nodes[j], int(rng.choice([-1, 1])))
              for i in range(5) for j in range(i + 2, 5) if rng.uniform() < 0.3]
    spec = TopologySpec(f"random-{k}", nodes, edges, {"inputs": nodes[:2], "outputs": nodes[2:]})
    spec = spec.with_generator(n_samples=60, seed=k)
    graph = spec.to_graph()
    fold = train_fold(generate_synthetic(spec), graph, TrainConfig(epochs=100, seed=k), np.arange(48), np.arange(48, 60))
    weights = fold.params.w_fcm
    target = float(sigmoid(weights.T @ rng.uniform(0.05, 0.95, size=5))[4])
    return weights, graph, {4: target}


@unittest.skipUnless(RUN_SLOW, "set FHM_RUN_SLOW=1 to run the solver sweeps")
class TestSolverSweep(unittest.TestCase):
    """Single-target problems on trained 5-node models, solved with a squashed late phase."""

    @classmethod
    def setUpClass(cls):
        cls.problems = [trained_problem(k) for k in range(20)]
        cls.schedule = InverseSchedule(steps=1000, late_phase="sigmoid")

    def test_reaches_reachable_targets(self):
        hits = 0
        for weights, graph, targets in self.problems:
            solution = solve(InverseProblem.from_graph(weights, graph, targets, self.schedule))
            hits += abs(solution.predicted[4] - targets[4]) < 0.02
        self.assertGreaterEqual(hits, 18)

    def test_lambda_reduces_forbidden_flow(self):
        reduced = 0
        for weights, graph, targets in self.problems:
            loose = solve(InverseProblem.from_graph(weights, graph, targets, replace(self.schedule, lambda_soft=0.0)))
            strict = solve(InverseProblem.from_graph(weights, graph, targets, replace(self.schedule, lambda_soft=10.0)))
            reduced += strict.forbidden_norm < loose.forbidden_norm
        self.assertGreaterEqual(reduced, 18)


if __name__ == "__main__":
    unittest.main()

"""End-to-end tests of the command-line entry point."""

import glob
import json
import os
import sys
import tempfile
import unittest

from click.testing import CliRunner

# Add the parent directory to Python path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app import cli

ENV = {"FHM_SEED": None, "FHM_OUT_DIR": None, "FHM_THREADS": None}
QUICK_TRAIN = ["train", "--epochs", "2", "--folds", "2", "--tmax", "2", "--samples", "20"]


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.runner = CliRunner()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def invoke(self, *args, seed="3"):
        prefix = ["--out", self.tmp.name] + (["--seed", seed] if seed is not None else [])
        return self.runner.invoke(cli, prefix + list(args), env=ENV)

    def artifact(self, name):
        matches = glob.glob(os.path.join(self.tmp.name, "*", name))
        self.assertEqual(len(matches), 1, f"expected one {name}, found {matches}")
        return matches[0]

    def read_bytes(self, path):
        with open(path, "rb") as f:
            return f.read()


class TestGenerate(CliTestCase):
    def test_writes_dataset_and_topology(self):
        result = self.invoke("generate", "--samples", "30")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("n=9 N=30 density=1.67", result.output)
        with open(self.artifact("dataset.csv")) as f:
            self.assertEqual(len(f.read().splitlines()), 31)
        with open(self.artifact("topology.json")) as f:
            self.assertEqual(len(json.load(f)["nodes"]), 9)

    def test_same_seed_same_bytes(self):
        self.invoke("generate", "--samples", "25")
        first = self.read_bytes(self.artifact("dataset.csv"))
        self.invoke("generate", "--samples", "25")
        self.assertEqual(self.read_bytes(self.artifact("dataset.csv")), first)

    def test_seed_is_required(self):
        result = self.invoke("generate", seed=None)
        self.assertEqual(result.exit_code, 2)
        self.assertIn("error: config:", result.output)

    def test_unknown_topology(self):
        result = self.invoke("--topology", "atlantis", "generate")
        self.assertEqual(result.exit_code, 2)
        self.assertIn("atlantis", result.output)


class TestTrainEvalInvert(CliTestCase):
    def test_train_outputs_and_determinism(self):
        result = self.invoke(*QUICK_TRAIN)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("Direct Edge Acc.", result.output)
        report_path = self.artifact("report.json")
        first = self.read_bytes(report_path)
        with open(self.artifact("best_fold.json")) as f:
            best = json.load(f)
        self.assertTrue(os.path.exists(os.path.join(os.path.dirname(report_path), best["checkpoint"])))
        self.artifact("fold-0.json")
        self.artifact("fold-1.json")
        self.artifact("report.txt")

        self.invoke(*QUICK_TRAIN)
        self.assertEqual(self.read_bytes(report_path), first)

    def test_zero_epochs(self):
        result = self.invoke("train", "--epochs", "0", "--folds", "2", "--samples", "20")
        self.assertEqual(result.exit_code, 0, result.output)
        with open(self.artifact("report.json")) as f:
            report = json.load(f)
        self.assertEqual(len(report["folds"]), 2)
        self.assertEqual(report["nodes"], 9)
        self.assertEqual(report["experiment"], "Base Urban Policy")

    def test_eval_and_invert_on_a_checkpoint(self):
        self.assertEqual(self.invoke(*QUICK_TRAIN).exit_code, 0)
        checkpoint = self.artifact("fold-0.json")

        result = self.invoke("eval", "--checkpoint", checkpoint)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("base-urban-9", result.output)
        result = self.invoke("--topology", "base-urban-9", "eval", "--checkpoint", checkpoint)
        self.assertIn("Base Urban Policy", result.output)
        result = self.invoke("--topology", "sachs-11", "eval", "--checkpoint", checkpoint)
        self.assertEqual(result.exit_code, 2)

        query = os.path.join(self.tmp.name, "query.json")
        with open(query, "w") as f:
            json.dump({"fuzzy": {"public_health": "high"}}, f)
        result = self.invoke("invert", "--checkpoint", checkpoint, "--query", query, "--steps", "20")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("public_health: target=0.8000", result.output)
        with open(self.artifact("solution.json")) as f:
            solution = json.load(f)
        self.assertEqual(len(solution["loss_trace"]), 20)
        self.assertEqual(len(solution["nodes"]), 9)

    def test_invert_with_an_unknown_term(self):
        self.assertEqual(self.invoke(*QUICK_TRAIN).exit_code, 0)
        query = os.path.join(self.tmp.name, "query.json")
        with open(query, "w") as f:
            json.dump({"fuzzy": {"public_health": "enormous"}}, f)
        result = self.invoke("invert", "--checkpoint", self.artifact("fold-0.json"), "--query", query)
        self.assertEqual(result.exit_code, 2)
        self.assertIn("very-high", result.output)

    def test_invert_defaults_to_the_best_fold_of_a_run(self):
        self.assertEqual(self.invoke(*QUICK_TRAIN).exit_code, 0)
        run_dir = os.path.dirname(self.artifact("best_fold.json"))
        query = os.path.join(self.tmp.name, "query.json")
        with open(query, "w") as f:
            json.dump({"targets": {"public_health": 0.5}}, f)
        result = self.invoke("invert", "--run-dir", run_dir, "--query", query, "--steps", "10")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("public_health: target=0.5000", result.output)

    def test_invert_needs_a_checkpoint_or_a_run_dir(self):
        query = os.path.join(self.tmp.name, "query.json")
        with open(query, "w") as f:
            json.dump({"targets": {"public_health": 0.5}}, f)
        result = self.invoke("invert", "--query", query)
        self.assertEqual(result.exit_code, 2)
        self.assertIn("--run-dir", result.output)
        result = self.invoke("invert", "--run-dir", self.tmp.name, "--query", query)
        self.assertEqual(result.exit_code, 2)
        self.assertIn("best_fold.json", result.output)

    def test_invert_warns_when_a_target_is_missed(self):
        self.assertEqual(self.invoke(*QUICK_TRAIN).exit_code, 0)
        query = os.path.join(self.tmp.name, "query.json")
        # population_density has no incoming edge, so its prediction stays near 0.5
        with open(query, "w") as f:
            json.dump({"targets": {"population_density": 1.0}}, f)
        result = self.invoke("invert", "--checkpoint", self.artifact("fold-0.json"), "--query", query,
                             "--steps", "10")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("warning: population_density is", result.output)
        self.assertIn("late_phase=sigmoid", result.output)

    def test_eval_of_a_garbage_checkpoint(self):
        path = os.path.join(self.tmp.name, "garbage.json")
        with open(path, "w") as f:
            f.write("<<not json>>")
        result = self.invoke("eval", "--checkpoint", path)
        self.assertEqual(result.exit_code, 2)
        self.assertIn("error: fhm:", result.output)


class TestFcmSim(CliTestCase):
    def test_trajectory_file(self):
        result = self.invoke("fcm-sim", "--clamp-roots")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("converged=true", result.output)
        path = self.artifact("trajectory.csv")
        first = self.read_bytes(path)
        self.assertTrue(first.startswith(b"step,transport_investment"))
        self.invoke("fcm-sim", "--clamp-roots")
        self.assertEqual(self.read_bytes(path), first)

    def test_zero_weight_topology_converges_in_one_step(self):
        topology = os.path.join(self.tmp.name, "empty.json")
        with open(topology, "w") as f:
            json.dump({"name": "empty", "nodes": ["a", "b"], "edges": [], "groups": {"all": ["a", "b"]}}, f)
        result = self.invoke("--topology", topology, "fcm-sim")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("steps=1 converged=true", result.output)

    def test_bad_start_vector(self):
        result = self.invoke("fcm-sim", "--start", "0.1,0.2")
        self.assertEqual(result.exit_code, 2)
        self.assertIn("error:", result.output)


if __name__ == "__main__":
    unittest.main()

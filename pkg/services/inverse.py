"""Inverse solver: find input activations that drive selected nodes to target values.

Flows follow the propagation orientation of the model: node i receives
sum_j (W (.) M)[j, i] sigma(x_j), so a mask or weight at [j, i] is the edge j -> i.

During the first half of the schedule the output is sigma(F + eps); afterwards
it is the raw flow sum F, so late-phase outputs are not squashed into [0, 1]
while targets are. ``late_phase="sigmoid"`` keeps the squashing throughout.
"""
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from services import tensorcore as tc
from services.base_models import ConfigurationError, FcmGraph, InverseError, NumericalError, UsageError
from services.logger_config import inverse_logger, log_operation
from services.tensorcore import Tape, Var
from services.training import sgd_momentum_step

logger = inverse_logger

TARGET_WEIGHT = 100.0
DEFAULT_NOISE_STD = 0.01
LATE_PHASES = ("linear", "sigmoid")


@dataclass(frozen=True)
class InverseSchedule:
    steps: int = 1000
    lr: float = 0.05
    momentum: float = 0.9
    lambda_soft: float = 1.0
    noise_std: float = DEFAULT_NOISE_STD
    late_phase: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("inverse lr must be > 0 and momentum in [0, 1)")
        if self.lambda_soft < 0 or self.noise_std < 0:
            raise ConfigurationError("lambda_soft and noise_std must be >= 0")
        if self.late_phase not in LATE_PHASES:
            raise ConfigurationError(f"late_phase must be one of {LATE_PHASES}")


@dataclass(frozen=True)
class InverseProblem:
    weights: np.ndarray
    valid_mask: np.ndarray
    forbidden_mask: np.ndarray
    targets: Dict[int, float]
    schedule: InverseSchedule = field(default_factory=InverseSchedule)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        n = weights.shape[0]
        if weights.shape != (n, n):
            raise ConfigurationError(f"inverse weights must be square, got {weights.shape}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "valid_mask", np.asarray(self.valid_mask, dtype=float))
        object.__setattr__(self, "forbidden_mask", np.asarray(self.forbidden_mask, dtype=float))
        check_masks(self.valid_mask, self.forbidden_mask)
        if self.valid_mask.shape != weights.shape:
            raise ConfigurationError(f"mask shape {self.valid_mask.shape} does not match weights {weights.shape}")
        for node, value in self.targets.items():
            if not 0 <= node < n:
                raise UsageError(f"target node {node} out of range for {n} nodes")
            if not 0.0 <= value <= 1.0:
                raise UsageError(f"target value {value} for node {node} is outside [0, 1]")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_graph(cls, weights, graph: FcmGraph, targets: Mapping[int, float],
                   schedule: Optional[InverseSchedule] = None) -> "InverseProblem":
        """Valid mask = edges of A; forbidden mask = its complement; W keeps every entry."""
        valid = graph.mask
        return cls(np.asarray(weights, dtype=float), valid, 1.0 - valid, dict(targets),
                   schedule or InverseSchedule())


@dataclass
class InverseSolution:
    x_raw: np.ndarray
    x: np.ndarray
    predicted: np.ndarray
    final_output: np.ndarray
    loss_trace: List[Tuple[float, float, float]]
    forbidden_norm: float

    def to_dict(self, node_names: Optional[List[str]] = None) -> Dict:
        payload = {
            "x_raw": self.x_raw.tolist(),
            "x": self.x.tolist(),
            "predicted": self.predicted.tolist(),
            "final_output": self.final_output.tolist(),
            "forbidden_flow_norm": self.forbidden_norm,
            "loss_trace": [{"target": a, "topology": b, "total": c} for a, b, c in self.loss_trace],
            "note": "After the first half of the schedule the optimized output is the raw flow sum, "
                    "not sigma of it; 'predicted' is sigma(W sigma(x)).",
        }
        if node_names:
            payload["nodes"] = list(node_names)
        return payload


def check_masks(valid: np.ndarray, forbidden: np.ndarray) -> None:
    if valid.shape != forbidden.shape or not np.array_equal(valid + forbidden, np.ones_like(valid)):
        raise ConfigurationError("valid and forbidden masks must be complementary (M_forbidden = 1 - M_valid)")


def split_flows(weights: np.ndarray, valid: np.ndarray, forbidden: np.ndarray, x_raw: Var) -> Tuple[Var, Var]:
    """(F_valid, F_forbidden): the masked flows of sigma(x) into each node."""
    check_masks(valid, forbidden)
    tape = x_raw.tape
    activation = tc.sigmoid(x_raw)
    f_valid = tape.constant((weights * valid).T) @ activation
    f_forbidden = tape.constant((weights * forbidden).T) @ activation
    return f_valid, f_forbidden


def annealed_output(f_valid: Var, f_forbidden: Var, t: int, steps: int, rng: np.random.Generator,
                    noise_std: float = DEFAULT_NOISE_STD, late_phase: str = "linear") -> Var:
    """sigma(F + eps) for the first floor(T/2) steps, the plain flow sum afterwards."""
    if not 0 <= t < steps:
        raise UsageError(f"step {t} outside [0, {steps})")
    flow = f_valid + f_forbidden
    if t < steps // 2:
        eps = rng.normal(0.0, noise_std, size=flow.shape[0]).reshape(flow.shape)
        return tc.sigmoid(flow + eps)
    if late_phase == "sigmoid":
        return tc.sigmoid(flow)
    return flow


def lambda_schedule(t: int, steps: int, lambda_soft: float) -> float:
    """lambda_t = lambda_soft (1 + t/T)."""
    return lambda_soft * (1.0 + t / steps)


def inverse_losses(y_t: Var, targets: Mapping[int, float], f_forbidden: Var, t: int, steps: int,
                   lambda_soft: float) -> Tuple[Var, Var, Var]:
    """(L_target, L_topology, L_total) with L_target = 100 sum (y_i - v_i)^2 and L_topology = lambda_t ||F_forbidden||_2."""
    if not targets:
        raise UsageError("inverse problem needs at least one target")
    nodes = sorted(targets)
    if nodes[0] < 0 or nodes[-1] >= y_t.shape[0]:
        raise UsageError(f"target index out of range for {y_t.shape[0]} nodes")
    wanted = np.array([[targets[i]] for i in nodes])
    l_target = tc.scale(tc.sq_norm(tc.take_rows(y_t, nodes) - wanted), TARGET_WEIGHT)
    l_topology = tc.scale(tc.l2_norm(f_forbidden), lambda_schedule(t, steps, lambda_soft))
    return l_target, l_topology, l_target + l_topology


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def solve(problem: InverseProblem, rng: Optional[np.random.Generator] = None) -> InverseSolution:
    """Annealed SGD with momentum on L_total from x_raw = 0; returns the last iterate and the loss trace."""
    schedule = problem.schedule
    if schedule.steps < 2:
        raise UsageError("inverse solve needs at least 2 steps")
    if not problem.targets:
        raise UsageError("inverse problem needs at least one target")
    check_masks(problem.valid_mask, problem.forbidden_mask)
    rng = rng if rng is not None else np.random.default_rng(schedule.seed)

    x_raw = np.zeros((problem.n, 1))
    velocity: Dict[str, np.ndarray] = {}
    trace = []
    y_value = None
    for t in range(schedule.steps):
        tape = Tape()
        x_leaf = tape.leaf(x_raw, name="x_raw")
        try:
            f_valid, f_forbidden = split_flows(problem.weights, problem.valid_mask, problem.forbidden_mask, x_leaf)
            y_t = annealed_output(f_valid, f_forbidden, t, schedule.steps, rng,
                                  schedule.noise_std, schedule.late_phase)
            l_target, l_topology, l_total = inverse_losses(
                y_t, problem.targets, f_forbidden, t, schedule.steps, schedule.lambda_soft)
            total = float(tape.forward(l_total)[0, 0])
            grads = tape.backward(l_total)
        except NumericalError as e:
            logger.error(f"inverse solve failed at step {t}: {e}")
            raise InverseError(f"non-finite loss at step {t}: {e}") from e
        if not math.isfinite(total):
            raise InverseError(f"non-finite loss at step {t}")
        trace.append((float(l_target.value[0, 0]), float(l_topology.value[0, 0]), total))
        y_value = y_t.value.copy()
        updated, velocity = sgd_momentum_step({"x_raw": x_raw}, {"x_raw": grads[x_leaf]}, velocity,
                                              schedule.lr, schedule.momentum)
        x_raw = updated["x_raw"]
        log_operation(logger, "inverse step", f"t={t} loss={total:.6f}")

    x = _sigmoid(x_raw)
    flow = problem.weights.T @ x
    forbidden_flow = (problem.weights * problem.forbidden_mask).T @ x
    logger.info(f"Inverse solve finished after {schedule.steps} steps, final loss {trace[-1][2]:.6f}")
    return InverseSolution(x_raw=x_raw.ravel(), x=x.ravel(), predicted=_sigmoid(flow).ravel(),
                           final_output=y_value.ravel(), loss_trace=trace,
                           forbidden_norm=float(np.linalg.norm(forbidden_flow)))


def fuzzy_query(labels: Mapping[str, str], memberships: Mapping[str, float],
                graph: Optional[FcmGraph] = None) -> Dict:
    """Resolve {node: fuzzy term} through the membership table into solver targets.

    Keys stay node names unless a graph is given, in which case they become node indices.
    """
    targets = {}
    for node, term in labels.items():
        if term not in memberships:
            raise UsageError(f"unknown fuzzy term '{term}', known terms: {', '.join(sorted(memberships))}")
        value = float(memberships[term])
        if not 0.0 <= value <= 1.0:
            raise UsageError(f"membership of '{term}' must lie in [0, 1], got {value}")
        key = graph.node_index(node) if graph is not None else node
        targets[key] = value
    return targets


def load_query(path: str) -> Dict:
    with open(path) as f:
        return json.load(f)


def write_solution(path: str, solution: InverseSolution, node_names: Optional[List[str]] = None) -> None:
    with open(path, "w") as f:
        json.dump(solution.to_dict(node_names), f, indent=2, sort_keys=True)
        f.write("\n")

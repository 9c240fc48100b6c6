"""FHM forward pass: encoder, mini-FCM fusion, propagation, causal scoring, best-state selection and metric heads."""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from services import tensorcore as tc
from services.base_models import N_NODE_STATS, DimensionError, FcmGraph, UsageError
from services.tensorcore import Tape, Var

logger = logging.getLogger(__name__)

# Fixed architectural gain of the memory term tanh(5 * H_curr)
MEMORY_GAIN = 5.0
HEAD_WIDTH = 4
CHECKPOINT_FORMAT = "fhm-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    d_hidden: int = 16
    d_latent: int = 8
    n_features: int = N_NODE_STATS


def head_key(m: int, name: str) -> str:
    return f"head.{m}.{name}"


@dataclass
class FhmParams:
    """All learnable arrays, keyed by name, in a fixed insertion order."""
    arrays: Dict[str, np.ndarray]
    n_groups: int

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return list(self.arrays)

    def copy(self) -> "FhmParams":
        return FhmParams({k: v.copy() for k, v in self.arrays.items()}, self.n_groups)

    @property
    def w_fcm(self) -> np.ndarray:
        return self.arrays["W_fcm"]


def init_params(graph: FcmGraph, config: ModelConfig, rng: np.random.Generator) -> FhmParams:
    """Orthogonal encoder, head weights uniform in +-1/sqrt(fan_in), biases 0, W_fcm uniform in [-0.1, 0.1].

    With n_features <= d_hidden <= d_latent the encoder's linear part W1 W2 has
    orthonormal rows, so at init the rows of H0 keep the angles of the feature rows.
    """
    def dense(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    def orthogonal(fan_in, fan_out):
        q, r = np.linalg.qr(rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out))))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return q if fan_in >= fan_out else q.T

    arrays = {
        "W1": orthogonal(config.n_features, config.d_hidden),
        "b1": np.zeros((1, config.d_hidden)),
        "W2": orthogonal(config.d_hidden, config.d_latent),
        "b2": np.zeros((1, config.d_latent)),
    }
    for m in range(len(graph.groups)):
        arrays[head_key(m, "W_m1")] = dense(config.d_latent, HEAD_WIDTH)
        arrays[head_key(m, "b_m1")] = np.zeros((1, HEAD_WIDTH))
        arrays[head_key(m, "W_m2")] = dense(HEAD_WIDTH, 1)
        arrays[head_key(m, "b_m2")] = np.zeros((1, 1))
    arrays["W_fcm"] = rng.uniform(-0.1, 0.1, size=(graph.n, graph.n))
    return FhmParams(arrays, len(graph.groups))


def bind_params(tape: Tape, params: FhmParams) -> Dict[str, Var]:
    return {name: tape.leaf(value, name=name) for name, value in params.arrays.items()}


def encode(x0: Var, leaves: Dict[str, Var]) -> Var:
    """H0 = tanh(X0 W1 + b1) W2 + b2 (outer layer affine)."""
    hidden = tc.tanh(tc.add_row(x0 @ leaves["W1"], leaves["b1"]))
    return tc.add_row(hidden @ leaves["W2"], leaves["b2"])


def mini_fcm(h_curr: Var, w_fcm: Var, mask: np.ndarray) -> Var:
    """(A (.) W_fcm)^T H_curr: each node sums its causes' embeddings, weighted by signed strengths."""
    if w_fcm.shape != mask.shape or mask.shape[0] != h_curr.shape[0]:
        raise DimensionError("mini_fcm", w_fcm.shape, mask.shape, h_curr.shape)
    masked = tc.hadamard(h_curr.tape.constant(mask), w_fcm)
    return tc.transpose(masked) @ h_curr


def cosine_similarity(h: Var) -> Var:
    normalized = tc.row_normalize(h)
    return normalized @ tc.transpose(normalized)


def fusion_penalty(w_fcm: Var, h_curr: Var, mask: np.ndarray) -> Var:
    """Sum over edges of |W_fcm[i,j] - G[i,j]| with G the cosine similarity of the rows of H_curr."""
    gap = tc.absolute(w_fcm - cosine_similarity(h_curr))
    return tc.total(tc.hadamard(h_curr.tape.constant(mask), gap))


def initial_state(h_curr: Var) -> Var:
    return h_curr + tc.sign(h_curr)


def propagate_step(h_t: Var, h_prop: Var, h_curr: Var) -> Var:
    """Phi(H_t) = tanh(H_t + H_prop) + tanh(5 H_curr)."""
    return tc.tanh(h_t + h_prop) + tc.tanh(tc.scale(h_curr, MEMORY_GAIN))


def node_force(h: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(h) ** 2, axis=1))


def transitive_alignment(force: np.ndarray, adjacency: np.ndarray, s_matrix: np.ndarray) -> np.ndarray:
    """Gamma = E (A (.) |S|)^T as an n-vector."""
    force = np.asarray(force, dtype=float)
    s_matrix = np.asarray(s_matrix, dtype=float)
    if s_matrix.shape != adjacency.shape or force.shape[0] != adjacency.shape[0]:
        raise DimensionError("transitive_alignment", force.shape, adjacency.shape, s_matrix.shape)
    return force @ (adjacency * np.abs(s_matrix)).T


def causal_score(force: np.ndarray, gamma: np.ndarray) -> float:
    force, gamma = np.asarray(force, dtype=float), np.asarray(gamma, dtype=float)
    if force.shape != gamma.shape:
        raise DimensionError("causal_score", force.shape, gamma.shape)
    return float(np.mean(force + gamma))


@dataclass(frozen=True)
class PropagationState:
    h_curr: Var
    h_t: Var
    t: int
    t_max: int
    s_perf: float
    h_perf: Var
    s_matrix: np.ndarray
    perf_step: int = -1

    @property
    def done(self) -> bool:
        return self.t >= self.t_max


def select_best(state: PropagationState, h_next: Var, score: float) -> PropagationState:
    """Keep H_next as the best state only on a strict improvement; always advance t."""
    if score > state.s_perf:
        return replace(state, h_t=h_next, t=state.t + 1, s_perf=score, h_perf=h_next, perf_step=state.t)
    return replace(state, h_t=h_next, t=state.t + 1)


def output_gate(h_t: Var) -> Var:
    return h_t + tc.sign(h_t)


def metric_head(h_final: Var, graph: FcmGraph, m: int, leaves: Dict[str, Var]) -> Var:
    """Softsign(ReLU(H_rows W_m1 + b_m1) W_m2 + b_m2) over the nodes of group m."""
    if not 0 <= m < len(graph.groups) or head_key(m, "W_m1") not in leaves:
        raise UsageError(f"unknown metric group {m}")
    rows = tc.take_rows(h_final, graph.groups[m])
    hidden = tc.relu(tc.add_row(rows @ leaves[head_key(m, "W_m1")], leaves[head_key(m, "b_m1")]))
    return tc.softsign(tc.add_row(hidden @ leaves[head_key(m, "W_m2")], leaves[head_key(m, "b_m2")]))


@dataclass
class ForwardResult:
    tape: Tape
    leaves: Dict[str, Var]
    h_curr: Var
    h_final: Var
    outputs: List[Var]
    s_perf: float
    perf_step: int
    trace: List[Tuple[float, float]] = field(default_factory=list)


def forward_full(x0, graph: FcmGraph, params: FhmParams, t_max: int,
                 s_matrix: Optional[np.ndarray] = None, tape: Optional[Tape] = None) -> ForwardResult:
    """encode -> initial state -> t_max scored propagation steps -> gate on the best state -> heads.

    ``s_matrix`` is the past-embedding matrix S; it defaults to the current W_fcm.
    """
    if t_max < 0:
        raise UsageError("t_max must be >= 0")
    tape = tape or Tape()
    leaves = bind_params(tape, params)
    x = tape.constant(x0, name="X0")
    s_matrix = params.w_fcm.copy() if s_matrix is None else np.asarray(s_matrix, dtype=float)
    mask = graph.mask

    h_curr = encode(x, leaves)
    h_prop = mini_fcm(h_curr, leaves["W_fcm"], mask)
    h_start = initial_state(h_curr)
    state = PropagationState(h_curr=h_curr, h_t=h_start, t=0, t_max=t_max,
                             s_perf=-math.inf, h_perf=h_start, s_matrix=s_matrix)
    trace = []
    while not state.done:
        h_next = propagate_step(state.h_t, h_prop, h_curr)
        force = node_force(h_next.value)
        score = causal_score(force, transitive_alignment(force, mask, s_matrix))
        trace.append((score, float(force.mean())))
        state = select_best(state, h_next, score)

    h_final = output_gate(state.h_perf)
    outputs = [metric_head(h_final, graph, m, leaves) for m in range(len(graph.groups))]
    return ForwardResult(tape, leaves, h_curr, h_final, outputs, state.s_perf, state.perf_step, trace)


def save_checkpoint(path: str, params: FhmParams, graph: FcmGraph, config: ModelConfig,
                    seed: int, extra: Optional[Dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "seed": seed,
        "config": {"d_hidden": config.d_hidden, "d_latent": config.d_latent,
                   "n_features": config.n_features},
        "graph": graph.to_dict(),
        "params": {name: {"shape": list(value.shape), "data": value.ravel().tolist()}
                   for name, value in params.arrays.items()},
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> Tuple[FhmParams, FcmGraph, ModelConfig, Dict]:
    """Read a checkpoint written by ``save_checkpoint``; malformed files raise UsageError."""
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"{path} is not an FHM checkpoint")
    try:
        graph = FcmGraph.from_dict(payload["graph"])
        config = ModelConfig(**payload["config"])
        arrays = {}
        # sort_keys scrambles the order on disk; restore the canonical one
        for name in init_order(len(graph.groups)):
            entry = payload["params"][name]
            arrays[name] = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        meta = {"seed": payload["seed"], **payload.get("extra", {})}
    except KeyError as e:
        raise UsageError(f"{path} is missing checkpoint entry {e}") from None
    except (TypeError, ValueError) as e:
        raise UsageError(f"{path} has a malformed checkpoint entry: {e}") from None
    return FhmParams(arrays, len(graph.groups)), graph, config, meta


def init_order(n_groups: int) -> List[str]:
    names = ["W1", "b1", "W2", "b2"]
    for m in range(n_groups):
        names += [head_key(m, "W_m1"), head_key(m, "b_m1"), head_key(m, "W_m2"), head_key(m, "b_m2")]
    return names + ["W_fcm"]

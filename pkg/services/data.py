"""Ground-truth topologies, synthetic steady-state data and CSV ingestion."""
import json
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
import pandas as pd

from services.base_models import (
    ConfigurationError, FcmGraph, GenerationError, IngestionError, MetricDataset, SchemaError, UsageError,
)
from services.fcm_reference import ClassicFcm
from services.logger_config import data_logger as logger

TOPOLOGY_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config", "topologies")
WEIGHT_RANGE = (0.3, 0.9)
MAX_NONCONVERGED_FRACTION = 0.5
# sigmoid steepness whose slope at the threshold is 1
SYNTHETIC_STEEPNESS = 4.0
DRIVE_STD = 0.1


@dataclass(frozen=True)
class TopologySpec:
    """A named signed digraph plus the parameters of its synthetic generator."""
    name: str
    nodes: List[str]
    edges: List[Tuple[str, str, int]]
    groups: Dict[str, List[str]]
    noise: float = 0.02
    n_samples: int = 200
    seed: int = 0
    experiment: str = ""

    def __post_init__(self):
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise ConfigurationError(f"topology '{self.name}' has duplicate node names")
        pairs = set()
        for source, target, sign in self.edges:
            if source not in known or target not in known:
                raise ConfigurationError(f"topology '{self.name}': edge {source}->{target} references an unknown node")
            if source == target:
                raise ConfigurationError(f"topology '{self.name}': self-loop on {source}")
            if sign not in (-1, 1):
                raise ConfigurationError(f"topology '{self.name}': edge {source}->{target} sign must be +1 or -1")
            if (source, target) in pairs:
                raise ConfigurationError(f"topology '{self.name}': duplicate edge {source}->{target}")
            pairs.add((source, target))
        members = sorted(name for group in self.groups.values() for name in group)
        if members != sorted(self.nodes) or any(not group for group in self.groups.values()):
            raise ConfigurationError(f"topology '{self.name}': groups must be non-empty and partition the nodes")
        if self.noise < 0 or self.n_samples < 1:
            raise ConfigurationError(f"topology '{self.name}': noise must be >= 0 and samples >= 1")

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def density(self) -> float:
        return len(self.edges) / self.n

    def adjacency(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.nodes)}
        adjacency = np.zeros((self.n, self.n))
        for source, target, sign in self.edges:
            adjacency[index[source], index[target]] = sign
        return adjacency

    def to_graph(self) -> FcmGraph:
        index = {name: i for i, name in enumerate(self.nodes)}
        return FcmGraph(list(self.nodes), self.adjacency(), list(self.groups),
                        [[index[name] for name in members] for members in self.groups.values()])

    def is_connected(self) -> bool:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from((s, t) for s, t, _ in self.edges)
        return nx.is_weakly_connected(graph)

    def roots(self) -> List[int]:
        """Nodes without incoming edges."""
        return [int(i) for i in np.flatnonzero(~self.adjacency().any(axis=0))]

    def with_generator(self, noise: Optional[float] = None, n_samples: Optional[int] = None,
                       seed: Optional[int] = None) -> "TopologySpec":
        return TopologySpec(self.name, list(self.nodes), list(self.edges), dict(self.groups),
                            self.noise if noise is None else noise,
                            self.n_samples if n_samples is None else n_samples,
                            self.seed if seed is None else seed, self.experiment)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "experiment": self.experiment,
            "nodes": list(self.nodes),
            "edges": [{"from": s, "to": t, "sign": sign} for s, t, sign in self.edges],
            "groups": {k: list(v) for k, v in self.groups.items()},
            "generator": {"noise": self.noise, "samples": self.n_samples, "seed": self.seed},
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "TopologySpec":
        try:
            generator = payload.get("generator", {})
            return cls(
                name=payload["name"],
                nodes=list(payload["nodes"]),
                edges=[(e["from"], e["to"], int(e["sign"])) for e in payload["edges"]],
                groups={k: list(v) for k, v in payload["groups"].items()},
                noise=float(generator.get("noise", 0.02)),
                n_samples=int(generator.get("samples", 200)),
                seed=int(generator.get("seed", 0)),
                experiment=payload.get("experiment", payload["name"]),
            )
        except KeyError as e:
            raise ConfigurationError(f"topology file is missing field {e}") from None


def registry() -> List[str]:
    return sorted(os.path.splitext(f)[0] for f in os.listdir(TOPOLOGY_DIR) if f.endswith(".json"))


def load_topology(path: str) -> TopologySpec:
    with open(path) as f:
        return TopologySpec.from_dict(json.load(f))


def builtin_topology(name: str) -> TopologySpec:
    names = registry()
    if name not in names:
        raise UsageError(f"unknown topology '{name}', available: {', '.join(names)}")
    return load_topology(os.path.join(TOPOLOGY_DIR, f"{name}.json"))


def resolve_topology(name_or_path: str) -> TopologySpec:
    if name_or_path.endswith(".json") or os.path.sep in name_or_path:
        return load_topology(name_or_path)
    return builtin_topology(name_or_path)


def write_topology(spec: TopologySpec, path: str) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_dict(), f, indent=2)
        f.write("\n")


def ground_truth_weights(spec: TopologySpec, rng: np.random.Generator) -> np.ndarray:
    """Edge signs with magnitudes drawn uniformly from [0.3, 0.9]."""
    adjacency = spec.adjacency()
    magnitudes = rng.uniform(*WEIGHT_RANGE, size=adjacency.shape)
    return adjacency * magnitudes


def synthetic_fcm(spec: TopologySpec, rng: np.random.Generator) -> ClassicFcm:
    """Reference FCM of the generator: a sigmoid with unit slope at its threshold, roots clamped."""
    return ClassicFcm(ground_truth_weights(spec, rng), activation="sigmoid", steepness=SYNTHETIC_STEEPNESS,
                      clamped=frozenset(spec.roots()))


def exogenous_thresholds(fcm: ClassicFcm, n_rows: int, rng: np.random.Generator,
                         drive_std: float = DRIVE_STD) -> np.ndarray:
    """Per-row thresholds W^T 0.5 - e with e ~ N(0, drive_std^2) per node.

    Each node then sees its parents centred on 0.5 plus a drive of its own, so
    nodes deep in a chain keep variation that does not come from the roots alone.
    """
    centre = 0.5 * fcm.weights.sum(axis=0)
    return centre - rng.normal(0.0, drive_std, size=(n_rows, fcm.n))


def steady_states(fcm: ClassicFcm, starts: np.ndarray,
                  thresholds: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Run every start to its fixed point, row k under ``thresholds[k]`` when given; returns (states, converged flags)."""
    states, flags = [], []
    for k, start in enumerate(np.atleast_2d(starts)):
        row_fcm = fcm if thresholds is None else replace(fcm, threshold=thresholds[k])
        state, _, converged = row_fcm.run_to_fixed_point(start)
        states.append(state)
        flags.append(converged)
    return np.array(states).reshape(len(states), fcm.n), np.array(flags, dtype=bool)


def generate_synthetic(spec: TopologySpec, folds: Optional[int] = None) -> MetricDataset:
    """Steady states of the reference FCM from random starts, plus Gaussian observation noise, clipped to [0, 1].

    Root nodes are clamped at their start value and every row draws its own
    exogenous thresholds, so different rows reach different steady states.
    """
    if folds is not None and spec.n_samples < folds:
        raise UsageError(f"{spec.n_samples} samples cannot fill {folds} folds")
    rng = np.random.default_rng(spec.seed)
    fcm = synthetic_fcm(spec, rng)
    starts = rng.uniform(0.0, 1.0, size=(spec.n_samples, spec.n))
    states, converged = steady_states(fcm, starts, exogenous_thresholds(fcm, spec.n_samples, rng))
    failures = int(np.count_nonzero(~converged))
    if failures > MAX_NONCONVERGED_FRACTION * spec.n_samples:
        raise GenerationError(f"topology '{spec.name}': reference FCM did not converge for "
                              f"{failures}/{spec.n_samples} starts")
    noisy = states + rng.normal(0.0, spec.noise, size=states.shape) if spec.noise > 0 else states
    data = np.clip(noisy, 0.0, 1.0)
    graph = spec.to_graph()
    logger.info(f"Generated {spec.n_samples} rows for '{spec.name}' "
                f"(n={spec.n}, density={spec.density:.2f}, non-converged={failures})")
    return MetricDataset(list(spec.nodes), data, graph.groups)


def normalize_columns(frame: pd.DataFrame) -> pd.DataFrame:
    """Min-max per column; constant columns map to 0."""
    low, high = frame.min(), frame.max()
    span = high - low
    return (frame - low) / span.where(span != 0, 1.0)


def load_csv(path: str, spec: TopologySpec) -> MetricDataset:
    """Read a CSV whose header names the topology's nodes; drops incomplete rows and min-max normalizes."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise IngestionError(f"{path} is empty") from None
    missing = [name for name in spec.nodes if name not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing column '{missing[0]}'"
                          + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    frame = frame[list(spec.nodes)].apply(pd.to_numeric, errors="coerce")
    complete = frame.dropna()
    dropped = len(frame) - len(complete)
    if complete.empty:
        raise IngestionError(f"{path} has no complete rows")
    if dropped:
        logger.warning(f"Dropped {dropped} rows with missing values from {path}")
    normalized = normalize_columns(complete.astype(float))
    return MetricDataset(list(spec.nodes), normalized.to_numpy(), spec.to_graph().groups, dropped_rows=dropped)


def write_csv(dataset: MetricDataset, path: str) -> None:
    frame = pd.DataFrame(dataset.data, columns=dataset.node_names)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

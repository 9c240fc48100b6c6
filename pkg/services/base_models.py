"""Base models and shared functionality."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3
EXIT_IO_ERROR = 4

# mean, std, min and max of a node column
N_NODE_STATS = 4


class FhmError(Exception):
    """Base class for every error raised by the services."""
    exit_code = EXIT_RUNTIME_ERROR
    module = "fhm"


class DimensionError(FhmError):
    """Raised when operand shapes do not line up."""
    module = "tensorcore"

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class NumericalError(FhmError):
    """Raised when an operation produces NaN or Inf."""
    module = "tensorcore"


class UsageError(FhmError):
    """Raised when an API is called out of contract."""
    exit_code = EXIT_CONFIG_ERROR


class ConfigurationError(FhmError):
    """Raised for invalid configuration values."""
    exit_code = EXIT_CONFIG_ERROR
    module = "config"


class SchemaError(FhmError):
    """Raised when a dataset does not match its topology."""
    exit_code = EXIT_CONFIG_ERROR
    module = "data"


class IngestionError(FhmError):
    module = "data"


class GenerationError(FhmError):
    module = "data"


class TrainingError(FhmError):
    module = "training"


class InverseError(FhmError):
    module = "inverse"


class UndefinedMetricError(FhmError):
    """Raised when a metric has no population (no edges or no chains)."""
    module = "evalmetrics"


@dataclass(frozen=True)
class FcmGraph:
    """Named nodes, signed adjacency and the metric groups partitioning the nodes.

    ``adjacency[i, j]`` is the sign of the causal edge i -> j.
    """
    node_names: List[str]
    adjacency: np.ndarray
    group_names: List[str]
    groups: List[List[int]]

    def __post_init__(self):
        adjacency = np.asarray(self.adjacency, dtype=float)
        n = len(self.node_names)
        if adjacency.shape != (n, n):
            raise DimensionError("FcmGraph", adjacency.shape, (n, n))
        if not np.all(np.isin(adjacency, (-1.0, 0.0, 1.0))):
            raise ConfigurationError("adjacency entries must be in {-1, 0, +1}")
        if np.any(np.diag(adjacency) != 0):
            raise ConfigurationError("adjacency must have a zero diagonal")
        if len(self.group_names) != len(self.groups):
            raise ConfigurationError("every metric group needs a name")
        seen = sorted(i for group in self.groups for i in group)
        if any(len(group) == 0 for group in self.groups) or seen != list(range(n)):
            raise ConfigurationError("metric groups must be non-empty and partition the nodes")
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)

    @property
    def n(self) -> int:
        return len(self.node_names)

    @property
    def mask(self) -> np.ndarray:
        """0/1 matrix of the edges, the only topology the network sees."""
        return (self.adjacency != 0).astype(float)

    def node_index(self, name: str) -> int:
        try:
            return self.node_names.index(name)
        except ValueError:
            raise UsageError(f"unknown node '{name}', known: {self.node_names}") from None

    def to_dict(self) -> Dict:
        return {
            "nodes": list(self.node_names),
            "adjacency": self.adjacency.astype(int).tolist(),
            # a list, so sort_keys on dump keeps the head order
            "groups": [{"name": name, "nodes": [self.node_names[i] for i in group]}
                       for name, group in zip(self.group_names, self.groups)],
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "FcmGraph":
        nodes = list(payload["nodes"])
        entries = payload["groups"]
        if isinstance(entries, dict):
            entries = [{"name": name, "nodes": members} for name, members in entries.items()]
        unknown = [name for entry in entries for name in entry["nodes"] if name not in nodes]
        if unknown:
            raise ConfigurationError(f"group member '{unknown[0]}' is not a node")
        group_names = [entry["name"] for entry in entries]
        groups = [[nodes.index(name) for name in entry["nodes"]] for entry in entries]
        return cls(nodes, np.asarray(payload["adjacency"], dtype=float), group_names, groups)


@dataclass
class MetricDataset:
    """Normalized observations, one column per node.

    The block DATA^(m) of metric m is the set of columns of its group; the
    target v_m is the grand mean of that block.
    """
    node_names: List[str]
    data: np.ndarray
    groups: List[List[int]]
    dropped_rows: int = 0
    targets: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or self.data.shape[1] != len(self.node_names):
            raise DimensionError("MetricDataset", self.data.shape, (None, len(self.node_names)))
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise IngestionError("dataset values must lie in [0, 1] after normalization")
        if not self.targets:
            self.targets = self.compute_targets()

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def feature_width(self) -> int:
        return N_NODE_STATS + len(self.node_names)

    def block(self, m: int, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        data = self.data if rows is None else self.data[np.asarray(rows, dtype=int)]
        return data[:, self.groups[m]]

    def compute_targets(self, rows: Optional[Sequence[int]] = None) -> List[float]:
        """v_m = (1/N) sum_i (1/d_m) sum_j DATA_ij^(m), per metric."""
        targets = []
        for m in range(len(self.groups)):
            block = self.block(m, rows)
            if block.shape[0] == 0:
                raise UsageError("cannot compute targets over zero rows")
            targets.append(float(np.mean(np.mean(block, axis=1))))
        return targets

    def node_features(self, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        """The n x (4 + n) encoder input: per-node statistics, then the node's correlation row.

        The statistics (mean, std, min, max of the column) are centred across
        nodes. The correlation row holds the Pearson correlation of the node's
        column with every column over ``rows``; constant columns correlate 0
        with everything but themselves.
        """
        data = self.data if rows is None else self.data[np.asarray(rows, dtype=int)]
        if data.shape[0] == 0:
            raise UsageError("cannot compute node features over zero rows")
        stats = np.stack([data.mean(axis=0), data.std(axis=0),
                          data.min(axis=0), data.max(axis=0)], axis=1)
        stats = stats - stats.mean(axis=0, keepdims=True)
        return np.hstack([stats, self.correlations(data)])

    @staticmethod
    def correlations(data: np.ndarray) -> np.ndarray:
        std = data.std(axis=0)
        z = (data - data.mean(axis=0)) / np.where(std > 0, std, 1.0)
        corr = np.clip(z.T @ z / data.shape[0], -1.0, 1.0)
        np.fill_diagonal(corr, 1.0)
        return corr

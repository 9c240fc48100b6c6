"""Sign-recovery scores of a learned W_fcm against a ground-truth topology, and their aggregation over folds."""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.base_models import UndefinedMetricError, UsageError

logger = logging.getLogger(__name__)

METRIC_NOTE = ("Accuracies are sign-recovery rates (direct edges and two-hop chains); "
               "weight-magnitude thresholds are not applied.")


def direct_edge_accuracy(w_learned, a_truth) -> float:
    """Fraction of true edges whose learned weight has the true sign; a zero weight is wrong."""
    w_learned, a_truth = np.asarray(w_learned, dtype=float), np.asarray(a_truth, dtype=float)
    edges = a_truth != 0
    if not edges.any():
        raise UndefinedMetricError("direct edge accuracy needs at least one edge")
    return float(np.mean(np.sign(w_learned[edges]) == np.sign(a_truth[edges])))


def chain_sign_matches(w_learned, a_truth) -> Tuple[int, int]:
    """(correct, total) over ordered chains i -> j -> k of the true graph."""
    w_learned, a_truth = np.asarray(w_learned, dtype=float), np.asarray(a_truth, dtype=float)
    correct = total = 0
    for j in range(a_truth.shape[0]):
        parents = np.flatnonzero(a_truth[:, j])
        children = np.flatnonzero(a_truth[j, :])
        if parents.size == 0 or children.size == 0:
            continue
        truth = np.sign(np.outer(a_truth[parents, j], a_truth[j, children]))
        learned = np.sign(np.outer(w_learned[parents, j], w_learned[j, children]))
        correct += int(np.count_nonzero(truth == learned))
        total += truth.size
    return correct, total


def transitive_chain_accuracy(w_learned, a_truth) -> float:
    correct, total = chain_sign_matches(w_learned, a_truth)
    if total == 0:
        raise UndefinedMetricError("transitive chain accuracy needs at least one two-hop chain (N/A)")
    return correct / total


def try_transitive_chain_accuracy(w_learned, a_truth) -> Optional[float]:
    try:
        return transitive_chain_accuracy(w_learned, a_truth)
    except UndefinedMetricError:
        return None


@dataclass(frozen=True)
class FoldScore:
    fold: int
    direct: float
    transitive: Optional[float]
    val_loss: float = 0.0


@dataclass
class EvalReport:
    folds: List[FoldScore]
    direct_mean: float
    direct_std: float
    transitive_mean: Optional[float]
    transitive_std: Optional[float]
    best_fold: int
    runtime: float = 0.0
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        """JSON view; runtime is left out so reruns stay byte-identical."""
        return {
            "folds": [{"fold": f.fold, "direct_edge_acc": f.direct,
                       "transitive_chain_acc": f.transitive, "val_loss": f.val_loss}
                      for f in self.folds],
            "direct_edge_acc": {"mean": self.direct_mean, "std": self.direct_std},
            "transitive_chain_acc": {"mean": self.transitive_mean, "std": self.transitive_std},
            "best_fold": self.best_fold,
            "config": self.config,
            "note": METRIC_NOTE,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=float)
    return float(array.mean()), float(array.std())


def aggregate(folds: Sequence[FoldScore], runtime: float = 0.0, config: Optional[Dict] = None) -> EvalReport:
    """Mean and population std per metric; the best fold has the highest direct accuracy,
    ties broken by lower validation loss then lower index."""
    if not folds:
        raise UsageError("aggregate needs at least one fold")
    direct_mean, direct_std = _mean_std([f.direct for f in folds])
    defined = [f.transitive for f in folds if f.transitive is not None]
    transitive_mean, transitive_std = _mean_std(defined) if defined else (None, None)
    best = min(folds, key=lambda f: (-f.direct, f.val_loss, f.fold))
    return EvalReport(list(folds), direct_mean, direct_std, transitive_mean, transitive_std,
                      best.fold, runtime, dict(config or {}))


def format_pct(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None or math.isnan(mean):
        return "N/A"
    return f"{100 * mean:.2f}% ± {100 * std:.2f}%"


def render_table(rows: Sequence[Tuple[str, int, EvalReport]]) -> str:
    """Aligned plain-text table with the Experiment / Nodes / Direct / Transitive columns."""
    header = ("Experiment", "Nodes", "Direct Edge Acc.", "Transitive Chain Acc.")
    body = [(name, str(nodes), format_pct(r.direct_mean, r.direct_std),
             format_pct(r.transitive_mean, r.transitive_std)) for name, nodes, r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
             for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append("")
    lines.append(f"Note: {METRIC_NOTE}")
    return "\n".join(lines) + "\n"

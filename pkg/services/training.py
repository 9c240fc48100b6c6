"""Total loss, noisy SGD with momentum, fold training and cross validation."""
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services import tensorcore as tc
from services.base_models import (
    N_NODE_STATS, ConfigurationError, FcmGraph, MetricDataset, NumericalError, TrainingError, UsageError,
)
from services.evalmetrics import EvalReport, FoldScore, aggregate, direct_edge_accuracy, try_transitive_chain_accuracy
from services.logger_config import log_event, log_operation, training_logger
from services.model import FhmParams, ForwardResult, ModelConfig, forward_full, fusion_penalty, init_params
from services.tensorcore import Var

logger = training_logger


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    t_max: int = 5
    beta: float = 0.1
    noise_scale: float = 0.01
    folds: int = 5
    seed: int = 0
    d_hidden: int = 16
    d_latent: int = 8
    threads: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")
        if self.epochs < 0 or self.t_max < 0:
            raise ConfigurationError("epochs and t_max must be >= 0")
        if self.beta < 0 or self.noise_scale < 0:
            raise ConfigurationError("beta and noise_scale must be >= 0")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    def model_for(self, graph: FcmGraph) -> ModelConfig:
        """Model shape for a graph: the encoder input is 4 + n wide and the widths never shrink below it."""
        width = N_NODE_STATS + graph.n
        hidden = max(self.d_hidden, width)
        return ModelConfig(d_hidden=hidden, d_latent=max(self.d_latent, hidden), n_features=width)


def tune_loss(outputs: Sequence[Var], targets: Sequence[float]) -> Var:
    """Sum over metrics and their nodes of (Y_m^(k) - v_m)^2."""
    if len(outputs) != len(targets):
        raise UsageError(f"{len(outputs)} head outputs for {len(targets)} targets")
    loss = None
    for y, v in zip(outputs, targets):
        term = tc.sq_norm(y - np.full(y.shape, float(v)))
        loss = term if loss is None else loss + term
    return loss


def total_loss(result: ForwardResult, targets: Sequence[float], graph: FcmGraph, beta: float) -> Var:
    loss = tune_loss(result.outputs, targets)
    if beta == 0:
        return loss
    penalty = fusion_penalty(result.leaves["W_fcm"], result.h_curr, graph.mask)
    return loss + tc.scale(penalty, beta)


def sgd_momentum_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                      velocity: Dict[str, np.ndarray], lr: float, momentum: float,
                      noise_scale: float = 0.0, rng: Optional[np.random.Generator] = None,
                      masks: Optional[Dict[str, np.ndarray]] = None
                      ) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """v <- momentum v - lr (g + eps), eps ~ N(0, noise_scale^2); p <- p + v.

    Entries where ``masks[name]`` is 0 are frozen.
    """
    masks = masks or {}
    new_params, new_velocity = {}, {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise UsageError(f"gradient shape {grad.shape} does not match parameter {name} {value.shape}")
        if noise_scale > 0:
            if rng is None:
                raise UsageError("gradient noise needs an explicit generator")
            grad = grad + rng.normal(0.0, noise_scale, size=value.shape)
        v = momentum * velocity.get(name, np.zeros_like(value)) - lr * grad
        if name in masks:
            v = v * masks[name]
        new_velocity[name] = v
        new_params[name] = value + v
    return new_params, new_velocity


def noise_schedule(noise_scale: float, epoch: int, epochs: int) -> float:
    """Linear decay from noise_scale at epoch 0 to 0 at the final epoch."""
    if epochs <= 1:
        return 0.0
    return noise_scale * (1.0 - epoch / (epochs - 1))


@dataclass
class FoldResult:
    fold: int
    params: FhmParams
    best_score: float
    train_loss: float
    val_loss: float
    w_fcm: np.ndarray
    direct_acc: float
    transitive_acc: Optional[float]
    loss_trace: List[float] = field(default_factory=list)
    score_trace: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def score(self) -> FoldScore:
        return FoldScore(self.fold, self.direct_acc, self.transitive_acc, self.val_loss)

    def to_dict(self) -> Dict:
        return {
            "fold": self.fold,
            "best_score": self.best_score if math.isfinite(self.best_score) else None,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "direct_edge_acc": self.direct_acc,
            "transitive_chain_acc": self.transitive_acc,
            "w_fcm": self.w_fcm.tolist(),
            "loss_trace": self.loss_trace,
            "score_trace": [list(entry) for entry in self.score_trace],
        }


def _evaluate(features: np.ndarray, targets: Sequence[float], graph: FcmGraph, params: FhmParams,
              config: TrainConfig) -> Tuple[float, ForwardResult]:
    result = forward_full(features, graph, params, config.t_max)
    loss = total_loss(result, targets, graph, config.beta)
    return float(result.tape.forward(loss)[0, 0]), result


def train_fold(dataset: MetricDataset, graph: FcmGraph, config: TrainConfig,
               train_rows: Sequence[int], val_rows: Sequence[int], fold: int = 0) -> FoldResult:
    """Full-batch training on the node features of ``train_rows``; targets come from those rows only."""
    if len(train_rows) == 0 or len(val_rows) == 0:
        raise UsageError("a fold needs at least one training and one validation row")
    rng = np.random.default_rng([config.seed, fold])
    params = init_params(graph, config.model_for(graph), rng)
    features = dataset.node_features(train_rows)
    targets = dataset.compute_targets(train_rows)
    masks = {"W_fcm": graph.mask}
    velocity: Dict[str, np.ndarray] = {}
    previous_w = params.w_fcm.copy()
    loss_trace = []

    for epoch in range(config.epochs):
        try:
            result = forward_full(features, graph, params, config.t_max, s_matrix=previous_w)
            loss = total_loss(result, targets, graph, config.beta)
            value = float(result.tape.forward(loss)[0, 0])
            grads = result.tape.backward(loss)
        except NumericalError as e:
            logger.error(f"fold {fold}: numerical failure at epoch {epoch}: {e}")
            raise TrainingError(f"fold {fold}: non-finite values at epoch {epoch}: {e}") from e
        if not math.isfinite(value):
            raise TrainingError(f"fold {fold}: non-finite loss at epoch {epoch}")
        loss_trace.append(value)

        named_grads = {name: grads[leaf] for name, leaf in result.leaves.items()}
        previous_w = params.w_fcm.copy()
        updated, velocity = sgd_momentum_step(
            params.arrays, named_grads, velocity, config.lr, config.momentum,
            noise_schedule(config.noise_scale, epoch, config.epochs), rng, masks)
        params = FhmParams(updated, params.n_groups)
        log_operation(logger, "epoch", f"fold={fold} epoch={epoch} loss={value:.6f}")

    try:
        train_loss, result = _evaluate(features, targets, graph, params, config)
        val_loss, _ = _evaluate(dataset.node_features(val_rows), dataset.compute_targets(val_rows),
                                graph, params, config)
    except NumericalError as e:
        raise TrainingError(f"fold {fold}: non-finite values after epoch {config.epochs}: {e}") from e

    learned = params.w_fcm * graph.mask
    fold_result = FoldResult(
        fold=fold, params=params, best_score=result.s_perf, train_loss=train_loss, val_loss=val_loss,
        w_fcm=learned, direct_acc=direct_edge_accuracy(learned, graph.adjacency),
        transitive_acc=try_transitive_chain_accuracy(learned, graph.adjacency),
        loss_trace=loss_trace, score_trace=result.trace)
    log_event(logger, "fold finished",
              f"fold={fold} val_loss={val_loss:.6f} direct={fold_result.direct_acc:.4f}")
    return fold_result


def fold_splits(n_rows: int, folds: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then contiguous blocks; returns (train_rows, val_rows) per fold."""
    if folds > n_rows:
        raise UsageError(f"cannot split {n_rows} rows into {folds} folds")
    order = np.random.default_rng(seed).permutation(n_rows)
    blocks = np.array_split(order, folds)
    return [(np.concatenate([b for j, b in enumerate(blocks) if j != k]), blocks[k])
            for k in range(folds)]


@dataclass
class CrossValidationResult:
    folds: List[FoldResult]
    report: EvalReport

    @property
    def best(self) -> FoldResult:
        return self.folds[self.report.best_fold]


def cross_validate(dataset: MetricDataset, graph: FcmGraph, config: TrainConfig) -> CrossValidationResult:
    splits = fold_splits(dataset.n_rows, config.folds, config.seed)
    started = time.perf_counter()

    def run(k):
        train_rows, val_rows = splits[k]
        return train_fold(dataset, graph, config, train_rows, val_rows, fold=k)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, range(config.folds)))
    else:
        results = [run(k) for k in range(config.folds)]

    runtime = time.perf_counter() - started
    report = aggregate([r.score for r in results], runtime=runtime, config=config_echo(config))
    log_event(logger, "cross validation finished",
              f"folds={config.folds} direct={report.direct_mean:.4f} runtime={runtime:.1f}s")
    return CrossValidationResult(results, report)


def config_echo(config: TrainConfig) -> Dict:
    echo = asdict(config)
    echo.pop("threads")
    return echo


def report_payload(cv: CrossValidationResult, experiment: str, n_nodes: int) -> Dict:
    payload = cv.report.to_dict()
    payload["experiment"] = experiment
    payload["nodes"] = n_nodes
    payload["seed"] = cv.report.config.get("seed")
    payload["fold_details"] = [r.to_dict() for r in cv.folds]
    return payload


def write_report(path: str, cv: CrossValidationResult, experiment: str, n_nodes: int) -> None:
    with open(path, "w") as f:
        json.dump(report_payload(cv, experiment, n_nodes), f, indent=2, sort_keys=True)
        f.write("\n")

"""Classical fuzzy cognitive map: s_{t+1} = f(s_t . W)."""
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Tuple

import numpy as np

from services.base_models import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

ACTIVATIONS = {
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "tanh": np.tanh,
    "identity": lambda x: x,
}

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 200


@dataclass(frozen=True)
class ClassicFcm:
    """Immutable classical FCM.

    ``clamped`` holds node indices whose activation is held at its starting
    value (exogenous input concepts); it is empty for the textbook update.
    ``steepness`` and ``threshold`` give the logistic form f(steepness * (s W - threshold));
    the defaults reduce to f(s W).
    """
    weights: np.ndarray
    activation: str = "sigmoid"
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL
    allow_self_loops: bool = False
    clamped: FrozenSet[int] = field(default_factory=frozenset)
    steepness: float = 1.0
    threshold: Optional[np.ndarray] = None

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise DimensionError("ClassicFcm", weights.shape)
        if np.any(np.abs(weights) > 1.0):
            raise ConfigurationError("FCM weights must lie in [-1, 1]")
        if not self.allow_self_loops and np.any(np.diag(weights) != 0):
            raise ConfigurationError("FCM diagonal must be zero unless self-loops are enabled")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{self.activation}', known: {sorted(ACTIVATIONS)}")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if not self.steepness > 0:
            raise ConfigurationError("steepness must be > 0")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "clamped", frozenset(int(i) for i in self.clamped))
        if self.threshold is not None:
            threshold = np.array(self.threshold, dtype=float)
            if threshold.shape != (weights.shape[0],):
                raise DimensionError("fcm threshold", threshold.shape, (weights.shape[0],))
            threshold.setflags(write=False)
            object.__setattr__(self, "threshold", threshold)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def pre_activation(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.shape != (self.n,):
            raise DimensionError("fcm step", state.shape, (self.n,))
        return state @ self.weights

    def step(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        pre = self.pre_activation(state)
        if self.threshold is not None:
            pre = pre - self.threshold
        nxt = ACTIVATIONS[self.activation](self.steepness * pre)
        if self.clamped:
            idx = sorted(self.clamped)
            nxt[idx] = state[idx]
        return nxt

    def residual(self, state) -> float:
        """||f(sW) - s||_inf."""
        state = np.asarray(state, dtype=float)
        return float(np.max(np.abs(self.step(state) - state)))

    def trajectory(self, start) -> Tuple[List[np.ndarray], bool]:
        """All visited states, start included, and whether the run converged.

        Converged means the last state is itself a fixed point to within
        ``tol``, not just close to the state before it.
        """
        state = np.asarray(start, dtype=float)
        if state.shape != (self.n,):
            raise DimensionError("fcm start", state.shape, (self.n,))
        states = [state]
        for _ in range(self.max_iters):
            nxt = self.step(state)
            states.append(nxt)
            if self.residual(nxt) < self.tol:
                return states, True
            state = nxt
        return states, False

    def run_to_fixed_point(self, start) -> Tuple[np.ndarray, int, bool]:
        states, converged = self.trajectory(start)
        iterations = len(states) - 1
        if not converged:
            logger.debug(f"FCM did not converge in {self.max_iters} iterations")
        return states[-1], iterations, converged

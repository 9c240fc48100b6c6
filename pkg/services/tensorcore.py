"""Dense matrix arithmetic on numpy arrays with a reverse-mode tape.

Every value is a 2-D float64 array. Operations run eagerly and record a
``Var`` on the tape that owns their inputs; ``Tape.backward`` walks the tape in
reverse creation order and accumulates adjoints.

Kink convention: relu, abs and sign have subgradient 0 at exactly 0.
``sign`` is a stop-gradient, so ``x + sign(x)`` passes gradient 1 to x.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from services.base_models import DimensionError, NumericalError, UsageError

logger = logging.getLogger(__name__)


def as_matrix(value) -> np.ndarray:
    """Coerce scalars, vectors and nested lists to a 2-D float64 array (vectors become columns)."""
    array = np.array(value, dtype=float)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(-1, 1)
    elif array.ndim != 2:
        raise DimensionError("as_matrix", array.shape)
    return array


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op} produced non-finite values")
    return value


class Var:
    """One node of the tape: the cached forward value plus how to push adjoints to its parents."""

    __slots__ = ("tape", "index", "op", "value", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, tape: "Tape", op: str, value: np.ndarray, parents: Sequence["Var"] = (),
                 backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.index = tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, self.tape.lift(other))

    def __radd__(self, other):
        return add(self.tape.lift(other), self)

    def __sub__(self, other):
        return sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return sub(self.tape.lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, self.tape.lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self.tape.lift(other))

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records operations in creation order. Not thread-safe; use one tape per thread."""

    def __init__(self):
        self.nodes: List[Var] = []
        self._forwarded = set()

    def _record(self, var: Var) -> int:
        self.nodes.append(var)
        return len(self.nodes) - 1

    def leaf(self, value, name: Optional[str] = None, requires_grad: bool = True) -> Var:
        array = _check_finite("leaf", as_matrix(value))
        return Var(self, "leaf", array, requires_grad=requires_grad, name=name)

    def constant(self, value, name: Optional[str] = None) -> Var:
        return self.leaf(value, name=name, requires_grad=False)

    def lift(self, value) -> Var:
        if isinstance(value, Var):
            if value.tape is not self:
                raise UsageError("cannot mix variables from different tapes")
            return value
        return self.constant(value)

    def forward(self, expr: Var) -> np.ndarray:
        """Return the value of ``expr`` and mark it as ready for ``backward``."""
        if expr.tape is not self:
            raise UsageError("expression does not belong to this tape")
        self._forwarded.add(expr.index)
        return expr.value

    def backward(self, expr: Var, seed=None) -> Dict[Var, np.ndarray]:
        """Gradient of sum(seed * expr) with respect to every learnable leaf.

        Leaves that do not influence ``expr`` get a zero gradient.
        """
        if expr.tape is not self:
            raise UsageError("expression does not belong to this tape")
        if expr.index not in self._forwarded:
            raise UsageError("backward called before forward on this expression")
        seed = np.ones_like(expr.value) if seed is None else as_matrix(seed)
        if seed.shape != expr.shape:
            raise DimensionError("backward seed", seed.shape, expr.shape)

        adjoints: Dict[int, np.ndarray] = {expr.index: seed.copy()}
        for var in reversed(self.nodes[:expr.index + 1]):
            grad = adjoints.get(var.index)
            if grad is None or var.backward_fn is None or not var.requires_grad:
                continue
            for parent, parent_grad in zip(var.parents, var.backward_fn(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.index in adjoints:
                    adjoints[parent.index] = adjoints[parent.index] + parent_grad
                else:
                    adjoints[parent.index] = parent_grad

        return {
            var: adjoints.get(var.index, np.zeros_like(var.value))
            for var in self.nodes
            if var.op == "leaf" and var.requires_grad
        }


def _same_tape(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for var in vars_[1:]:
        if var.tape is not tape:
            raise UsageError("cannot mix variables from different tapes")
    return tape


def _unary(op: str, x: Var, value: np.ndarray, backward_fn) -> Var:
    return Var(x.tape, op, _check_finite(op, value), (x,), backward_fn)


def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return Var(tape, "matmul", _check_finite("matmul", av @ bv), (a, b),
               lambda g: (g @ bv.T, av.T @ g))


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)
    return Var(tape, "add", _check_finite("add", a.value + b.value), (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError("sub", a.shape, b.shape)
    return Var(tape, "sub", _check_finite("sub", a.value - b.value), (a, b), lambda g: (g, -g))


def hadamard(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError("hadamard", a.shape, b.shape)
    av, bv = a.value, b.value
    return Var(tape, "hadamard", _check_finite("hadamard", av * bv), (a, b),
               lambda g: (g * bv, g * av))


def add_row(x: Var, row: Var) -> Var:
    """x + row broadcast over the rows of x (bias addition)."""
    tape = _same_tape(x, row)
    if row.shape[0] != 1 or row.shape[1] != x.shape[1]:
        raise DimensionError("add_row", x.shape, row.shape)
    return Var(tape, "add_row", _check_finite("add_row", x.value + row.value), (x, row),
               lambda g: (g, g.sum(axis=0, keepdims=True)))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return _unary("tanh", x, y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Var) -> Var:
    v = x.value
    # split on the sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary("sigmoid", x, y, lambda g: (g * y * (1.0 - y),))


def softsign(x: Var) -> Var:
    denom = 1.0 + np.abs(x.value)
    return _unary("softsign", x, x.value / denom, lambda g: (g / (denom * denom),))


def relu(x: Var) -> Var:
    active = (x.value > 0).astype(float)
    return _unary("relu", x, x.value * active, lambda g: (g * active,))


def sign(x: Var) -> Var:
    """Elementwise sign; contributes no gradient upstream."""
    return _unary("sign", x, np.sign(x.value), lambda g: (None,))


def absolute(x: Var) -> Var:
    s = np.sign(x.value)
    return _unary("abs", x, np.abs(x.value), lambda g: (g * s,))


def scale(x: Var, factor: float) -> Var:
    return _unary("scale", x, x.value * factor, lambda g: (g * factor,))


def transpose(x: Var) -> Var:
    return _unary("transpose", x, x.value.T.copy(), lambda g: (g.T,))


def total(x: Var) -> Var:
    """Sum of all entries as a 1x1 matrix."""
    shape = x.shape
    return _unary("sum", x, np.array([[x.value.sum()]]),
                  lambda g: (np.full(shape, g[0, 0]),))


def mean(x: Var) -> Var:
    shape, size = x.shape, x.value.size
    return _unary("mean", x, np.array([[x.value.mean()]]),
                  lambda g: (np.full(shape, g[0, 0] / size),))


def sq_norm(x: Var) -> Var:
    v = x.value
    return _unary("sq_norm", x, np.array([[np.sum(v * v)]]), lambda g: (2.0 * g[0, 0] * v,))


def l2_norm(x: Var) -> Var:
    v = x.value
    norm = float(np.sqrt(np.sum(v * v)))

    def backward(g):
        if norm == 0.0:
            return (np.zeros_like(v),)
        return (g[0, 0] * v / norm,)

    return _unary("l2_norm", x, np.array([[norm]]), backward)


def take_rows(x: Var, rows: Iterable[int]) -> Var:
    idx = np.asarray(list(rows), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("take_rows", x.shape, (int(idx.max()) + 1, x.shape[1]))
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _unary("take_rows", x, x.value[idx], backward)


def row_norms(x: Var) -> Var:
    """L2 norm of each row, as an n x 1 column."""
    v = x.value
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)

    def backward(g):
        return (np.where(norms > 0, g * v / safe, 0.0),)

    return _unary("row_norms", x, norms, backward)


def row_normalize(x: Var) -> Var:
    """Each row divided by its L2 norm; all-zero rows stay zero."""
    v = x.value
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    y = np.where(norms > 0, v / safe, 0.0)

    def backward(g):
        radial = np.sum(g * y, axis=1, keepdims=True)
        return (np.where(norms > 0, (g - y * radial) / safe, 0.0),)

    return _unary("row_normalize", x, y, backward)

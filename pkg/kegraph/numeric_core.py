"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a ComputationTape is active::

    with ComputationTape() as tape:
        params = {"W": Tensor(w)}
        loss = sum_all(relu(matmul(x, params["W"])))
    grads = backward(tape, loss, params)

Broadcasting is limited to adding a (1, d) row to an (n, d) matrix.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from kegraph.errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

_ACTIVE_TAPES = []


class Tensor:
    """Immutable float64 array; every value is finite."""

    __slots__ = ("values",)

    def __init__(self, values, _copy=True):
        array = np.array(values, dtype=np.float64, copy=_copy) if _copy \
            else np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError(f"Non-finite value in tensor of shape {array.shape}")
        array.setflags(write=False)
        self.values = array

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Record(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    forward: Callable
    backward: Callable


@dataclass
class ComputationTape:
    """Primitive operations in execution order."""

    records: list = field(default_factory=list)

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def replay(self):
        """Re-run every recorded forward on its recorded inputs."""
        return [record.forward(*[t.values for t in record.inputs]) for record in self.records]


def current_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op, inputs, forward, backward):
    inputs = tuple(_as_tensor(x) for x in inputs)
    output = Tensor(forward(*[t.values for t in inputs]), _copy=False)
    tape = current_tape()
    if tape is not None:
        tape.records.append(Record(op, inputs, output, forward, backward))
    return output


def _require_matrix(op, *tensors):
    for t in tensors:
        if t.values.ndim != 2:
            raise DimensionError(f"{op} expects 2-d operands, got shape {t.shape}")


# =============================================================================
# Primitives
# =============================================================================

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_matrix("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _apply("matmul", (a, b), np.matmul,
                  lambda g, x, y, out: (g @ y.T, x.T @ g))


def add(a, b):
    """Elementwise sum; ``b`` may also be a (1, d) row added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _apply("add", (a, b), np.add, lambda g, x, y, out: (g, g))
    if a.values.ndim == 2 and b.shape == (1, a.shape[1]):
        return _apply("add_row", (a, b), np.add,
                      lambda g, x, y, out: (g, g.sum(axis=0, keepdims=True)))
    raise DimensionError(f"add shape mismatch {a.shape} + {b.shape}")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch {a.shape} - {b.shape}")
    return _apply("sub", (a, b), np.subtract, lambda g, x, y, out: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch {a.shape} * {b.shape}")
    return _apply("mul", (a, b), np.multiply, lambda g, x, y, out: (g * y, g * x))


def scale(a, factor):
    factor = float(factor)
    return _apply("scale", (a,), lambda x: x * factor, lambda g, x, out: (g * factor,))


def shift(a, offset):
    offset = float(offset)
    return _apply("shift", (a,), lambda x: x + offset, lambda g, x, out: (g,))


def sparse_aggregate(weights, h):
    """Row v of the result is sum_u weights[v, u] * h[u], neighbours in ascending id."""
    h = _as_tensor(h)
    _require_matrix("sparse_aggregate", h)
    weights = sp.csr_matrix(weights, dtype=np.float64)
    weights.sort_indices()
    if weights.shape[1] != h.shape[0]:
        raise DimensionError(f"sparse_aggregate shape mismatch {weights.shape} @ {h.shape}")
    transposed = weights.T.tocsr()
    transposed.sort_indices()
    return _apply("sparse_aggregate", (h,), lambda x: np.asarray(weights @ x),
                  lambda g, x, out: (np.asarray(transposed @ g),))


def relu(a):
    return _apply("relu", (a,), lambda x: np.maximum(x, 0.0),
                  lambda g, x, out: (g * (x > 0),))


def tanh(a):
    return _apply("tanh", (a,), np.tanh, lambda g, x, out: (g * (1.0 - out * out),))


def sigmoid(a):
    return _apply("sigmoid", (a,), expit, lambda g, x, out: (g * out * (1.0 - out),))


def log(a):
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        raise NumericError(f"log of non-positive value (min {a.values.min():.3g})")
    return _apply("log", (a,), np.log, lambda g, x, out: (g / x,))


def absolute(a):
    return _apply("abs", (a,), np.abs, lambda g, x, out: (g * np.sign(x),))


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        raise NumericError("sqrt gradient undefined at non-positive values")
    return _apply("sqrt", (a,), np.sqrt, lambda g, x, out: (g * 0.5 / out,))


def _softmax_forward(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a):
    """Softmax along the last axis (each row of a matrix)."""
    return _apply("softmax", (a,), _softmax_forward,
                  lambda g, x, out: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def mean_rows(a):
    """(n, d) -> (1, d) column means."""
    a = _as_tensor(a)
    _require_matrix("mean_rows", a)
    n = a.shape[0]
    return _apply("mean_rows", (a,), lambda x: x.mean(axis=0, keepdims=True),
                  lambda g, x, out: (np.repeat(g / n, n, axis=0),))


def sum_all(a):
    """Sum of every entry as a 0-d tensor."""
    return _apply("sum_all", (a,), lambda x: np.asarray(x.sum()),
                  lambda g, x, out: (np.full(x.shape, float(g)),))


def mean_all(a):
    a = _as_tensor(a)
    return scale(sum_all(a), 1.0 / max(a.values.size, 1))


def row_sum(a):
    """(n, d) -> (n, 1)."""
    a = _as_tensor(a)
    _require_matrix("row_sum", a)
    return _apply("row_sum", (a,), lambda x: x.sum(axis=1, keepdims=True),
                  lambda g, x, out: (np.repeat(g, x.shape[1], axis=1),))


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    _require_matrix("concat", *tensors)
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(f"concat shape mismatch {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _apply("concat", tensors, lambda *xs: np.concatenate(xs, axis=axis),
                  lambda g, *rest: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a, index):
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def grad(g, x, out):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return _apply("take_rows", (a,), lambda x: x[index], grad)


def take_columns(a, columns):
    a = _as_tensor(a)
    _require_matrix("take_columns", a)
    columns = np.asarray(columns, dtype=np.int64)

    def grad(g, x, out):
        full = np.zeros_like(x)
        np.add.at(full, (slice(None), columns), g)
        return (full,)

    return _apply("take_columns", (a,), lambda x: x[:, columns], grad)


def blend(tensors, weights):
    """sum_k weights[0, k] * tensors[k] for a (1, K) weight row."""
    tensors = [_as_tensor(t) for t in tensors]
    weights = _as_tensor(weights)
    k = len(tensors)
    if k == 0:
        raise ContractError("blend needs at least one tensor")
    if weights.shape != (1, k):
        raise DimensionError(f"blend weights shape {weights.shape}, expected {(1, k)}")
    if len({t.shape for t in tensors}) != 1:
        raise DimensionError(f"blend shape mismatch {[t.shape for t in tensors]}")

    def forward(*xs):
        w, mats = xs[-1], xs[:-1]
        total = w[0, 0] * mats[0]
        for i in range(1, len(mats)):
            total = total + w[0, i] * mats[i]
        return total

    def grad(g, *rest):
        xs = rest[:-1]
        w, mats = xs[-1], xs[:-1]
        mat_grads = tuple(w[0, i] * g for i in range(len(mats)))
        weight_grad = np.array([[float((g * m).sum()) for m in mats]])
        return mat_grads + (weight_grad,)

    return _apply("blend", tuple(tensors) + (weights,), forward, grad)


def clip(a, low, high):
    """Clamp to [low, high]; gradient is zero where the clamp is active."""
    return _apply("clip", (a,), lambda x: np.clip(x, low, high),
                  lambda g, x, out: (g * ((x > low) & (x < high)),))


# =============================================================================
# Reverse pass
# =============================================================================

def backward(tape, loss, params):
    """
    Gradients of a scalar loss with respect to ``params``.

    Args:
        tape: The tape the loss was computed under.
        loss: 0-d (or single-element) Tensor.
        params: dict name -> Tensor, or a sequence of Tensors.

    Returns:
        Gradients with the same container type as ``params``. Parameters the
        loss does not depend on get zero gradients.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.values)}
    for record in reversed(tape.records):
        g = grads.get(id(record.output))
        if g is None:
            continue
        input_grads = record.backward(g, *[t.values for t in record.inputs], record.output.values)
        for tensor, input_grad in zip(record.inputs, input_grads):
            if input_grad is None:
                continue
            key = id(tensor)
            grads[key] = input_grad if key not in grads else grads[key] + input_grad

    def lookup(tensor):
        g = grads.get(id(tensor))
        return np.zeros_like(tensor.values) if g is None else np.array(g, dtype=np.float64)

    if isinstance(params, dict):
        return {name: lookup(t) for name, t in params.items()}
    return [lookup(t) for t in params]


# =============================================================================
# Optimizers
# =============================================================================

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"Unknown optimizer '{self.kind}', use 'sgd' or 'adam'")
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")


def optimizer_step(params, grads, state, config):
    """
    One SGD or Adam update.

    Args:
        params: dict name -> ndarray.
        grads: dict name -> ndarray of matching shapes.
        state: dict from a previous call, or None.
        config: OptimizerConfig.

    Returns:
        (new params dict, new state dict); inputs are not modified.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"Gradient for '{name}' has shape {g.shape}, "
                                 f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient for '{name}'")

    if config.kind == "sgd":
        updated = {name: value - config.learning_rate * grads[name] if name in grads else value.copy()
                   for name, value in params.items()}
        return updated, {"t": (state or {}).get("t", 0) + 1}

    state = state or {"t": 0, "m": {}, "v": {}}
    t = state["t"] + 1
    m, v = dict(state["m"]), dict(state["v"])
    updated = {}
    for name, value in params.items():
        if name not in grads:
            updated[name] = value.copy()
            continue
        g = grads[name]
        m[name] = config.beta1 * m.get(name, np.zeros_like(g)) + (1 - config.beta1) * g
        v[name] = config.beta2 * v.get(name, np.zeros_like(g)) + (1 - config.beta2) * g * g
        m_hat = m[name] / (1 - config.beta1 ** t)
        v_hat = v[name] / (1 - config.beta2 ** t)
        updated[name] = value - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return updated, {"t": t, "m": m, "v": v}


class Optimizer:
    """Stateful wrapper around optimizer_step."""

    def __init__(self, config):
        self.config = config
        self.state = None

    def step(self, params, grads):
        params, self.state = optimizer_step(params, grads, self.state, self.config)
        return params


# =============================================================================
# Finite differences
# =============================================================================

@dataclass
class GradientCheckResult:
    max_abs_error: float
    max_rel_error: float
    passed: bool


def gradient_check(loss_fn, params, step=1e-5, rtol=1e-4, atol=1e-7):
    """
    Compare analytic gradients with central finite differences.

    Args:
        loss_fn: Callable taking dict name -> Tensor and returning a scalar Tensor.
        params: dict name -> ndarray evaluation point.

    Returns:
        GradientCheckResult; an entry passes when |a - n| <= atol + rtol * max(|a|, |n|).
    """
    params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    with ComputationTape() as tape:
        tensors = {name: Tensor(value) for name, value in params.items()}
        loss = loss_fn(tensors)
    analytic = backward(tape, loss, tensors)

    max_abs, max_rel, passed = 0.0, 0.0, True
    for name, value in params.items():
        for index in np.ndindex(value.shape):
            def evaluate(delta):
                shifted = {k: v.copy() for k, v in params.items()}
                shifted[name][index] += delta
                return loss_fn({k: Tensor(v) for k, v in shifted.items()}).item()

            numeric = (evaluate(step) - evaluate(-step)) / (2 * step)
            a = analytic[name][index]
            error = np.abs(a - numeric)
            scale_ = max(np.abs(a), np.abs(numeric))
            max_abs = max(max_abs, float(error))
            if scale_ > 0:
                max_rel = max(max_rel, float(error / scale_))
            if error > atol + rtol * scale_:
                passed = False
    return GradientCheckResult(max_abs, max_rel, passed)

"""Minimal dense-tensor substrate with reverse-mode autodiff and Adam.

Tensors wrap numpy arrays (float32 by default) and record a backward closure
per operation; calling ``backward()`` on a scalar output walks the graph in
reverse topological order and accumulates gradients into every node that
requires them. Only the handful of layer types used by this repo are
implemented: affine maps, SiLU, row-wise softmax and layer norm, grouped mean
pooling, row gathering, column concatenation, and the reductions needed to
express squared-error and cross-entropy losses.

Durable parameters live in a ParamSet (name -> array + trainable flag); a
fresh graph is built from it for every evaluation, so the stored arrays are
never aliased into a half-finished computation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError
from .rng import stream

DEFAULT_DTYPE = np.float32


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails; plain 1/(1+exp(-x)) overflows for large negative x.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """One node of a computation graph, wrapping a numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _init_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        """Reverse-mode sweep from this scalar node."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = None
    out._parents = tuple(p for p in parents if p.requires_grad)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data + b.data, (a, b))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += _unbroadcast(out.grad, a.data.shape)
        if b.requires_grad:
            b._init_grad()
            b.grad += _unbroadcast(out.grad, b.data.shape)

    out._backward = backward
    return out


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data - b.data, (a, b))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += _unbroadcast(out.grad, a.data.shape)
        if b.requires_grad:
            b._init_grad()
            b.grad -= _unbroadcast(out.grad, b.data.shape)

    out._backward = backward
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data * b.data, (a, b))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        if b.requires_grad:
            b._init_grad()
            b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    out._backward = backward
    return out


def scale(a: Tensor, k: float) -> Tensor:
    out = _node(a.data * k, (a,))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += out.grad * k

    out._backward = backward
    return out


def square(a: Tensor) -> Tensor:
    out = _node(a.data * a.data, (a,))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += out.grad * (2.0 * a.data)

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += out.grad @ b.data.T
        if b.requires_grad:
            b._init_grad()
            b.grad += a.data.T @ out.grad

    out._backward = backward
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = _node(a.data * s, (a,))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += out.grad * (s * (1.0 + a.data * (1.0 - s)))

    out._backward = backward
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _node(y, (a,))

    def backward():
        if a.requires_grad:
            a._init_grad()
            dot = (out.grad * y).sum(axis=1, keepdims=True)
            a.grad += y * (out.grad - dot)

    out._backward = backward
    return out


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer norm of a 2-d tensor, with learned gain and bias."""
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _node(gain.data * xhat + bias.data, (x, gain, bias))

    def backward():
        g = out.grad
        if gain.requires_grad:
            gain._init_grad()
            gain.grad += _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            bias._init_grad()
            bias.grad += _unbroadcast(g, bias.data.shape)
        if x.requires_grad:
            x._init_grad()
            gg = g * gain.data
            n = x.data.shape[1]
            x.grad += inv * (
                gg
                - gg.mean(axis=1, keepdims=True)
                - xhat * (gg * xhat).sum(axis=1, keepdims=True) / n
            )

    out._backward = backward
    return out


def mean_pool_rows(x: Tensor, group: int) -> Tensor:
    """Mean over each consecutive block of ``group`` rows: (B*g, d) -> (B, d)."""
    rows, d = x.data.shape
    if rows % group != 0:
        raise ValueError(f"row count {rows} not divisible by group {group}")
    pooled = x.data.reshape(rows // group, group, d).mean(axis=1)
    out = _node(pooled, (x,))

    def backward():
        if x.requires_grad:
            x._init_grad()
            x.grad += np.repeat(out.grad, group, axis=0) / group

    out._backward = backward
    return out


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by integer index (repeats allowed); grads scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"gather index out of range for {x.data.shape[0]} rows")
    out = _node(x.data[idx], (x,))

    def backward():
        if x.requires_grad:
            x._init_grad()
            np.add.at(x.grad, idx, out.grad)

    out._backward = backward
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors vertically (same column count)."""
    parts = [_as_tensor(p) for p in parts]
    out = _node(np.concatenate([p.data for p in parts], axis=0), parts)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._init_grad()
                p.grad += out.grad[lo:hi]

    out._backward = backward
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors side by side (same row count)."""
    parts = [_as_tensor(p) for p in parts]
    out = _node(np.concatenate([p.data for p in parts], axis=1), parts)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._init_grad()
                p.grad += out.grad[:, lo:hi]

    out._backward = backward
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,))

    def backward():
        if a.requires_grad:
            a._init_grad()
            a.grad += out.grad  # broadcasts the scalar

    out._backward = backward
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row-wise softmax."""
    y = np.asarray(labels, dtype=np.int64)
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    nll = -logprobs[np.arange(n), y].mean()
    out = _node(np.asarray(nll, dtype=logits.data.dtype), (logits,))

    def backward():
        if logits.requires_grad:
            logits._init_grad()
            soft = np.exp(logprobs)
            soft[np.arange(n), y] -= 1.0
            logits.grad += out.grad * soft / n

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Parameter storage


class ParamSet:
    """Named parameter arrays plus a per-name trainable flag.

    The arrays stored here are the durable model state; ``tensors()`` mints a
    fresh dict of graph leaves from them for each evaluation.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self._values[name] = arr
        self._trainable[name] = bool(trainable)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self) -> list[str]:
        return list(self._values.keys())

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        if name not in self._values:
            raise KeyError(name)
        self._values[name] = np.asarray(value, dtype=self._values[name].dtype)

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def set_trainable(self, mask: dict[str, bool]) -> None:
        unknown = set(mask) - set(self._values)
        if unknown:
            raise KeyError(f"unknown parameter names in mask: {sorted(unknown)}")
        for name, flag in mask.items():
            self._trainable[name] = bool(flag)

    def freeze_all(self) -> None:
        for name in self._trainable:
            self._trainable[name] = False

    def tensors(self) -> dict[str, Tensor]:
        return {
            name: Tensor(value, requires_grad=self._trainable[name])
            for name, value in self._values.items()
        }

    def copy(self) -> "ParamSet":
        other = ParamSet()
        for name, value in self._values.items():
            other.add(name, value.copy(), self._trainable[name])
        return other

    def astype(self, dtype) -> "ParamSet":
        other = ParamSet()
        for name, value in self._values.items():
            other._values[name] = value.astype(dtype)
            other._trainable[name] = self._trainable[name]
        return other


# ---------------------------------------------------------------------------
# Graph evaluation

GraphFn = Callable[[dict[str, Tensor], list[Tensor]], "Tensor | Sequence[Tensor]"]


def eval_with_grads(
    graph: GraphFn, params: ParamSet, inputs: Iterable[np.ndarray] = ()
) -> tuple[list[np.ndarray], dict[str, np.ndarray]]:
    """Run ``graph`` forward and backward.

    ``graph`` receives the parameter tensors and the inputs (wrapped as
    constant tensors) and returns one tensor or a sequence whose first element
    is the scalar loss to differentiate. Returns the output arrays and a dict
    of gradients covering exactly the trainable parameter names.
    """
    leaves = params.tensors()
    input_tensors = [Tensor(np.asarray(x)) for x in inputs]
    result = graph(leaves, input_tensors)
    outputs = [result] if isinstance(result, Tensor) else list(result)
    if not outputs:
        raise ValueError("graph returned no outputs")
    loss = outputs[0]
    if loss.data.size != 1:
        raise ValueError(f"designated loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite loss value")
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for name in params.trainable_names():
        g = leaves[name].grad
        if g is None:
            g = np.zeros_like(leaves[name].data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        grads[name] = g
    return [o.data for o in outputs], grads


def _forward_loss(graph: GraphFn, params: ParamSet, inputs: list[Tensor]) -> float:
    leaves = {
        name: Tensor(params.value(name), requires_grad=False)
        for name in params.names()
    }
    result = graph(leaves, inputs)
    loss = result if isinstance(result, Tensor) else result[0]
    return float(loss.data)


def gradient_check(
    graph: GraphFn,
    params: ParamSet,
    inputs: Iterable[np.ndarray] = (),
    probe_count: int = 32,
    h: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes ``probe_count`` coordinates chosen uniformly at random across all
    trainable parameters. Runs in float64 internally: at h=1e-3 the float32
    rounding floor would dominate the comparison.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    p64 = params.astype(np.float64)
    inputs64 = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    _, grads = eval_with_grads(graph, p64, [t.data for t in inputs64])

    coords: list[tuple[str, int]] = []
    for name in p64.trainable_names():
        coords.extend((name, i) for i in range(p64.value(name).size))
    if not coords:
        raise ValueError("no trainable coordinates to probe")
    rng = stream(seed, "gradcheck")
    picks = rng.choice(len(coords), size=min(probe_count, len(coords)), replace=False)

    worst = 0.0
    for pick in picks:
        name, flat_index = coords[int(pick)]
        flat = p64.value(name).reshape(-1)
        saved = flat[flat_index]
        flat[flat_index] = saved + h
        f_plus = _forward_loss(graph, p64, inputs64)
        flat[flat_index] = saved - h
        f_minus = _forward_loss(graph, p64, inputs64)
        flat[flat_index] = saved
        fd = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[flat_index])
        err = abs(analytic - fd) / max(1.0, abs(analytic))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam optimizer


class AdamState:
    """Per-parameter moment accumulators and hyperparameters for Adam."""

    def __init__(
        self,
        params: ParamSet,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name in params.trainable_names():
            self.m[name] = np.zeros_like(params.value(name))
            self.v[name] = np.zeros_like(params.value(name))


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` must cover exactly the trainable names; supplying a gradient for
    a frozen tensor (or omitting a trainable one) is a contract violation.
    Raises NonFiniteError if any updated value is NaN/Inf.
    """
    trainable = set(params.trainable_names())
    supplied = set(grads)
    if supplied != trainable:
        extra = sorted(supplied - trainable)
        missing = sorted(trainable - supplied)
        raise ValueError(
            f"gradient names do not match trainable set (extra={extra}, missing={missing})"
        )
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(trainable):
        g = grads[name]
        value = params.value(name)
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {value.shape} for {name!r}")
        if name not in state.m:  # params grown or unfrozen since state creation
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_value = value - update.astype(value.dtype, copy=False)
        if not np.all(np.isfinite(new_value)):
            raise NonFiniteError(f"non-finite values in {name!r} after optimizer step")
        params.set_value(name, new_value)

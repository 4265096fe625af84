"""Dense-array reverse-mode differentiation, MLPs, Adam and checkpoints.

Arrays are plain ``numpy.ndarray`` objects in float64. A :class:`Node` wraps
one array together with the rule that propagates its gradient back to its
parents; graphs are rebuilt on every forward pass.
"""

from __future__ import annotations

import builtins
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named parameter arrays with paired gradient slots and Adam moments."""

    def __init__(self) -> None:
        self.entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=DTYPE)
        self.entries[name] = ParamEntry(
            value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value)
        )

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grad(self) -> None:
        for e in self.entries.values():
            e.grad.fill(0.0)

    def values(self) -> dict[str, np.ndarray]:
        return {k: e.value for k, e in self.entries.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: e.grad for k, e in self.entries.items()}

    def load_values(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, e in self.entries.items():
            arr = arrays[prefix + name]
            if arr.shape != e.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {e.value.shape}")
            e.value[...] = arr

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, e in self.entries.items():
            e.value[...] = other.entries[name].value

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, e in self.entries.items():
            out.add(name, e.value.copy())
        return out

    def num_params(self) -> int:
        return builtins.sum(e.value.size for e in self.entries.values())


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


class Node:
    """One value in a define-by-run computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "op", "entry")

    def __init__(self, value, parents=(), backward_rule=None, op="const", entry=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.op = op
        self.entry = entry

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.entry is not None or self.backward_rule is not None

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def const(value) -> Node:
    return Node(np.asarray(value, dtype=DTYPE))


def param(store: ParamStore, name: str) -> Node:
    entry = store.entries[name]
    return Node(entry.value, op="param", entry=entry)


def detach(x: Node) -> Node:
    return Node(x.value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value, parents, rule, op) -> Node:
    if not any(p.requires_grad for p in parents):
        return Node(value, op=op)
    return Node(value, parents, rule, op)


# Backward rules take (out_grad, out_value) and return one gradient per parent,
# or None for a parent that needs none.


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g, o: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g, o: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g, o: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                 "mul")


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    return _make(av / bv, (a, b),
                 lambda g, o: (_unbroadcast(g / bv, av.shape),
                               _unbroadcast(-g * av / (bv * bv), bv.shape)),
                 "div")


def neg(a) -> Node:
    a = _as_node(a)
    return _make(-a.value, (a,), lambda g, o: (-g,), "neg")


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g, o: (g @ bv.T, av.T @ g), "matmul")


def linear(x, w, b) -> Node:
    """Fused ``x @ w + b`` for a batch of row vectors."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    xv, wv = x.value, w.value

    def rule(g, o):
        return (g @ wv.T if x.requires_grad else None,
                xv.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _make(xv @ wv + b.value, (x, w, b), rule, "linear")


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g, o: (g * (1.0 - o * o),), "tanh")


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g, o: (g * mask,), "relu")


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g, o: (g * o,), "exp")


def log(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g, o: (g / av,), "log")


def sqrt(a) -> Node:
    a = _as_node(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g, o: (g * 0.5 / o,), "sqrt")


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(av * av, (a,), lambda g, o: (2.0 * g * av,), "square")


def softplus(a) -> Node:
    a = _as_node(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g, o: (g * _sigmoid(av),), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def clip(a, lo: float, hi: float) -> Node:
    """Hard clamp; gradient passes only where the input is inside the range."""
    a = _as_node(a)
    av = a.value
    mask = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g, o: (g * mask,), "clip")


def minimum(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    pick_a = a.value <= b.value
    return _make(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g, o: (_unbroadcast(g * pick_a, a.shape),
                               _unbroadcast(g * ~pick_a, b.shape)),
                 "minimum")


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    """Sum over ``axis``; a full reduction returns shape (1,)."""
    a = _as_node(a)
    shape = a.shape
    if axis is None:
        out = np.reshape(a.value.sum(), (1,))
        return _make(out, (a,), lambda g, o: (np.full(shape, g[0]),), "sum")

    def rule(g, o):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(nodes: Sequence, axis: int = 1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
                 lambda g, o: tuple(np.split(g, splits, axis=axis)), "concat")


def take(a, idx) -> Node:
    a = _as_node(a)
    shape = a.shape

    def rule(g, o):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), rule, "take")


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g, o: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ops whose backward rule is negated; only the gradient-check negative control uses this
_FLIPPED_OPS: set[str] = set()


class flipped_rule:
    """Context manager that negates one op's backward rule."""

    def __init__(self, op: str) -> None:
        self.op = op

    def __enter__(self):
        _FLIPPED_OPS.add(self.op)
        return self

    def __exit__(self, *exc):
        _FLIPPED_OPS.discard(self.op)
        return False


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's grad slot."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    _check_finite(loss.value, "loss")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.entry is not None:
            node.entry.grad += g
        if node.backward_rule is None:
            continue
        pgrads = node.backward_rule(g, node.value)
        if _FLIPPED_OPS and node.op in _FLIPPED_OPS:
            pgrads = tuple(None if pg is None else -pg for pg in pgrads)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(pg, dtype=DTYPE)
            else:
                p.grad = p.grad + pg
        node.grad = None


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------

_ACTIVATIONS = {
    "tanh": (tanh, np.tanh),
    "relu": (relu, lambda x: np.maximum(x, 0.0)),
    "linear": (lambda x: x, lambda x: x),
}


@dataclass(frozen=True)
class MlpSpec:
    name: str
    input_width: int
    hidden: tuple[int, ...]
    output_width: int
    hidden_act: str = "tanh"
    output_act: str = "linear"

    def __post_init__(self) -> None:
        widths = (self.input_width, *self.hidden, self.output_width)
        if any(w < 1 for w in widths):
            raise ValueError(f"{self.name}: all widths must be >= 1, got {widths}")
        for act in (self.hidden_act, self.output_act):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_width, *self.hidden, self.output_width)

    def layer_names(self) -> list[tuple[str, str]]:
        return [(f"{self.name}.l{i}.w", f"{self.name}.l{i}.b") for i in range(len(self.widths) - 1)]


def init_mlp(store: ParamStore, spec: MlpSpec, rng: np.random.Generator) -> None:
    widths = spec.widths
    for (wn, bn), fan_in, fan_out in zip(spec.layer_names(), widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        store.add(wn, rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(bn, rng.uniform(-bound, bound, size=(fan_out,)))


def _check_input(spec: MlpSpec, width: int) -> None:
    if width != spec.input_width:
        raise ShapeError(
            f"{spec.name}.l0: input width {width} does not match expected {spec.input_width}"
        )


def mlp_forward(params: ParamStore, spec: MlpSpec, x, frozen: bool = False) -> Node:
    """Recorded forward pass; ``x`` is a (batch, input_width) array or node.

    With ``frozen`` the weights enter as constants: gradients reach ``x`` only.
    """
    x = _as_node(x)
    if x.value.ndim != 2:
        raise ShapeError(f"{spec.name}: expected a 2-D batch, got shape {x.shape}")
    _check_input(spec, x.shape[1])
    layers = spec.layer_names()
    h = x
    for i, (wn, bn) in enumerate(layers):
        if wn not in params or bn not in params:
            raise KeyError(f"{spec.name}: parameters for layer {i} missing ({wn})")
        if frozen:
            h = linear(h, const(params[wn]), const(params[bn]))
        else:
            h = linear(h, param(params, wn), param(params, bn))
        act = spec.hidden_act if i < len(layers) - 1 else spec.output_act
        h = _ACTIVATIONS[act][0](h)
    return h


def mlp_apply(params: ParamStore, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Unrecorded forward pass with the same arithmetic as :func:`mlp_forward`."""
    x = np.asarray(x, dtype=DTYPE)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    _check_input(spec, x.shape[1])
    layers = spec.layer_names()
    h = x
    for i, (wn, bn) in enumerate(layers):
        h = h @ params[wn] + params[bn]
        act = spec.hidden_act if i < len(layers) - 1 else spec.output_act
        h = _ACTIVATIONS[act][1](h)
    return h[0] if squeeze else h


# ---------------------------------------------------------------------------
# Optimisation and gradient checking
# ---------------------------------------------------------------------------


def adam_step(params: ParamStore, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every entry, then zero the gradients."""
    for name, e in params.entries.items():
        if not np.all(np.isfinite(e.grad)):
            raise NumericalError(f"non-finite gradient for {name}")
    for e in params.entries.values():
        e.step += 1
        e.m *= beta1
        e.m += (1.0 - beta1) * e.grad
        e.v *= beta2
        e.v += (1.0 - beta2) * e.grad * e.grad
        m_hat = e.m / (1.0 - beta1 ** e.step)
        v_hat = e.v / (1.0 - beta2 ** e.step)
        e.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        e.grad.fill(0.0)


def finite_diff_grad(loss_fn: Callable[[], float], params: ParamStore,
                     eps: float = 1e-5, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. the store's values.

    ``loss_fn`` takes no arguments and reads the parameters in place.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = {}
    for name in names if names is not None else params.names():
        value = params.entries[name].value
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite loss while perturbing {name}[{i}]")
            gflat[i] = (up - down) / (2.0 * eps)
        out[name] = grad
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest coordinate-wise ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MCCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write ``name -> array`` as a versioned little-endian float64 file."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    return out


def store_arrays(store: ParamStore, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.copy() for k, v in store.values().items()}

# core/numerics.py
"""
Reverse-mode differentiation over a closed set of array operations.

A Graph records every operation as a Node (op kind, input ids, attributes,
forward value) in insertion order, which is also a topological order. Values
are stored in the graph dtype (float32 unless asked otherwise); every forward
and backward rule runs in float64 and casts the result back.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractViolation, NumericFailure, ShapeError

logger = logging.getLogger(__name__)

OPS = frozenset({
    "add", "mul", "matmul", "exp", "log", "tanh", "power",
    "max", "sum", "mean", "softmax", "layer_norm",
    "reshape", "transpose", "concatenate", "l2_norm",
})

Operand = Union["Var", np.ndarray, float, int]


def _wide(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Stable softmax (max-subtracted); returns float32 for float32 input"""
    arr = np.asarray(x)
    wide = _wide(arr)
    shifted = wide - np.max(wide, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    if arr.dtype == np.float32:
        return out.astype(np.float32)
    return out


def interpolation_matrix(n_in: int, n_out: int, snap_nodes: bool = False) -> np.ndarray:
    """
    Corner-aligned linear interpolation weights of shape (n_out, n_in).

    Positions are computed with integer arithmetic so grid nodes that land
    exactly on output pixels get weight exactly 1. With `snap_nodes` and
    n_out > n_in every node is first moved to its nearest output pixel, so
    each input value appears unchanged in the output and every other output
    is a convex combination of its two neighbouring nodes.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    if n_in == n_out:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    if snap_nodes and n_out > n_in:
        return _snapped_matrix(n_in, n_out)
    den = n_out - 1
    for i in range(n_out):
        num = i * (n_in - 1)
        lo, rem = divmod(num, den)
        if lo >= n_in - 1:
            m[i, n_in - 1] = 1.0
            continue
        frac = rem / den
        m[i, lo] += 1.0 - frac
        m[i, lo + 1] += frac
    return m


def _snapped_matrix(n_in: int, n_out: int) -> np.ndarray:
    # node i sits on pixel round(i * (n_out - 1) / (n_in - 1)), half up; knots are strictly increasing
    span, den = n_out - 1, n_in - 1
    knots = [(2 * i * span + den) // (2 * den) for i in range(n_in)]
    m = np.zeros((n_out, n_in))
    for j in range(n_in - 1):
        left, right = knots[j], knots[j + 1]
        for o in range(left, right + 1):
            frac = (o - left) / (right - left)
            m[o, j] = 1.0 - frac
            m[o, j + 1] = frac
    return m


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int, snap_nodes: bool = False) -> np.ndarray:
    """Resize the two leading axes of `values` (h, w, ...) with corner alignment"""
    h, w = values.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.array(values, copy=True)
    mh = interpolation_matrix(h, out_h, snap_nodes)
    mw = interpolation_matrix(w, out_w, snap_nodes)
    out = np.einsum("ir,rc...,jc->ij...", mh, _wide(values), mw)
    return out.astype(values.dtype if values.dtype.kind == "f" else np.float64)


# -----------------------------
# Forward rules
# -----------------------------
def _layer_norm_parts(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv, inv


def _forward(op: str, xs: List[np.ndarray], attrs: Dict) -> np.ndarray:
    if op == "add":
        return xs[0] + xs[1]
    if op == "mul":
        return xs[0] * xs[1]
    if op == "matmul":
        return np.matmul(xs[0], xs[1])
    if op == "exp":
        return np.exp(xs[0])
    if op == "log":
        return np.log(xs[0])
    if op == "tanh":
        return np.tanh(xs[0])
    if op == "power":
        return np.power(xs[0], attrs["exponent"])
    if op == "max":
        return np.max(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"])
    if op == "sum":
        return np.sum(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"])
    if op == "mean":
        return np.mean(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"])
    if op == "softmax":
        return softmax(xs[0], attrs["axis"])
    if op == "layer_norm":
        return _layer_norm_parts(xs[0], attrs["eps"])[0]
    if op == "reshape":
        return xs[0].reshape(attrs["shape"])
    if op == "transpose":
        return np.transpose(xs[0], attrs["axes"])
    if op == "concatenate":
        return np.concatenate(xs, axis=attrs["axis"])
    if op == "l2_norm":
        return np.sqrt(np.sum(xs[0] ** 2, axis=attrs["axis"], keepdims=attrs["keepdims"]))
    raise ContractViolation(f"operation '{op}' is outside the supported set")


# -----------------------------
# Backward rules
# -----------------------------
def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, size in enumerate(shape):
        if size == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _expand(grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(grad, (1,) * len(shape)), shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _backward(op: str, g: np.ndarray, xs: List[np.ndarray], out: np.ndarray,
              attrs: Dict) -> List[np.ndarray]:
    if op == "add":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]
    if op == "mul":
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]
    if op == "matmul":
        a, b = xs
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]
    if op == "exp":
        return [g * out]
    if op == "log":
        return [g / xs[0]]
    if op == "tanh":
        return [g * (1.0 - out ** 2)]
    if op == "power":
        p = attrs["exponent"]
        return [g * p * np.power(xs[0], p - 1)]
    if op == "max":
        a = xs[0]
        axis = attrs["axis"]
        mask = np.zeros_like(a)
        if axis is None:
            mask.reshape(-1)[np.argmax(a)] = 1.0
        else:
            # ties resolve to the first occurrence along the axis
            idx = np.expand_dims(np.argmax(a, axis=axis), axis)
            np.put_along_axis(mask, idx, 1.0, axis=axis)
        return [mask * _expand(g, a.shape, axis, attrs["keepdims"])]
    if op == "sum":
        return [_expand(g, xs[0].shape, attrs["axis"], attrs["keepdims"]).copy()]
    if op == "mean":
        count = xs[0].size / max(out.size, 1)
        return [_expand(g, xs[0].shape, attrs["axis"], attrs["keepdims"]) / count]
    if op == "softmax":
        axis = attrs["axis"]
        return [out * (g - np.sum(g * out, axis=axis, keepdims=True))]
    if op == "layer_norm":
        xhat, inv = _layer_norm_parts(xs[0], attrs["eps"])
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - xhat * gx)]
    if op == "reshape":
        return [g.reshape(xs[0].shape)]
    if op == "transpose":
        return [np.transpose(g, np.argsort(attrs["axes"]))]
    if op == "concatenate":
        axis = attrs["axis"]
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return list(np.split(g, bounds, axis=axis))
    if op == "l2_norm":
        axis, keepdims = attrs["axis"], attrs["keepdims"]
        norm = _expand(out, xs[0].shape, axis, keepdims)
        ge = _expand(g, xs[0].shape, axis, keepdims)
        # zero-norm subgradient is 0
        safe = np.where(norm > 0, norm, 1.0)
        return [np.where(norm > 0, ge * xs[0] / safe, 0.0)]
    raise ContractViolation(f"operation '{op}' is outside the supported set")


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(sorted(a % ndim for a in axis))
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} is invalid for an array of rank {ndim}")
    return axis % ndim


@dataclass
class Node:
    id: int
    op: str
    inputs: Tuple[int, ...]
    attrs: Dict
    value: np.ndarray
    name: str
    requires_grad: bool


class Var:
    """Handle to a node of a Graph; arithmetic operators record new nodes"""

    __slots__ = ("graph", "id")
    # numpy defers to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.node.value.shape

    @property
    def ndim(self) -> int:
        return self.node.value.ndim

    @property
    def size(self) -> int:
        return self.node.value.size

    def __repr__(self):
        return f"Var({self.node.name}, shape={self.shape})"

    def __add__(self, other: Operand) -> "Var":
        return self.graph.add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Operand) -> "Var":
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Var":
        return self.graph.mul(self, -1.0)

    def __sub__(self, other: Operand) -> "Var":
        if isinstance(other, Var):
            return self.graph.add(self, -other)
        return self.graph.add(self, -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other: Operand) -> "Var":
        return self.graph.add(-self, other)

    def __truediv__(self, other: Operand) -> "Var":
        if isinstance(other, Var):
            return self.graph.mul(self, self.graph.power(other, -1.0))
        return self.graph.mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other: Operand) -> "Var":
        return self.graph.matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Var":
        return self.graph.matmul(other, self)

    def __pow__(self, exponent: float) -> "Var":
        return self.graph.power(self, exponent)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.reshape(self, shape)

    def transpose(self, *axes) -> "Var":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self.graph.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        return self.graph.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Var":
        return self.graph.mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Var":
        return self.graph.max(self, axis, keepdims)


class Graph:
    """Recording of array operations supporting replay and reverse-mode gradients"""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: List[Node] = []
        self.input_ids: Dict[str, int] = {}

    # ---- leaves -------------------------------------------------------
    def input(self, name: str, value) -> Var:
        if name in self.input_ids:
            raise ContractViolation(f"input '{name}' declared twice")
        var = self._leaf("input", value, name, requires_grad=True)
        self.input_ids[name] = var.id
        return var

    def const(self, value, name: Optional[str] = None) -> Var:
        return self._leaf("const", value, name, requires_grad=False)

    def _leaf(self, op: str, value, name: Optional[str], requires_grad: bool) -> Var:
        arr = np.array(value, dtype=self.dtype)
        node_id = len(self.nodes)
        label = name or f"{op}#{node_id}"
        self._check_finite(arr, label)
        self.nodes.append(Node(node_id, op, (), {}, arr, label, requires_grad))
        return Var(self, node_id)

    def _lift(self, x: Operand) -> Var:
        if isinstance(x, Var):
            if x.graph is not self:
                raise ContractViolation("operand belongs to a different graph")
            return x
        return self.const(x)

    @staticmethod
    def _check_finite(value: np.ndarray, label: str):
        if not np.all(np.isfinite(value)):
            raise NumericFailure(f"non-finite value produced at node '{label}'", node=label)

    def _apply(self, op: str, args: Sequence[Operand], attrs: Optional[Dict] = None,
               name: Optional[str] = None) -> Var:
        attrs = attrs or {}
        operands = [self._lift(a) for a in args]
        inputs = [o.node for o in operands]
        with np.errstate(all="ignore"):
            try:
                value = _forward(op, [_wide(n.value) for n in inputs], attrs)
            except ValueError as exc:
                shapes = " and ".join(str(n.value.shape) for n in inputs)
                raise ShapeError(f"{op} cannot combine shapes {shapes}: {exc}") from exc
        node_id = len(self.nodes)
        label = name or f"{op}#{node_id}"
        value = np.asarray(value, dtype=self.dtype)
        self._check_finite(value, label)
        self.nodes.append(Node(node_id, op, tuple(n.id for n in inputs), attrs, value, label,
                               any(n.requires_grad for n in inputs)))
        return Var(self, node_id)

    # ---- closed operation set ------------------------------------------
    def add(self, a: Operand, b: Operand, name: Optional[str] = None) -> Var:
        return self._apply("add", [a, b], name=name)

    def mul(self, a: Operand, b: Operand, name: Optional[str] = None) -> Var:
        return self._apply("mul", [a, b], name=name)

    def matmul(self, a: Operand, b: Operand, name: Optional[str] = None) -> Var:
        return self._apply("matmul", [a, b], name=name)

    def exp(self, a: Operand, name: Optional[str] = None) -> Var:
        return self._apply("exp", [a], name=name)

    def log(self, a: Operand, name: Optional[str] = None) -> Var:
        return self._apply("log", [a], name=name)

    def tanh(self, a: Operand, name: Optional[str] = None) -> Var:
        return self._apply("tanh", [a], name=name)

    def power(self, a: Operand, exponent: float, name: Optional[str] = None) -> Var:
        return self._apply("power", [a], {"exponent": float(exponent)}, name=name)

    def max(self, a: Operand, axis: Optional[int] = None, keepdims: bool = False,
            name: Optional[str] = None) -> Var:
        a = self._lift(a)
        if isinstance(axis, (tuple, list)):
            raise ContractViolation("max reduces over a single axis")
        return self._apply("max", [a], {"axis": _norm_axis(axis, a.ndim), "keepdims": keepdims},
                           name=name)

    def sum(self, a: Operand, axis=None, keepdims: bool = False, name: Optional[str] = None) -> Var:
        a = self._lift(a)
        return self._apply("sum", [a], {"axis": _norm_axis(axis, a.ndim), "keepdims": keepdims},
                           name=name)

    def mean(self, a: Operand, axis=None, keepdims: bool = False, name: Optional[str] = None) -> Var:
        a = self._lift(a)
        return self._apply("mean", [a], {"axis": _norm_axis(axis, a.ndim), "keepdims": keepdims},
                           name=name)

    def softmax(self, a: Operand, axis: int = -1, name: Optional[str] = None) -> Var:
        a = self._lift(a)
        return self._apply("softmax", [a], {"axis": _norm_axis(axis, a.ndim)}, name=name)

    def layer_norm(self, a: Operand, eps: float = 1e-6, name: Optional[str] = None) -> Var:
        return self._apply("layer_norm", [a], {"eps": float(eps)}, name=name)

    def reshape(self, a: Operand, shape: Sequence[int], name: Optional[str] = None) -> Var:
        return self._apply("reshape", [a], {"shape": tuple(int(s) for s in shape)}, name=name)

    def transpose(self, a: Operand, axes: Sequence[int], name: Optional[str] = None) -> Var:
        return self._apply("transpose", [a], {"axes": tuple(int(x) for x in axes)}, name=name)

    def concatenate(self, parts: Sequence[Operand], axis: int = 0, name: Optional[str] = None) -> Var:
        parts = [self._lift(p) for p in parts]
        return self._apply("concatenate", parts, {"axis": _norm_axis(axis, parts[0].ndim)}, name=name)

    def l2_norm(self, a: Operand, axis=-1, keepdims: bool = False, name: Optional[str] = None) -> Var:
        a = self._lift(a)
        return self._apply("l2_norm", [a], {"axis": _norm_axis(axis, a.ndim), "keepdims": keepdims},
                           name=name)

    def minimum(self, a: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Var:
        return -self.max(-self._lift(a), axis=axis, keepdims=keepdims)

    # ---- evaluation ----------------------------------------------------
    def replay(self, inputs: Dict[str, np.ndarray]):
        """Re-run the recorded forward pass with new values for the declared inputs"""
        unknown = set(inputs) - set(self.input_ids)
        if unknown:
            raise ContractViolation(f"undeclared graph inputs: {sorted(unknown)}")
        for name, node_id in self.input_ids.items():
            if name not in inputs:
                continue
            node = self.nodes[node_id]
            value = np.array(inputs[name], dtype=self.dtype)
            if value.shape != node.value.shape:
                raise ShapeError(f"input '{name}' has shape {value.shape}, graph expects {node.value.shape}")
            self._check_finite(value, node.name)
            node.value = value
        for node in self.nodes:
            if node.op in ("input", "const"):
                continue
            with np.errstate(all="ignore"):
                value = _forward(node.op, [_wide(self.nodes[i].value) for i in node.inputs], node.attrs)
            value = np.asarray(value, dtype=self.dtype)
            self._check_finite(value, node.name)
            node.value = value

    def backward(self, output: Var) -> Dict[int, np.ndarray]:
        """Adjoints of every input node reachable from `output` (a scalar)"""
        if output.size != 1:
            raise ContractViolation(f"gradients need a scalar output, got shape {output.shape}")
        grads: Dict[int, np.ndarray] = {output.id: np.ones(output.shape)}
        leaves: Dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: output.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if node.op == "input":
                leaves[node.id] = g
                continue
            if node.op == "const":
                continue
            xs = [_wide(self.nodes[i].value) for i in node.inputs]
            with np.errstate(all="ignore"):
                parts = _backward(node.op, g, xs, _wide(node.value), node.attrs)
            for i, part in zip(node.inputs, parts):
                if not self.nodes[i].requires_grad:
                    continue
                if not np.all(np.isfinite(part)):
                    raise NumericFailure(f"non-finite gradient flowing out of node '{node.name}'",
                                         node=node.name)
                if i in grads:
                    grads[i] = grads[i] + part
                else:
                    grads[i] = np.array(part, dtype=np.float64)
        return leaves

    def gradients(self, output: Var, wrt: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        leaves = self.backward(output)
        names = list(wrt) if wrt is not None else list(self.input_ids)
        out = {}
        for name in names:
            if name not in self.input_ids:
                raise ContractViolation(f"undeclared graph input '{name}'")
            node = self.nodes[self.input_ids[name]]
            g = leaves.get(node.id)
            out[name] = np.zeros_like(node.value) if g is None else g.astype(self.dtype)
        return out


# -----------------------------
# Public helpers
# -----------------------------
def evaluate_with_gradients(graph: Graph, inputs: Optional[Dict[str, np.ndarray]] = None,
                            output: Optional[Var] = None) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Evaluate a recorded graph and differentiate its scalar output

    Args:
        graph: Recorded graph
        inputs: New values for declared inputs (missing names keep their values)
        output: Output node; defaults to the last recorded node

    Returns:
        (value, {input name: gradient})
    """
    if not graph.nodes:
        raise ContractViolation("graph is empty")
    if inputs:
        graph.replay(inputs)
    if output is None:
        output = Var(graph, len(graph.nodes) - 1)
    return np.array(output.value, copy=True), graph.gradients(output)


def trace(fn: Callable[..., Var], inputs: Dict[str, np.ndarray], dtype=np.float32) -> Tuple[Graph, Var]:
    """Record `fn(**vars)` on a fresh graph whose inputs are the given arrays"""
    graph = Graph(dtype)
    variables = {name: graph.input(name, value) for name, value in inputs.items()}
    return graph, fn(**variables)


def evaluate(fn: Callable[..., Var], *arrays, dtype=np.float64) -> np.ndarray:
    """Forward value of `fn` applied to plain arrays"""
    graph = Graph(dtype)
    args = [graph.input(f"arg{i}", a) for i, a in enumerate(arrays)]
    return np.array(fn(*args).value, copy=True)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of df/dx, evaluated in float64"""
    if h <= 0:
        raise ContractViolation(f"finite-difference step must be positive, got {h}")
    base = np.array(x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base.copy()))
        flat[i] = orig - h
        fm = float(f(base.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFailure(f"function is not finite within {h} of coordinate {i}")
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad

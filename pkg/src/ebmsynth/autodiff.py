"""Dense float64 tensor graphs with reverse-mode automatic differentiation.

Graphs are built from a small set of primitives (add, mul, matmul, transpose,
reshape, concat, slice, exp, log, tanh, relu, softmax, layer_norm, reduce_sum,
reduce_mean, scale). Nodes are immutable once constructed and carry static
shapes, so shape errors surface at graph-build time rather than mid-training.
Values live outside the graph: ``evaluate`` binds leaf values and returns a
node -> array map, ``gradients`` walks the same structure in reverse.

There is no broadcasting beyond scalar-times-tensor (the ``scale`` primitive);
elementwise ops require exactly matching shapes. Everything is float64.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "Node",
    "Graph",
    "leaf",
    "const",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_",
    "exp",
    "log",
    "tanh",
    "relu",
    "softmax",
    "layer_norm",
    "reduce_sum",
    "reduce_mean",
    "scale",
    "evaluate",
    "gradients",
    "finite_difference_check",
]


class GraphError(Exception):
    """Graph construction or evaluation failed."""


class ShapeError(GraphError):
    """Operand shapes do not satisfy a primitive's shape rule."""


def as_tensor(value) -> np.ndarray:
    """Coerce ``value`` to a C-contiguous float64 array."""
    return np.ascontiguousarray(value, dtype=np.float64)


_node_counter = 0


class Node:
    """One primitive operation (or leaf/const) in a computation graph.

    Immutable after construction; safe to share between graphs and threads.
    """

    __slots__ = ("op", "inputs", "shape", "name", "is_param", "value", "attrs", "uid")

    def __init__(self, op, inputs=(), shape=(), name=None, is_param=False,
                 value=None, attrs=None):
        global _node_counter
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(int(d) for d in shape)
        self.name = name
        self.is_param = is_param
        self.value = value
        self.attrs = attrs or {}
        _node_counter += 1
        self.uid = _node_counter

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    def label(self) -> str:
        if self.op == "leaf":
            return f"leaf '{self.name}'"
        return f"{self.op}#{self.uid}"

    def __repr__(self):
        return f"Node({self.label()}, shape={self.shape})"


def leaf(name: str, shape: Sequence[int], param: bool = False) -> Node:
    """Declare a named leaf whose value is bound at evaluation time."""
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"leaf '{name}': dimensions must be positive, got {shape}")
    return Node("leaf", (), shape, name=name, is_param=param)


def const(value) -> Node:
    """Embed a fixed array in the graph; no gradient flows into it."""
    arr = as_tensor(value)
    arr.setflags(write=False)
    return Node("const", (), arr.shape, value=arr)


def _require_same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{op}: operand shapes {a.shape} and {b.shape} differ "
            f"({a.label()} vs {b.label()})"
        )


def add(a: Node, b: Node) -> Node:
    _require_same_shape("add", a, b)
    return Node("add", (a, b), a.shape)


def mul(a: Node, b: Node) -> Node:
    _require_same_shape("mul", a, b)
    return Node("mul", (a, b), a.shape)


def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.shape} @ {b.shape} "
            f"({a.label()} vs {b.label()})"
        )
    return Node("matmul", (a, b), (a.shape[0], b.shape[1]))


def transpose(a: Node) -> Node:
    if len(a.shape) != 2:
        raise ShapeError(f"transpose: expects a 2-D operand, got {a.shape}")
    return Node("transpose", (a,), (a.shape[1], a.shape[0]))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape} ({a.label()})")
    return Node("reshape", (a,), shape)


def concat(parts: Sequence[Node], axis: int) -> Node:
    if not parts:
        raise ShapeError("concat: needs at least one operand")
    first = parts[0].shape
    ndim = len(first)
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for shape {first}")
    for p in parts[1:]:
        if len(p.shape) != ndim or any(
            p.shape[i] != first[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat: shapes {first} and {p.shape} differ off axis {axis}"
            )
    out = list(first)
    out[axis] = sum(p.shape[axis] for p in parts)
    return Node("concat", tuple(parts), out, attrs={"axis": axis})


def slice_(a: Node, bounds: Sequence[tuple[int, int]]) -> Node:
    """Contiguous rectangular slice; ``bounds`` holds (start, stop) per axis."""
    bounds = tuple((int(s), int(e)) for s, e in bounds)
    if len(bounds) != len(a.shape):
        raise ShapeError(f"slice: got {len(bounds)} bounds for shape {a.shape}")
    for (s, e), d in zip(bounds, a.shape):
        if not (0 <= s < e <= d):
            raise ShapeError(f"slice: bounds {bounds} invalid for shape {a.shape}")
    return Node("slice", (a,), tuple(e - s for s, e in bounds), attrs={"bounds": bounds})


def _unary(op: str, a: Node) -> Node:
    return Node(op, (a,), a.shape)


def exp(a: Node) -> Node:
    return _unary("exp", a)


def log(a: Node) -> Node:
    """Natural log; input must be strictly positive."""
    return _unary("log", a)


def tanh(a: Node) -> Node:
    return _unary("tanh", a)


def relu(a: Node) -> Node:
    return _unary("relu", a)


def softmax(a: Node, axis: int) -> Node:
    if not -len(a.shape) <= axis < len(a.shape):
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    return Node("softmax", (a,), a.shape, attrs={"axis": axis % len(a.shape)})


def layer_norm(a: Node, eps: float = 1e-5) -> Node:
    """Normalize along the last axis to zero mean, unit variance (no affine)."""
    if len(a.shape) < 1 or a.shape[-1] < 1:
        raise ShapeError(f"layer_norm: needs a non-empty last axis, got {a.shape}")
    return Node("layer_norm", (a,), a.shape, attrs={"eps": float(eps)})


def _reduce_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return ()
    if not 0 <= axis < len(shape):
        raise ShapeError(f"reduce: axis {axis} out of range for shape {shape}")
    return shape[:axis] + shape[axis + 1:]


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    return Node("reduce_sum", (a,), _reduce_shape(a.shape, axis), attrs={"axis": axis})


def reduce_mean(a: Node, axis: int | None = None) -> Node:
    return Node("reduce_mean", (a,), _reduce_shape(a.shape, axis), attrs={"axis": axis})


def scale(a: Node, s) -> Node:
    """Scalar-times-tensor: ``s`` is a float or a size-1 node."""
    if isinstance(s, Node):
        if s.size != 1:
            raise ShapeError(f"scale: scalar operand has shape {s.shape} ({s.label()})")
        return Node("scale", (a, s), a.shape)
    return Node("scale", (a,), a.shape, attrs={"factor": float(s)})


class Graph:
    """A view over the DAG reachable from ``outputs``: topological order plus
    the leaf name -> node map. Acyclic by construction (nodes only reference
    previously created nodes)."""

    __slots__ = ("outputs", "nodes", "leaves")

    def __init__(self, outputs):
        if isinstance(outputs, Node):
            outputs = (outputs,)
        self.outputs = tuple(outputs)
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(o, False) for o in reversed(self.outputs)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if id(inp) not in seen:
                    stack.append((inp, False))
        self.nodes = tuple(order)
        leaves: dict[str, Node] = {}
        for node in order:
            if node.op == "leaf":
                prior = leaves.get(node.name)
                if prior is not None and prior is not node:
                    raise GraphError(f"duplicate leaf name '{node.name}'")
                leaves[node.name] = node
        self.leaves = leaves


# ---------------------------------------------------------------------------
# Forward evaluation
# ---------------------------------------------------------------------------

def _fwd_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _fwd_layer_norm(x: np.ndarray, eps: float) -> np.ndarray:
    m = np.mean(x, axis=-1, keepdims=True)
    v = np.mean((x - m) ** 2, axis=-1, keepdims=True)
    return (x - m) / np.sqrt(v + eps)


def _bounds_index(bounds):
    return tuple(slice(s, e) for s, e in bounds)


def evaluate(graph: Graph, leaf_values: Mapping[str, np.ndarray]) -> dict[Node, np.ndarray]:
    """Run the forward pass; returns every node's value keyed by node.

    Raises GraphError for unbound leaves and ShapeError when a bound value
    does not match its leaf's declared shape.
    """
    values: dict[Node, np.ndarray] = {}
    for node in graph.nodes:
        op = node.op
        if op == "leaf":
            try:
                bound = leaf_values[node.name]
            except KeyError:
                raise GraphError(f"unbound leaf '{node.name}'") from None
            arr = as_tensor(bound)
            if arr.shape != node.shape:
                raise ShapeError(
                    f"leaf '{node.name}': bound value has shape {arr.shape}, "
                    f"declared {node.shape}"
                )
            values[node] = arr
            continue
        if op == "const":
            values[node] = node.value
            continue
        ins = [values[i] for i in node.inputs]
        if op == "add":
            out = ins[0] + ins[1]
        elif op == "mul":
            out = ins[0] * ins[1]
        elif op == "matmul":
            out = ins[0] @ ins[1]
        elif op == "transpose":
            out = ins[0].T.copy()
        elif op == "reshape":
            out = ins[0].reshape(node.shape)
        elif op == "concat":
            out = np.concatenate(ins, axis=node.attrs["axis"])
        elif op == "slice":
            out = ins[0][_bounds_index(node.attrs["bounds"])].copy()
        elif op == "exp":
            out = np.exp(ins[0])
        elif op == "log":
            out = np.log(ins[0])
        elif op == "tanh":
            out = np.tanh(ins[0])
        elif op == "relu":
            out = np.maximum(ins[0], 0.0)
        elif op == "softmax":
            out = _fwd_softmax(ins[0], node.attrs["axis"])
        elif op == "layer_norm":
            out = _fwd_layer_norm(ins[0], node.attrs["eps"])
        elif op == "reduce_sum":
            out = np.sum(ins[0], axis=node.attrs["axis"])
        elif op == "reduce_mean":
            out = np.mean(ins[0], axis=node.attrs["axis"])
        elif op == "scale":
            if len(ins) == 2:
                out = ins[0] * float(ins[1].reshape(()))
            else:
                out = ins[0] * node.attrs["factor"]
        else:  # pragma: no cover
            raise GraphError(f"unknown op '{op}'")
        values[node] = out
    return values


# ---------------------------------------------------------------------------
# Reverse-mode gradients
# ---------------------------------------------------------------------------

def _accumulate(store: dict, node: Node, grad: np.ndarray) -> None:
    prior = store.get(node)
    if prior is None:
        store[node] = grad
    else:
        store[node] = prior + grad


def gradients(
    graph: Graph,
    output: Node,
    wrt: Iterable[str],
    leaf_values: Mapping[str, np.ndarray] | None = None,
    values: Mapping[Node, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a size-1 ``output`` with respect to named leaves.

    Pass either ``leaf_values`` (the forward pass is run internally) or a
    ``values`` map from a prior ``evaluate`` over the same graph. Leaves with
    no path to the output get zero gradients of their declared shape.
    """
    if output.size != 1:
        raise ShapeError(f"gradients: output {output.label()} has shape {output.shape}, expected a scalar")
    if values is None:
        if leaf_values is None:
            raise GraphError("gradients: provide leaf_values or a values map")
        values = evaluate(graph, leaf_values)
    wrt = set(wrt)
    missing = wrt - set(graph.leaves)
    if missing:
        raise GraphError(f"gradients: unknown leaves {sorted(missing)}")

    grads: dict[Node, np.ndarray] = {output: np.ones(output.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(node, None)
        if g is None or node.op in ("leaf", "const"):
            if g is not None and node.op == "leaf":
                grads[node] = g
            continue
        ins = node.inputs
        op = node.op
        if op == "add":
            _accumulate(grads, ins[0], g)
            _accumulate(grads, ins[1], g)
        elif op == "mul":
            _accumulate(grads, ins[0], g * values[ins[1]])
            _accumulate(grads, ins[1], g * values[ins[0]])
        elif op == "matmul":
            _accumulate(grads, ins[0], g @ values[ins[1]].T)
            _accumulate(grads, ins[1], values[ins[0]].T @ g)
        elif op == "transpose":
            _accumulate(grads, ins[0], g.T)
        elif op == "reshape":
            _accumulate(grads, ins[0], g.reshape(ins[0].shape))
        elif op == "concat":
            axis = node.attrs["axis"]
            offset = 0
            for inp in ins:
                extent = inp.shape[axis]
                idx = [slice(None)] * len(node.shape)
                idx[axis] = slice(offset, offset + extent)
                _accumulate(grads, inp, g[tuple(idx)])
                offset += extent
        elif op == "slice":
            full = np.zeros(ins[0].shape)
            full[_bounds_index(node.attrs["bounds"])] = g
            _accumulate(grads, ins[0], full)
        elif op == "exp":
            _accumulate(grads, ins[0], g * values[node])
        elif op == "log":
            _accumulate(grads, ins[0], g / values[ins[0]])
        elif op == "tanh":
            y = values[node]
            _accumulate(grads, ins[0], g * (1.0 - y * y))
        elif op == "relu":
            _accumulate(grads, ins[0], g * (values[ins[0]] > 0.0))
        elif op == "softmax":
            axis = node.attrs["axis"]
            y = values[node]
            inner = np.sum(g * y, axis=axis, keepdims=True)
            _accumulate(grads, ins[0], y * (g - inner))
        elif op == "layer_norm":
            eps = node.attrs["eps"]
            x = values[ins[0]]
            n = x.shape[-1]
            m = np.mean(x, axis=-1, keepdims=True)
            var = np.mean((x - m) ** 2, axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (x - m) * inv
            gm = np.mean(g, axis=-1, keepdims=True)
            gx = np.mean(g * xhat, axis=-1, keepdims=True)
            _accumulate(grads, ins[0], inv * (g - gm - xhat * gx))
        elif op == "reduce_sum":
            axis = node.attrs["axis"]
            if axis is None:
                _accumulate(grads, ins[0], np.full(ins[0].shape, float(g)))
            else:
                _accumulate(grads, ins[0], np.broadcast_to(
                    np.expand_dims(g, axis), ins[0].shape).copy())
        elif op == "reduce_mean":
            axis = node.attrs["axis"]
            if axis is None:
                _accumulate(grads, ins[0], np.full(ins[0].shape, float(g) / ins[0].size))
            else:
                count = ins[0].shape[axis]
                _accumulate(grads, ins[0], np.broadcast_to(
                    np.expand_dims(g / count, axis), ins[0].shape).copy())
        elif op == "scale":
            if len(ins) == 2:
                s = float(values[ins[1]].reshape(()))
                _accumulate(grads, ins[0], g * s)
                _accumulate(grads, ins[1], np.sum(g * values[ins[0]]).reshape(ins[1].shape))
            else:
                _accumulate(grads, ins[0], g * node.attrs["factor"])
        else:  # pragma: no cover
            raise GraphError(f"unknown op '{op}'")

    out: dict[str, np.ndarray] = {}
    for name in wrt:
        node = graph.leaves[name]
        g = grads.get(node)
        out[name] = np.zeros(node.shape) if g is None else g
    return out


def finite_difference_check(
    graph: Graph,
    output: Node,
    leaf_name: str,
    epsilon: float,
    leaf_values: Mapping[str, np.ndarray],
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Per coordinate the error is |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|);
    the maximum over all coordinates of the leaf is returned.
    """
    if not 1e-8 < epsilon < 1e-2:
        raise ValueError(f"epsilon {epsilon} outside (1e-8, 1e-2)")
    g_ad = gradients(graph, output, [leaf_name], leaf_values=leaf_values)[leaf_name]
    base = as_tensor(leaf_values[leaf_name]).copy()
    bound = dict(leaf_values)
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        bound[leaf_name] = base
        hi = float(evaluate(graph, bound)[output].reshape(()))
        flat[i] = orig - epsilon
        lo = float(evaluate(graph, bound)[output].reshape(()))
        flat[i] = orig
        g_fd = (hi - lo) / (2.0 * epsilon)
        g = float(g_ad.reshape(-1)[i])
        err = abs(g - g_fd) / max(1e-12, abs(g) + abs(g_fd))
        if err > worst:
            worst = err
    return worst

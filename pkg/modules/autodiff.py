"""
Autodiff Module
Minimal reverse-mode differentiation over the numerics kernels, a
finite-difference gradient checker and an Adam parameter update
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numerics as K
from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """
    A value in the computation graph

    Leaves are parameters (requires_grad) or constants. Interior nodes
    remember their parents and a backward rule mapping the output
    gradient to one gradient per parent (None for "no contribution").
    """

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf",
                 backward_fn: Optional[BackwardFn] = None, requires_grad: bool = False,
                 stop_gradient: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.stop_gradient = stop_gradient
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

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
        return mul(self, -1.0)


NodeLike = Union[Node, np.ndarray, float, int]


def parameter(value, name: Optional[str] = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def as_node(x: NodeLike) -> Node:
    return x if isinstance(x, Node) else constant(x)


def make_op(value, parents: Sequence[NodeLike], backward_fn: BackwardFn, op: str) -> Node:
    """Wrap a forward value and its backward rule into a graph node"""
    nodes = [as_node(p) for p in parents]
    requires = any(p.requires_grad for p in nodes)
    return Node(value, nodes, op=op, backward_fn=backward_fn, requires_grad=requires)


def stop_gradient(x: NodeLike) -> Node:
    x = as_node(x)
    return Node(x.value, (x,), op="stop_gradient", stop_gradient=True)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# Elementwise and reduction ops
# --------------------------------------------------------------------------

def add(a: NodeLike, b: NodeLike) -> Node:
    a, b = as_node(a), as_node(b)
    return make_op(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: NodeLike, b: NodeLike) -> Node:
    a, b = as_node(a), as_node(b)
    return make_op(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: NodeLike, b: NodeLike) -> Node:
    a, b = as_node(a), as_node(b)
    av = np.asarray(a.value, dtype=np.float64)
    bv = np.asarray(b.value, dtype=np.float64)
    return make_op(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def div(a: NodeLike, b: NodeLike) -> Node:
    a, b = as_node(a), as_node(b)
    av = np.asarray(a.value, dtype=np.float64)
    bv = np.asarray(b.value, dtype=np.float64)
    return make_op(av / bv, (a, b),
                   lambda g: (_unbroadcast(g / bv, a.shape),
                              _unbroadcast(-g * av / (bv * bv), b.shape)), "div")


def square(x: NodeLike) -> Node:
    x = as_node(x)
    v = np.asarray(x.value, dtype=np.float64)
    return make_op(v * v, (x,), lambda g: (2.0 * v * g,), "square")


def sqrt(x: NodeLike) -> Node:
    x = as_node(x)
    out = np.sqrt(np.asarray(x.value, dtype=np.float64))
    return make_op(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def absolute(x: NodeLike) -> Node:
    x = as_node(x)
    v = np.asarray(x.value, dtype=np.float64)
    return make_op(np.abs(v), (x,), lambda g: (g * np.sign(v),), "abs")


def relu(x: NodeLike) -> Node:
    x = as_node(x)
    v = np.asarray(x.value, dtype=np.float64)
    mask = v > 0.0
    return make_op(np.where(mask, v, 0.0), (x,), lambda g: (g * mask,), "relu")


def clamp(x: NodeLike, lo: float, hi: float) -> Node:
    x = as_node(x)
    v = np.asarray(x.value, dtype=np.float64)
    mask = (v >= lo) & (v <= hi)
    return make_op(np.clip(v, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def sum_all(x: NodeLike) -> Node:
    x = as_node(x)
    return make_op(np.asarray(np.sum(x.value, dtype=np.float64)), (x,),
                   lambda g: (np.full(x.shape, float(g)),), "sum")


def mean(x: NodeLike) -> Node:
    x = as_node(x)
    n = x.value.size
    return make_op(np.asarray(np.mean(x.value, dtype=np.float64)), (x,),
                   lambda g: (np.full(x.shape, float(g) / n),), "mean")


def reshape(x: NodeLike, shape: Tuple[int, ...]) -> Node:
    x = as_node(x)
    return make_op(np.reshape(x.value, shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(nodes: Sequence[NodeLike], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    value = np.concatenate([np.asarray(n.value, dtype=np.float64) for n in nodes], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(value, nodes, backward_fn, "concat")


def gather_rows(x: NodeLike, index) -> Node:
    x = as_node(x)
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return make_op(K.gather_rows(np.asarray(x.value, dtype=np.float64), index), (x,), backward_fn, "gather_rows")


# --------------------------------------------------------------------------
# Kernel ops
# --------------------------------------------------------------------------

def conv2d(x: NodeLike, weight: NodeLike, bias: Optional[NodeLike] = None,
           stride: int = 1, pad: int = 0) -> Node:
    x, weight = as_node(x), as_node(weight)
    parents = [x, weight] if bias is None else [x, weight, as_node(bias)]
    out = K.conv2d(x.value, weight.value, None if bias is None else parents[2].value, stride, pad)

    def backward_fn(g):
        dx, dw, db = K.conv2d_backward(g, x.value, weight.value, stride, pad)
        return (dx, dw) if bias is None else (dx, dw, db)

    return make_op(out, parents, backward_fn, "conv2d")


def linear(x: NodeLike, weight: NodeLike, bias: Optional[NodeLike] = None) -> Node:
    x, weight = as_node(x), as_node(weight)
    parents = [x, weight] if bias is None else [x, weight, as_node(bias)]
    out = K.linear(x.value, weight.value, None if bias is None else parents[2].value)
    xv = np.asarray(x.value, dtype=np.float64)
    wv = np.asarray(weight.value, dtype=np.float64)

    def backward_fn(g):
        grads = (g @ wv, g.T @ xv)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return make_op(out, parents, backward_fn, "linear")


def softmax_rows(m: NodeLike) -> Node:
    m = as_node(m)
    s = K.softmax_rows(m.value)
    return make_op(s, (m,), lambda g: (K.softmax_rows_backward(g, s),), "softmax_rows")


def unfold(x: NodeLike, patch: int, stride: int = 1, pad: int = 0) -> Tuple[Node, K.GridMeta]:
    x = as_node(x)
    rows, grid = K.unfold(x.value, patch, stride, pad)
    return make_op(rows, (x,), lambda g: (K.patch_sum(g, grid),), "unfold"), grid


def fold(rows: NodeLike, grid: K.GridMeta) -> Node:
    rows = as_node(rows)
    return make_op(K.fold(rows.value, grid), (rows,), lambda g: (K.fold_backward(g, grid),), "fold")


def separable(x: NodeLike, rows_matrix: np.ndarray, cols_matrix: np.ndarray) -> Node:
    x = as_node(x)
    out = K.separable(x.value, rows_matrix, cols_matrix)
    return make_op(out, (x,), lambda g: (K.separable_backward(g, rows_matrix, cols_matrix),), "separable")


def resize(x: NodeLike, out_h: int, out_w: int, mode: str = "bilinear") -> Node:
    x = as_node(x)
    _, h, w = x.shape
    ah = K.interpolation_matrix(h, out_h, mode)
    aw = K.interpolation_matrix(w, out_w, mode)
    out = K.resize(x.value, out_h, out_w, mode)
    return make_op(out, (x,), lambda g: (K.separable_backward(g, ah, aw),), f"resize_{mode}")


def avg_pool2d(x: NodeLike, k: int) -> Node:
    x = as_node(x)
    return make_op(K.avg_pool2d(x.value, k), (x,), lambda g: (K.avg_pool2d_backward(g, k),), "avg_pool2d")


def fft2(x: NodeLike) -> Tuple[Node, Node]:
    """Real and imaginary parts of the 2-D DFT as two graph nodes"""
    x = as_node(x)
    spec = K.fft2(x.value)
    re = make_op(spec.real, (x,), lambda g: (K.fft2_backward(g, None),), "fft2_real")
    im = make_op(spec.imag, (x,), lambda g: (K.fft2_backward(None, g),), "fft2_imag")
    return re, im


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.stop_gradient:
            continue
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: NodeLike) -> Dict[Node, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss

    Returns:
        Map from every reachable leaf that requires a gradient (and every
        reachable stop_gradient node, with an all-zero gradient) to its
        gradient array. Fan-out contributions are summed.
    """
    loss = as_node(loss)
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                raise DimensionError(f"{node.op} backward produced {pg.shape} for parent {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    result: Dict[Node, np.ndarray] = {}
    for node in order:
        if node.stop_gradient:
            node.grad = np.zeros(node.shape)
            result[node] = node.grad
        elif not node.parents and node.requires_grad:
            node.grad = grads.get(id(node), np.zeros(node.shape))
            result[node] = node.grad
    return result


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_err: float
    pass_fraction: float
    passed: bool
    checked: int
    worst_index: int = -1


def _scalar(out) -> float:
    value = out.value if isinstance(out, Node) else out
    return float(np.asarray(value, dtype=np.float64).reshape(-1)[0])


def gradcheck(f: Callable[[Node], NodeLike], point, h: float = 1e-5, tol: float = 1e-4,
              samples: int = 50, seed: int = 0, min_pass: float = 0.99) -> GradcheckReport:
    """
    Compare backward() against central finite differences

    Args:
        f: Function of one Node returning a scalar Node
        point: Where to evaluate (copied to float64)
        h: Finite-difference step
        tol: Relative error threshold per coordinate
        samples: Number of coordinates sampled without replacement
        seed: Sampling seed
        min_pass: Fraction of sampled coordinates that must pass

    Returns:
        GradcheckReport; never raises on a mismatch
    """
    x0 = np.array(point, dtype=np.float64)
    leaf = parameter(x0.copy())
    analytic = backward(f(leaf)).get(leaf, np.zeros(x0.shape))

    rng = np.random.default_rng(seed)
    coords = rng.choice(x0.size, size=min(samples, x0.size), replace=False)
    errors = np.zeros(len(coords))
    for n, i in enumerate(coords):
        plus = x0.copy()
        plus.flat[i] += h
        minus = x0.copy()
        minus.flat[i] -= h
        numeric = (_scalar(f(constant(plus))) - _scalar(f(constant(minus)))) / (2.0 * h)
        a = float(analytic.flat[i])
        errors[n] = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)

    pass_fraction = float(np.mean(errors < tol))
    report = GradcheckReport(
        max_rel_err=float(errors.max()),
        pass_fraction=pass_fraction,
        passed=pass_fraction >= min_pass,
        checked=len(coords),
        worst_index=int(coords[int(np.argmax(errors))]),
    )
    if not report.passed:
        logger.warning(f"gradcheck failed: {pass_fraction:.2%} of {report.checked} coordinates "
                       f"within tol, max rel err {report.max_rel_err:.3e}")
    return report


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Union[Node, np.ndarray]], grads: Dict[str, np.ndarray],
              state: OptimizerState) -> Tuple[Dict[str, Union[Node, np.ndarray]], OptimizerState]:
    """
    One bias-corrected Adam update

    Node parameters are updated in place (value replaced, dtype kept);
    array parameters are returned as new arrays. Missing gradients count
    as zero.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    updated: Dict[str, Union[Node, np.ndarray]] = {}

    for name, p in params.items():
        value = p.value if isinstance(p, Node) else np.asarray(p)
        g = grads.get(name)
        g = np.zeros(value.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != value.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} does not match parameter '{name}' {value.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != value.shape:
            m, v = np.zeros(value.shape), np.zeros(value.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v

        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_value = (value - step).astype(value.dtype)
        if isinstance(p, Node):
            p.value = new_value
            updated[name] = p
        else:
            updated[name] = new_value
    return updated, state

"""Dense tensors with define-by-run reverse-mode differentiation.

Only the kernels needed by the training objectives are provided. Every
kernel works on 1-D or 2-D float arrays; there is no general broadcasting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

KERNELS = (
    "matmul",
    "add",
    "relu",
    "concat_last_axis",
    "softmax_last_axis",
    "log",
    "pow_scalar",
    "mean_all",
    "sq_l2_dist",
    "scale",
    "gather_index",
    "clamp_min",
)

# Test hook used by the diagnostics negative control: kernel name -> factor
# applied to that kernel's vector-Jacobian product.
_GRAD_FAULTS: Dict[str, float] = {}


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def inject_gradient_fault(kernel: str, factor: float = 1.5) -> None:
    if kernel not in KERNELS:
        raise KeyError(f"unknown kernel {kernel!r}")
    _GRAD_FAULTS[kernel] = factor


def clear_gradient_faults() -> None:
    _GRAD_FAULTS.clear()


class Tensor:
    """A value in a differentiation graph.

    Leaves created with ``requires_grad=True`` are parameters; ``name`` is the
    key they are reported under by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._op: Optional[str] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._consumed = False
    live = False
    for p in parents:
        if p.requires_grad:
            live = True
            break
    out.requires_grad = live
    if live:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    else:
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _check_finite(kind: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind}: non-finite input")


# ---------------------------------------------------------------- kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {A.shape} and {B.shape}")

    def vjp(g):
        return g @ B.T, A.T @ g

    return _node(A @ B, (a, b), vjp, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D row added to every row of ``a``."""
    A, B = a.data, b.data
    if A.shape == B.shape:
        def vjp(g):
            return g, g
    elif A.ndim == 2 and B.ndim == 1 and B.shape[0] == A.shape[1]:
        def vjp(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add: incompatible shapes {A.shape} and {B.shape}")
    return _node(A + B, (a, b), vjp, "add")


def relu(x: Tensor) -> Tensor:
    X = x.data
    mask = X > 0

    def vjp(g):
        return (g * mask,)

    return _node(np.where(mask, X, 0.0).astype(X.dtype, copy=False), (x,), vjp, "relu")


def concat_last_axis(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_last_axis: no operands")
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.data.ndim != xs[0].data.ndim or t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: incompatible shapes {xs[0].shape} and {t.shape}")
    widths = [t.shape[-1] for t in xs]
    cuts = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _node(np.concatenate([t.data for t in xs], axis=-1), tuple(xs), vjp, "concat_last_axis")


def softmax_last_axis(x: Tensor) -> Tensor:
    X = x.data
    _check_finite("softmax_last_axis", X)
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    # keep outputs strictly positive when exp underflows
    y = np.maximum(y, np.finfo(y.dtype).tiny)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), vjp, "softmax_last_axis")


def log(x: Tensor) -> Tensor:
    X = x.data
    _check_finite("log", X)
    if np.any(X <= 0):
        raise DomainError(f"log: non-positive input (min {X.min()!r})")

    def vjp(g):
        return (g / X,)

    return _node(np.log(X), (x,), vjp, "log")


def pow_scalar(x: Tensor, q: float) -> Tensor:
    X = x.data
    _check_finite("pow_scalar", X)
    integral = float(q).is_integer()
    if not integral and np.any(X <= 0):
        raise DomainError(f"pow_scalar: non-positive base with exponent {q}")
    if integral and q < 0 and np.any(X == 0):
        raise DomainError("pow_scalar: zero base with negative exponent")

    def vjp(g):
        return (g * q * X ** (q - 1),)

    return _node(X ** q, (x,), vjp, "pow_scalar")


def mean_all(x: Tensor) -> Tensor:
    X = x.data
    if X.size == 0:
        raise ShapeError("mean_all: empty tensor")
    n = X.size

    def vjp(g):
        return (np.full(X.shape, g[0] / n, dtype=X.dtype),)

    return _node(np.array([np.add.reduce(X, axis=None) / n], dtype=X.dtype), (x,), vjp, "mean_all")


def sq_l2_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance along the last axis, keeping that axis as width 1."""
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise ShapeError(f"sq_l2_dist: incompatible shapes {A.shape} and {B.shape}")
    diff = A - B

    def vjp(g):
        ga = 2.0 * diff * g
        return ga, -ga

    return _node((diff * diff).sum(axis=-1, keepdims=True), (a, b), vjp, "sq_l2_dist")


def scale(x: Tensor, s: float) -> Tensor:
    def vjp(g):
        return (g * s,)

    return _node(x.data * s, (x,), vjp, "scale")


def gather_index(p: Tensor, index) -> Tensor:
    """Pick ``p[i, index[i]]`` per row; output shape ``[n, 1]``. The index is constant."""
    P = p.data
    idx = np.asarray(index.data if isinstance(index, Tensor) else index)
    if idx.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(idx, 1), 0)):
            raise ShapeError("gather_index: index must be integral")
        idx = idx.astype(np.int64)
    idx = idx.reshape(-1)
    if P.ndim == 1:
        P2 = P.reshape(1, -1)
    elif P.ndim == 2:
        P2 = P
    else:
        raise ShapeError(f"gather_index: expected 1-D or 2-D input, got {P.shape}")
    if idx.shape[0] != P2.shape[0]:
        raise ShapeError(f"gather_index: {idx.shape[0]} indices for input of shape {P.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= P2.shape[1]):
        raise IndexError(f"gather_index: index out of range for {P2.shape[1]} columns")
    rows = np.arange(P2.shape[0])

    def vjp(g):
        out = np.zeros_like(P2)
        out[rows, idx] = g[:, 0]
        return (out.reshape(P.shape),)

    return _node(P2[rows, idx].reshape(-1, 1), (p,), vjp, "gather_index")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    X = x.data
    _check_finite("clamp_min", X)
    keep = X > floor

    def vjp(g):
        return (g * keep,)

    return _node(np.where(keep, X, floor).astype(X.dtype, copy=False), (x,), vjp, "clamp_min")


_DISPATCH = {
    "matmul": lambda ops, s: matmul(*ops),
    "add": lambda ops, s: add(*ops),
    "relu": lambda ops, s: relu(*ops),
    "concat_last_axis": lambda ops, s: concat_last_axis(ops),
    "softmax_last_axis": lambda ops, s: softmax_last_axis(*ops),
    "log": lambda ops, s: log(*ops),
    "pow_scalar": lambda ops, s: pow_scalar(ops[0], s),
    "mean_all": lambda ops, s: mean_all(*ops),
    "sq_l2_dist": lambda ops, s: sq_l2_dist(*ops),
    "scale": lambda ops, s: scale(ops[0], s),
    "gather_index": lambda ops, s: gather_index(ops[0], ops[1]),
    "clamp_min": lambda ops, s: clamp_min(ops[0], s),
}


def forward_op(kind: str, operands: Sequence, scalar_arg: Optional[float] = None) -> Tensor:
    """Apply kernel ``kind`` by name."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise KeyError(f"unknown kernel {kind!r}") from None
    if kind in ("pow_scalar", "scale", "clamp_min") and scalar_arg is None:
        raise ValueError(f"{kind} needs scalar_arg")
    if kind == "gather_index":
        ops = [as_tensor(operands[0]), operands[1]]
    else:
        ops = [as_tensor(o) for o in operands]
    return fn(ops, scalar_arg)


# ------------------------------------------------------- derived helpers


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def sum_all(xs: Iterable[Tensor]) -> Tensor:
    out = None
    for t in xs:
        out = t if out is None else add(out, t)
    if out is None:
        raise ShapeError("sum_all: nothing to sum")
    return out


def take_rows(x: Tensor, rows) -> Tensor:
    """Select rows of a 2-D tensor via a constant one-hot matmul."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    sel = np.zeros((rows.size, x.shape[0]), dtype=x.data.dtype)
    sel[np.arange(rows.size), rows] = 1.0
    return matmul(Tensor(sel), x)


def weighted_row_sum(weights, x: Tensor) -> Tensor:
    """``sum_i weights[i] * x[i, 0]`` for a column tensor; shape ``[1]``."""
    w = np.asarray(weights, dtype=x.data.dtype).reshape(1, -1)
    return mean_all(matmul(Tensor(w), x))


def zeros_scalar(dtype=None) -> Tensor:
    return Tensor(np.zeros(1, dtype=dtype or DEFAULT_DTYPE))


# ----------------------------------------------------------------- backward

GradientMap = Dict[str, np.ndarray]


def _key(t: Tensor) -> str:
    return t.name if t.name is not None else f"id{id(t)}"


def backward(loss: Tensor, params: Optional[Dict[str, Tensor]] = None) -> GradientMap:
    """Gradients of a shape-[1] loss w.r.t. every trainable leaf.

    Leaves listed in ``params`` but unreachable from ``loss`` get zeros. The
    graph is released afterwards; calling this twice on one loss raises.
    """
    if loss.data.shape != (1,):
        raise ShapeError(f"backward: loss must have shape (1,), got {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed")
    if not loss.requires_grad and not params:
        raise GraphError("backward: loss has no recorded graph")

    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                leaves[id(node)] = node
                grads[id(node)] = g
            continue
        parts = node._vjp(g)
        fault = _GRAD_FAULTS.get(node._op)
        for parent, pg in zip(node._parents, parts):
            if not parent.requires_grad:
                continue
            if fault is not None:
                pg = pg * fault
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    out: GradientMap = {}
    for i, leaf in leaves.items():
        out[_key(leaf)] = grads[i]
    if params:
        for name, t in params.items():
            if t.requires_grad and name not in out:
                out[name] = np.zeros_like(t.data)

    for node in order:
        if node._vjp is None:
            continue
        node._consumed = True
        node._parents = ()
        node._vjp = None
    return out


# ------------------------------------------------------------ gradient check


def finite_diff_check(
    loss_fn: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    return_details: bool = False,
):
    """Compare analytic gradients with central differences.

    Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = loss_fn(params)
    _check_finite("finite_diff_check", loss.data)
    analytic = backward(loss, params)
    worst = 0.0
    details = {}
    for name, t in params.items():
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(params).item()
            flat[i] = orig - eps
            down = loss_fn(params).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"finite_diff_check: non-finite loss perturbing {name}[{i}]")
            num = (up - down) / (2 * eps)
            rel = abs(ga[i] - num) / max(1.0, abs(ga[i]), abs(num))
            err = max(err, rel)
        details[name] = err
        worst = max(worst, err)
    if return_details:
        return worst, details
    return worst


# -------------------------------------------------------------------- AdamW


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, Tensor], grads: GradientMap, state: AdamWState):
    """One decoupled-weight-decay Adam update, in place."""
    trainable = {k for k, t in params.items() if t.requires_grad}
    if set(grads) != trainable:
        missing = sorted(trainable - set(grads))
        extra = sorted(set(grads) - trainable)
        raise KeyError(f"adamw_step: key mismatch (missing {missing}, unexpected {extra})")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: gradient shape {g.shape} for parameter {name} of shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= state.lr * update
    return params, state

"""Reverse-mode differentiable computation over numpy arrays.

Rank <= 2 tensors only. Each primitive computes its forward value eagerly
and registers a reverse rule; `backward` walks the tape in deterministic
topological order. 64-bit precision is the default (test mode), in which
non-finite values are rejected at node creation; 32-bit fast mode is
available through VEPM_PRECISION=f32.

Gradients of constants are never materialized: an op whose inputs all have
requires_grad=False folds into a fresh constant.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import digamma, expit
from scipy.special import gammaln as _sp_gammaln

from .rng import substream
from .sparse import SparseMatrix


class DiffMathError(ValueError):
    pass


class NonFiniteError(DiffMathError):
    pass


_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = _PRECISIONS[os.environ.get("VEPM_PRECISION", "f64")]


def set_precision(name: str):
    global _dtype
    if name not in _PRECISIONS:
        raise DiffMathError(f"unknown precision {name!r}")
    _dtype = _PRECISIONS[name]


def precision() -> str:
    return "f64" if _dtype is np.float64 else "f32"


def _test_mode() -> bool:
    return _dtype is np.float64


class Node:
    """One tape entry: cached output, parent references, reverse rule."""

    __slots__ = ("value", "grad", "parents", "op", "vjp", "requires_grad", "needs")

    def __init__(self, value, op="leaf", parents=(), vjp=None, requires_grad=False,
                 needs=()):
        value = np.asarray(value, dtype=_dtype)
        if value.ndim > 2:
            raise DiffMathError(f"rank {value.ndim} tensor in op {op!r}")
        if _test_mode() and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by op {op!r}")
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple[Node, ...] = parents
        self.op = op
        self.vjp: Optional[Callable] = vjp
        self.requires_grad = requires_grad
        # which parents actually need a gradient; lets two-input reverse
        # rules skip the product for a constant side
        self.needs: tuple[bool, ...] = needs

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"

    # operator sugar; scalars fold into constants
    def __add__(self, other):
        return add(self, as_node(other))

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return add(self, negate(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), negate(self))

    def __mul__(self, other):
        return elementwise_mul(self, as_node(other))

    def __rmul__(self, other):
        return elementwise_mul(as_node(other), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, as_node(other))


def constant(value) -> Node:
    return Node(value, op="const")


def parameter(value) -> Node:
    return Node(value, op="param", requires_grad=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op, value, parents, vjp) -> Node:
    needs = tuple(p.requires_grad for p in parents)
    if not any(needs):
        return Node(value, op=op)
    return Node(value, op=op, parents=tuple(parents), vjp=vjp,
                requires_grad=True, needs=needs)


_INCIDENCE_CACHE: dict = {}


def _incidence(indices: np.ndarray, n_rows: int):
    """Sparse (n_rows x E) selector with a 1 at (indices[e], e).

    Cached per index array; the cache holds a reference to the keyed array
    so its id cannot be recycled. Scatter indices are shared across layers
    and epochs (the adjacency support is fixed), so this builds once."""
    key = (id(indices), indices.shape[0], n_rows)
    hit = _INCIDENCE_CACHE.get(key)
    if hit is not None:
        return hit[1]
    import scipy.sparse as sp

    e = indices.shape[0]
    mat = sp.csr_matrix((np.ones(e), (indices, np.arange(e))), shape=(n_rows, e))
    if len(_INCIDENCE_CACHE) > 64:
        _INCIDENCE_CACHE.clear()
    _INCIDENCE_CACHE[key] = (indices, mat)
    return mat


def _segment_sum(values: np.ndarray, indices: np.ndarray, n_rows: int) -> np.ndarray:
    """out[indices[e]] += values[e]."""
    if values.ndim == 1:
        return np.bincount(indices, weights=values, minlength=n_rows).astype(
            values.dtype, copy=False)
    return np.asarray(_incidence(indices, n_rows) @ values)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    val = a.value + b.value

    def vjp(g, needs):
        return (_unbroadcast(g, a.value.shape) if needs[0] else None,
                _unbroadcast(g, b.value.shape) if needs[1] else None)

    return _make("add", val, (a, b), vjp)


def negate(a: Node) -> Node:
    return _make("negate", -a.value, (a,), lambda g, needs: (-g,))


def elementwise_mul(a: Node, b: Node) -> Node:
    val = a.value * b.value
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return _make("mul", val, (a, b), vjp)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DiffMathError("matmul expects two matrices")
    if a.value.shape[1] != b.value.shape[0]:
        raise DiffMathError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (g @ bv.T if needs[0] else None,
                av.T @ g if needs[1] else None)

    return _make("matmul", val, (a, b), vjp)


def sparse_dense_matmul(s: SparseMatrix, b: Node) -> Node:
    """Product of a constant sparse matrix with a dense operand.

    The sparse values are constants here; gradients flow to the dense side
    only. Aggregation over differentiable edge weights goes through
    gather/scatter instead.
    """
    if b.value.ndim != 2 or s.n_cols != b.value.shape[0]:
        raise DiffMathError("sparse_dense_matmul shape mismatch")
    val = s.matmul_dense(b.value)

    def vjp(g, needs):
        return (np.asarray(s.transpose_scipy() @ g),)

    return _make("spmm", val, (b,), vjp)


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make("relu", np.where(mask, a.value, 0.0), (a,), lambda g, needs: (g * mask,))


def softplus(a: Node) -> Node:
    val = np.logaddexp(0.0, a.value)
    sig = expit(a.value)
    return _make("softplus", val, (a,), lambda g, needs: (g * sig,))


def log(a: Node) -> Node:
    av = a.value
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.log(av)
    return _make("log", val, (a,), lambda g, needs: (g / av,))


def exp(a: Node) -> Node:
    val = np.exp(a.value)
    return _make("exp", val, (a,), lambda g, needs: (g * val,))


def power(a: Node, p: float) -> Node:
    av = a.value
    with np.errstate(invalid="ignore", divide="ignore"):
        val = av**p
    return _make("power", val, (a,), lambda g, needs: (g * p * av ** (p - 1.0),))


def clip(a: Node, lo: float, hi: float) -> Node:
    av = a.value
    mask = (av >= lo) & (av <= hi)
    return _make("clip", np.clip(av, lo, hi), (a,), lambda g, needs: (g * mask,))


def gammaln(a: Node) -> Node:
    av = a.value
    return _make("gammaln", _sp_gammaln(av), (a,), lambda g, needs: (g * digamma(av),))


def reduce_sum(a: Node, axis: Optional[int] = None) -> Node:
    val = a.value.sum(axis=axis)
    shape = a.value.shape

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", val, (a,), vjp)


def concat_columns(nodes: Iterable[Node]) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise DiffMathError("concat_columns of nothing")
    for n in nodes:
        if n.value.ndim != 2 or n.value.shape[0] != nodes[0].value.shape[0]:
            raise DiffMathError("concat_columns expects matrices with equal rows")
    val = np.concatenate([n.value for n in nodes], axis=1)
    widths = [n.value.shape[1] for n in nodes]
    offsets = np.cumsum([0] + widths)

    def vjp(g, needs):
        return tuple(g[:, offsets[i] : offsets[i + 1]] if needs[i] else None
                     for i in range(len(widths)))

    return _make("concat", val, tuple(nodes), vjp)


def slice_columns(a: Node, j0: int, j1: int) -> Node:
    if a.value.ndim != 2:
        raise DiffMathError("slice_columns expects a matrix")
    val = a.value[:, j0:j1]
    shape = a.value.shape

    def vjp(g, needs):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, j0:j1] = g
        return (out,)

    return _make("slice_cols", val, (a,), vjp)


def reshape(a: Node, shape: tuple) -> Node:
    old = a.value.shape
    return _make("reshape", a.value.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def gather_rows(a: Node, indices: np.ndarray) -> Node:
    indices = np.asarray(indices, dtype=np.int64)
    val = a.value[indices]
    shape = a.value.shape

    def vjp(g, needs):
        return (_segment_sum(g, indices, shape[0]),)

    return _make("gather", val, (a,), vjp)


def scatter_add_rows(a: Node, indices: np.ndarray, n_rows: int) -> Node:
    """out[indices[e]] += a[e]; the reverse rule is a gather."""
    indices = np.asarray(indices, dtype=np.int64)
    out = _segment_sum(a.value, indices, n_rows)
    return _make("scatter", out, (a,), lambda g, needs: (g[indices],))


def scale_rows(a: Node, s: Node) -> Node:
    """Multiply row i of matrix `a` by scalar s[i]."""
    if a.value.ndim != 2 or s.value.ndim != 1:
        raise DiffMathError("scale_rows expects (matrix, vector)")
    return elementwise_mul(a, reshape(s, (s.value.shape[0], 1)))


def row_softmax_with_temperature(a: Node, tau: float) -> Node:
    if tau <= 0:
        raise DiffMathError("temperature must be positive")
    x = a.value / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    val = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        inner = (g * val).sum(axis=-1, keepdims=True)
        return ((val * (g - inner)) / tau,)

    return _make("softmax", val, (a,), vjp)


def log_softmax_rows(a: Node) -> Node:
    x = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    val = x - lse
    soft = np.exp(val)

    def vjp(g, needs):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", val, (a,), vjp)


def dropout(a: Node, rate: float, rng: np.random.Generator, training: bool) -> Node:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise DiffMathError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return a
    mask = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    mask = mask.astype(_dtype)
    return _make("dropout", a.value * mask, (a,), lambda g, needs: (g * mask,))


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Node):
    """Accumulate d(loss)/d(param) into every reachable parameter's .grad.

    Requires a scalar loss. Repeated calls without zeroing add, per the
    accumulation contract; intermediate nodes never retain gradients.
    """
    if loss.value.shape != ():
        raise DiffMathError("backward requires a scalar loss node")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=_dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node.vjp(g, node.needs)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named trainable tensors with gradients, partitioned into groups.

    Groups are 'phi' (inference side), 'theta' (generative side), and
    'shared' for the community activations updated by both phases.
    """

    def __init__(self):
        self._nodes: dict[str, Node] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, value, group: str) -> Node:
        if name in self._nodes:
            raise DiffMathError(f"duplicate parameter {name!r}")
        node = parameter(value)
        self._nodes[name] = node
        self._groups[name] = group
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def names(self, groups=None) -> list[str]:
        if groups is None:
            return list(self._nodes)
        if isinstance(groups, str):
            groups = (groups,)
        return [n for n in self._nodes if self._groups[n] in groups]

    def zero_grad(self, names=None):
        for n in names if names is not None else self._nodes:
            self._nodes[n].grad = None

    def grad(self, name: str) -> np.ndarray:
        node = self._nodes[name]
        if node.grad is None:
            return np.zeros_like(node.value)
        return node.grad

    def set_value(self, name: str, value: np.ndarray):
        node = self._nodes[name]
        value = np.asarray(value, dtype=_dtype)
        if value.shape != node.value.shape:
            raise DiffMathError(f"shape mismatch loading {name!r}")
        node.value = value

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        selected = names if names is not None else self._nodes
        return {n: self._nodes[n].value.copy() for n in selected}

    def restore(self, snap: dict[str, np.ndarray]):
        for n, v in snap.items():
            self.set_value(n, v)

    def n_scalars(self) -> int:
        return sum(n.value.size for n in self._nodes.values())

    def entries(self) -> list[tuple[str, str, np.ndarray]]:
        return [(n, self._groups[n], node.value) for n, node in self._nodes.items()]

    def save(self, path: str, meta: Optional[dict] = None, extra=None):
        save_arrays(path, self.entries() + list(extra or []), meta)

    def load(self, path: str) -> dict:
        """Load values for matching names; returns the checkpoint meta dict."""
        entries, meta = load_arrays(path)
        for name, _group, arr in entries:
            if name in self._nodes:
                self.set_value(name, arr)
        return meta


# ---------------------------------------------------------------------------
# checkpoint file format: text header, then raw little-endian float64


_MAGIC = "VEPM-CHECKPOINT v1"


def save_arrays(path: str, entries, meta: Optional[dict] = None):
    header = [_MAGIC]
    for key, value in (meta or {}).items():
        header.append(f"meta {key} {value}")
    blobs = []
    for name, group, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
        header.append(f"param {name} {group} {dims}")
        blobs.append(arr.astype("<f8").tobytes())
    header.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"data\n") + len(b"data\n")
    lines = raw[: end - 1].decode("utf-8").splitlines()
    if not lines or lines[0] != _MAGIC:
        raise DiffMathError(f"{path}: not a checkpoint file")
    meta: dict[str, str] = {}
    specs = []
    for line in lines[1:-1]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "param":
            name, group, dims = rest.split(" ")
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            specs.append((name, group, shape))
        else:
            raise DiffMathError(f"{path}: bad header line {line!r}")
    entries = []
    offset = end
    for name, group, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        entries.append((name, group, arr.copy()))
        offset += count * 8
    return entries, meta


# ---------------------------------------------------------------------------
# gradient verification


class NondeterministicLoss(DiffMathError):
    pass


def finite_difference_check(
    loss_builder: Callable[[], Node],
    store: ParameterStore,
    eps: float = 1e-5,
    samples: int = 100,
    seed: int = 0,
    names=None,
) -> float:
    """Max relative error between reverse-mode and central differences.

    Samples random parameter coordinates; the builder must be deterministic
    (verified by evaluating it twice before perturbing anything).
    """
    names = list(names if names is not None else store.names())
    base1 = float(loss_builder().value)
    base2 = float(loss_builder().value)
    if base1 != base2:
        raise NondeterministicLoss("loss builder returned different baseline values")

    store.zero_grad()
    backward(loss_builder())
    grads = {n: store.grad(n).copy() for n in names}
    store.zero_grad()

    rng = substream(seed, "fdcheck")
    worst = 0.0
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        node = store[name]
        idx = int(rng.integers(node.value.size))
        original = node.value.flat[idx]
        node.value.flat[idx] = original + eps
        f_plus = float(loss_builder().value)
        node.value.flat[idx] = original - eps
        f_minus = float(loss_builder().value)
        node.value.flat[idx] = original
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        g_ad = float(grads[name].flat[idx])
        rel = abs(g_fd - g_ad) / max(1e-8, abs(g_fd) + abs(g_ad))
        worst = max(worst, rel)
    return worst

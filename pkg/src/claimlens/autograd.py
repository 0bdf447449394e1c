"""Reverse-mode automatic differentiation over numpy arrays.

Every operation records itself on an implicit tape (the DAG of Tensor
parents).  backward() replays the tape in reverse topological order and
returns gradients keyed by parameter name.  Arrays are never mutated after
creation; updates replace the whole leaf.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

PRECISIONS = {"single": np.float32, "double": np.float64}

LN_EPS = 1e-5  # layer_norm variance floor


class ShapeError(ValueError):
    """Operands have incompatible shapes or dtypes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or infinity; message names the op."""


def _dtype_for(precision: str) -> np.dtype:
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
    return np.dtype(PRECISIONS[precision])


class Tensor:
    """Immutable n-d array plus its position on the tape."""

    __slots__ = ("data", "parents", "grad_fn", "op", "param_name")

    def __init__(self, data: np.ndarray, parents: tuple = (), grad_fn=None,
                 op: str = "leaf", param_name: str | None = None):
        data = np.asarray(data)  # numpy scalars (0-d results) lack mutable flags
        if data.dtype not in (np.float32, np.float64):
            raise ShapeError(f"tensor dtype must be float32/float64, got {data.dtype}")
        if not np.isfinite(data).all():
            raise NonFiniteError(f"op {op!r} produced a non-finite value")
        data.flags.writeable = False
        self.data = data
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op
        self.param_name = param_name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    # Operator sugar; the named functions below are the real surface.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, precision: str = "double") -> Tensor:
    """Public leaf constructor; copies its input."""
    arr = np.array(data, dtype=_dtype_for(precision), copy=True)
    return Tensor(arr)


def _const(x, like: Tensor) -> np.ndarray:
    """Coerce a python scalar / ndarray constant to the operand dtype."""
    return np.asarray(x, dtype=like.dtype)


def _check_same_dtype(op: str, *ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dts)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bdata = _const(b, a)
        out = a.data + bdata

        def grad_fn(g):
            return (_unbroadcast(g, a.shape),)

        return Tensor(out, (a,), grad_fn, "add")
    _check_same_dtype("add", a, b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), grad_fn, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bdata = _const(b, a)
        out = a.data * bdata

        def grad_fn(g):
            return (_unbroadcast(g * bdata, a.shape),)

        return Tensor(out, (a,), grad_fn, "mul")
    _check_same_dtype("mul", a, b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, (a, b), grad_fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, (a, b), grad_fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b), with x [..., in], w [in, out], b [out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return Tensor(out.copy(), (x,), grad_fn, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(x.data, a, b).copy()

    def grad_fn(g):
        return (np.swapaxes(g, a, b),)

    return Tensor(out, (x,), grad_fn, "swapaxes")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype("concat", *parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(parts), grad_fn, "concat")


def slice_axis0(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis 0 of {x.shape}")
    out = x.data[start:stop].copy()

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[start:stop] = g
        return (full,)

    return Tensor(out, (x,), grad_fn, "slice_axis0")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return Tensor(out.reshape(()), (x,), grad_fn, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = float(x.data.size)
    return mul(sum_all(x), 1.0 / n)


def gelu(x: Tensor) -> Tensor:
    """Exact gaussian error linear unit, y = 0.5 x (1 + erf(x / sqrt(2)))."""
    e = erf(x.data / math.sqrt(2.0))
    out = (0.5 * x.data * (1.0 + e)).astype(x.dtype)

    def grad_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        d = 0.5 * (1.0 + e) + x.data * pdf
        return ((g * d).astype(x.dtype),)

    return Tensor(out, (x,), grad_fn, "gelu")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype("layer_norm", x, gain, bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} "
                         f"do not match feature dim {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x.data - mu) * inv
    out = (xhat * gain.data + bias.data).astype(x.dtype)

    def grad_fn(g):
        n = x.shape[-1]
        dxhat = g * gain.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)

    return Tensor(out, (x, gain, bias), grad_fn, "layer_norm")


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer id array; grads scatter-add back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"id out of range for table with {table.shape[0]} rows")
    out = table.data[ids].copy()

    def grad_fn(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor(out, (table,), grad_fn, "embed_lookup")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token cross-entropy over masked positions.

    logits [N, V], targets [N] int ids, mask [N] bool; rows where mask is
    False contribute nothing.  Uses the log-sum-exp form for stability.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    n, v = logits.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets "
                         f"{targets.shape} / mask {mask.shape}")
    if not mask.any():
        raise ShapeError("cross_entropy: empty mask")
    if targets[mask].min() < 0 or targets[mask].max() >= v:
        raise ShapeError(f"cross_entropy: target id out of range for vocab {v}")
    m = logits.data.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=-1))
    picked = logits.data[np.arange(n), targets]
    cnt = float(mask.sum())
    loss = np.asarray(((lse - picked) * mask).sum() / cnt, dtype=logits.dtype)

    def grad_fn(g):
        p = np.exp(logits.data - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        p *= (mask / cnt)[:, None]
        return ((g * p).astype(logits.dtype),)

    return Tensor(loss.reshape(()), (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# parameters and the backward pass
# ---------------------------------------------------------------------------

PARAM_GROUPS = ("projector", "qava", "vision", "llm")


class Parameter:
    """Named trainable leaf; holds the current value as an immutable Tensor."""

    __slots__ = ("name", "group", "trainable", "_tensor")

    def __init__(self, name: str, data: np.ndarray, group: str, trainable: bool = True):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        self.name = name
        self.group = group
        self.trainable = trainable
        self._tensor = Tensor(np.array(data, copy=True), param_name=name)

    @property
    def tensor(self) -> Tensor:
        return self._tensor

    @property
    def data(self) -> np.ndarray:
        return self._tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._tensor.shape

    def assign(self, data: np.ndarray) -> None:
        """Replace the value (optimizer step or gradcheck probe)."""
        if data.shape != self.shape:
            raise ShapeError(f"assign to {self.name}: shape {data.shape} != {self.shape}")
        self._tensor = Tensor(np.array(data, dtype=self._tensor.dtype, copy=True),
                              param_name=self.name)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group!r}, trainable={self.trainable})"


class ParamStore:
    """Flat registry of a model's parameters, keyed by unique name."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, group: str) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, group)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def by_group(self, group: str) -> list[Parameter]:
        return [p for n, p in sorted(self._params.items()) if p.group == group]

    def groups(self) -> set[str]:
        return {p.group for p in self._params.values()}

    def set_trainable_groups(self, groups: set[str]) -> None:
        """Freeze everything outside `groups`."""
        for p in self._params.values():
            p.trainable = p.group in groups


def _topo(loss: Tensor) -> list[Tensor]:
    """Iterative post-order over the tape (recursion-free for deep graphs)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParamStore) -> dict[str, Tensor]:
    """Accumulate d loss / d parameter for every trainable parameter.

    Returns a map from parameter name to gradient Tensor; frozen parameters
    are absent.  Each tape node is visited exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        if node.grad_fn is None:
            continue  # leaves keep their accumulated grads in the map
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"grad shape {pg.shape} != {parent.shape} from op {node.op!r}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out: dict[str, Tensor] = {}
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(id(p.tensor))
        if g is not None:
            out[p.name] = Tensor(g.copy(), op="grad")
    return out


def finite_diff_grad(f, p: Parameter, eps: float = 1e-5,
                     coords: list[tuple[int, ...]] | None = None) -> Tensor:
    """Central finite differences of scalar f() w.r.t. parameter p.

    Perturbs one coordinate at a time; `coords` restricts the probe to a
    subset (all coordinates when None).  Restores p before returning.
    """
    base = p.data.copy()
    grad = np.zeros_like(base)
    idx_list = coords if coords is not None else list(np.ndindex(base.shape))
    try:
        for idx in idx_list:
            probe = base.copy()
            probe[idx] = base[idx] + eps
            p.assign(probe)
            hi = float(f())
            probe[idx] = base[idx] - eps
            p.assign(probe)
            lo = float(f())
            grad[idx] = (hi - lo) / (2.0 * eps)
    finally:
        p.assign(base)
    return Tensor(grad, op="fd_grad")

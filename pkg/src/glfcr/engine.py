"""Dense-tensor reverse-mode autodiff engine.

Values are numpy arrays (float32 for training, float64 for verification).
Every operation builds a :class:`Node` holding the forward value and a
closure that maps the upstream gradient to per-parent gradients; a call to
:func:`backward` on a scalar root walks the tape in reverse topological
order and accumulates gradients into parameter leaves.

Convolution is cross-correlation (no kernel flip). All reductions run
single-threaded through numpy, so results are deterministic for a fixed
seed; ``set_strict`` records the caller's intent and gates any future
intra-op parallelism.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with the operation."""


class ConfigError(ValueError):
    """Configuration values violate a structural constraint."""


class ContractError(ValueError):
    """An operation precondition was violated by the caller."""


_STRICT = True


def set_strict(flag: bool) -> None:
    global _STRICT
    _STRICT = bool(flag)


def strict_enabled() -> bool:
    return _STRICT


class Node:
    """One vertex of the computation graph.

    ``value`` is the forward result, ``grad`` the accumulated gradient
    (lazily allocated, same shape as ``value``). Leaves created with
    ``requires_grad=True`` are trainable parameters; interior nodes carry a
    backward closure returning one gradient per parent (``None`` for
    non-differentiable slots).
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward=None,
                 requires_grad: bool | None = None, name: str | None = None):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = self.name or ("param" if self.is_leaf and self.requires_grad else "node")
        return f"Node({tag}, shape={self.value.shape}, dtype={self.value.dtype})"

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    # arithmetic sugar; scalars are wrapped as constants of matching dtype
    def __add__(self, other):
        return add(self, as_node(other, self.dtype))

    def __radd__(self, other):
        return add(as_node(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_node(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_node(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, as_node(other, self.dtype))

    def __rmul__(self, other):
        return mul(as_node(other, self.dtype), self)

    def __neg__(self):
        return mul(self, as_node(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, requires_grad: bool = False, name: str | None = None) -> Node:
    return Node(value, requires_grad=requires_grad, name=name)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Node(arr)


def _same_dtype(*nodes: Node) -> np.dtype:
    dt = nodes[0].value.dtype
    for n in nodes[1:]:
        if n.value.dtype != dt:
            raise ContractError(f"mixed dtypes in op: {dt} vs {n.value.dtype}")
    return dt


def _reduce_grad(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Node, b: Node) -> Node:
    _same_dtype(a, b)
    out = a.value + b.value

    def bw(g):
        return _reduce_grad(g, a.value.shape), _reduce_grad(g, b.value.shape)

    return Node(out, (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    _same_dtype(a, b)
    out = a.value - b.value

    def bw(g):
        return _reduce_grad(g, a.value.shape), _reduce_grad(-g, b.value.shape)

    return Node(out, (a, b), bw)


def mul(a: Node, b: Node) -> Node:
    _same_dtype(a, b)
    out = a.value * b.value

    def bw(g):
        return (_reduce_grad(g * b.value, a.value.shape),
                _reduce_grad(g * a.value, b.value.shape))

    return Node(out, (a, b), bw)


def absolute(a: Node) -> Node:
    out = np.abs(a.value)
    sgn = np.sign(a.value)  # subgradient at 0 is 0

    def bw(g):
        return (g * sgn,)

    return Node(out, (a,), bw)


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0)

    def bw(g):
        return (g * (out > 0),)

    return Node(out, (a,), bw)


def gelu(a: Node) -> Node:
    """Exact-erf GELU: x * Phi(x)."""
    x = a.value
    phi = 0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))
    out = (x * phi).astype(x.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (phi + x * pdf),)

    return Node(out, (a,), bw)


def reshape(a: Node, shape) -> Node:
    out = a.value.reshape(shape)

    def bw(g):
        return (g.reshape(a.value.shape),)

    return Node(out, (a,), bw)


def transpose(a: Node, axes) -> Node:
    axes = tuple(axes)
    out = a.value.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return Node(out, (a,), bw)


def roll(a: Node, shifts, axes) -> Node:
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = np.roll(a.value, shifts, axis=axes)
    back = tuple(-s for s in shifts)

    def bw(g):
        return (np.roll(g, back, axis=axes),)

    return Node(out, (a,), bw)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    nodes = list(nodes)
    _same_dtype(*nodes)
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Node(out, tuple(nodes), bw)


def sum_all(a: Node) -> Node:
    out = np.asarray(a.value.sum(), dtype=a.value.dtype)

    def bw(g):
        return (np.broadcast_to(g, a.value.shape),)

    return Node(out, (a,), bw)


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = np.asarray(a.value.mean(), dtype=a.value.dtype)

    def bw(g):
        return (np.broadcast_to(g / n, a.value.shape),)

    return Node(out, (a,), bw)


def gather_rows(table: Node, index: np.ndarray) -> Node:
    """Row lookup ``table[index]`` with scatter-add backward."""
    index = np.asarray(index)
    if index.ndim != 1:
        raise ShapeError(f"gather index must be 1-D, got {index.shape}")
    if index.min() < 0 or index.max() >= table.value.shape[0]:
        raise ShapeError("gather index out of range")
    out = table.value[index]

    def bw(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, index, g)
        return (dt,)

    return Node(out, (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    _same_dtype(a, b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {list(av.shape)} x {list(bv.shape)}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {list(av.shape)} x {list(bv.shape)}")
    out = av @ bv

    def bw(g):
        da = g @ np.swapaxes(bv, -1, -2)
        db = np.swapaxes(av, -1, -2) @ g
        return _reduce_grad(da, av.shape), _reduce_grad(db, bv.shape)

    return Node(out, (a, b), bw)


def softmax(a: Node, axis: int) -> Node:
    x = a.value
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {list(x.shape)}")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        s = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - s),)

    return Node(out, (a,), bw)


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    xv = x.value
    _same_dtype(x, gamma, beta)
    if gamma.value.shape != (xv.shape[-1],) or beta.value.shape != (xv.shape[-1],):
        raise ShapeError(f"layer_norm affine shape {gamma.value.shape} vs channels {xv.shape[-1]}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xv.dtype))
    xhat = xc * inv
    out = xhat * gamma.value + beta.value

    def bw(g):
        red = tuple(range(xv.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        gg = g * gamma.value
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return Node(out, (x, gamma, beta), bw)


def conv2d(x: Node, w: Node, bias: Node, pad: int = 0) -> Node:
    """2-D cross-correlation with zero padding, stride 1.

    x: [B,Cin,H,W], w: [Cout,Cin,kh,kw] (kh, kw odd), bias: [Cout].
    """
    xv, wv, bv = x.value, w.value, bias.value
    _same_dtype(x, w, bias)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D operands, got {list(xv.shape)} x {list(wv.shape)}")
    B, cin, H, W = xv.shape
    cout, cin_w, kh, kw = wv.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {list(xv.shape)} vs kernel {list(wv.shape)}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if pad < 0:
        raise ContractError("conv2d pad must be >= 0")
    if bv.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {list(bv.shape)} vs Cout {cout}")
    ho = H + 2 * pad - kh + 1
    wo = W + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output size {ho}x{wo} non-positive for input {H}x{W}, "
                         f"kernel {kh}x{kw}, pad {pad}")

    if pad:
        xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xv
    # shift-and-GEMM: one [Cout,Cin] x [Cin, B*ho*wo] product per kernel tap
    acc = np.zeros((cout, B, ho, wo), dtype=xv.dtype)
    for u in range(kh):
        for v in range(kw):
            acc += np.tensordot(wv[:, :, u, v], xp[:, :, u:u + ho, v:v + wo], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    out += bv[None, :, None, None]

    def bw(g):
        dw = np.empty_like(wv)
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, :, u:u + ho, v:v + wo]
                dw[:, :, u, v] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, u:u + ho, v:v + wo] += np.tensordot(
                    wv[:, :, u, v], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return Node(out, (x, w, bias), bw)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen = {id(root)}
    stack: list[tuple[Node, Iterable[Node]]] = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            order.append(node)
            stack.pop()
        elif id(child) not in seen:
            seen.add(id(child))
            stack.append((child, iter(child.parents)))
    return order


def backward(root: Node, retain_all: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into every reachable parameter's ``grad``.

    ``root`` must be scalar (shape () or (1,)). Repeated calls keep
    accumulating. With ``retain_all`` interior nodes also keep their grads
    (costs memory; intended for inspection and tests).
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise ContractError(f"backward root must be scalar, got shape {list(root.value.shape)}")
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if retain_all or (node.is_leaf and node.requires_grad):
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
        if node._backward is None or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# trainable parameters


class ParamStore:
    """Ordered registry of named trainable leaves with seeded initialization."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(self.seed)
        self._entries: dict[str, Node] = {}

    def _register(self, name: str, value: np.ndarray) -> Node:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name: {name}")
        node = leaf(np.ascontiguousarray(value, dtype=self.dtype),
                    requires_grad=True, name=name)
        self._entries[name] = node
        return node

    def uniform(self, name: str, shape, fan_in: int) -> Node:
        s = math.sqrt(1.0 / fan_in)
        return self._register(name, self._rng.uniform(-s, s, size=shape))

    def zeros(self, name: str, shape) -> Node:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Node:
        return self._register(name, np.ones(shape))

    def trunc_normal(self, name: str, shape, std: float = 0.02) -> Node:
        vals = self._rng.normal(0.0, std, size=shape)
        bad = np.abs(vals) > 2 * std
        while bad.any():  # resample outliers, keeps the distribution truncated
            vals[bad] = self._rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(vals) > 2 * std
        return self._register(name, vals)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.values())

    def __contains__(self, name: str):
        return name in self._entries

    def __getitem__(self, name: str) -> Node:
        return self._entries[name]

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def zero_grads(self) -> None:
        for node in self._entries.values():
            node.grad = None

    def ensure_grads(self) -> None:
        """Materialize zero gradients on parameters the loss did not reach."""
        for node in self._entries.values():
            if node.grad is None:
                node.grad = np.zeros_like(node.value)

    def n_scalars(self) -> int:
        return sum(n.value.size for n in self._entries.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._entries.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(state)
        extra = set(state) - set(self._entries)
        if missing or extra:
            raise ConfigError(f"parameter name mismatch: missing={sorted(missing)} "
                              f"unexpected={sorted(extra)}")
        for k, node in self._entries.items():
            arr = np.asarray(state[k], dtype=node.value.dtype)
            if arr.shape != node.value.shape:
                raise ShapeError(f"parameter {k}: stored shape {list(arr.shape)} "
                                 f"vs expected {list(node.value.shape)}")
            node.value = np.ascontiguousarray(arr)

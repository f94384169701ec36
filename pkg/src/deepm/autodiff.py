"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every primitive records its inputs and a vector-Jacobian product on the
active :class:`Tape`. ``backward`` replays the tape in reverse, which is what
lets the training loop inject an externally computed upstream gradient at
the model output instead of differentiating a scalar loss.

There are deliberately no batch-coupled layers here: every primitive acts
independently on each leading-axis sample unless it reduces over that axis
explicitly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Params:
    """Named parameter arrays plus accumulated gradients."""

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for k, v in (values or {}).items():
            self.add(k, v)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        self.values[name] = np.array(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.values[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def count(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "Params":
        out = Params()
        for k, v in self.values.items():
            out.values[k] = v.copy()
            out.grads[k] = self.grads[k].copy()
        return out

    def grad_dict(self) -> dict[str, np.ndarray]:
        return {k: g.copy() for k, g in self.grads.items()}


class Tensor:
    """A value on a tape. Nodes that require grad carry a VJP closure."""

    __slots__ = ("value", "tape", "parents", "vjp", "requires_grad", "index", "name")

    def __init__(self, value, tape: "Tape", parents=(), vjp=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive applications.

    ``record=False`` gives a forward-only tape: values are computed but no
    closures or activations are retained (statistics pass of the two-pass
    protocol). ``seed`` keys the dropout generator; ``training`` switches
    dropout on.
    """

    def __init__(
        self,
        params: Params | None = None,
        record: bool = True,
        seed: int = 0,
        training: bool = False,
        check_finite: bool = True,
    ):
        self.params = params if params is not None else Params()
        self.record = record
        self.seed = int(seed)
        self.training = training
        self.check_finite = check_finite
        self.nodes: list[Tensor] = []
        self._leaves: dict[str, Tensor] = {}

    def param(self, name: str) -> Tensor:
        t = self._leaves.get(name)
        if t is None:
            t = Tensor(self.params.values[name], self, requires_grad=self.record, name=name)
            if self.record:
                t.index = len(self.nodes)
                self.nodes.append(t)
            self._leaves[name] = t
        return t

    def release(self) -> None:
        """Drop recorded nodes so activations are freed without waiting for
        the cycle collector (nodes and tape reference each other)."""
        self.nodes.clear()
        self._leaves.clear()

    def const(self, value) -> Tensor:
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=DTYPE), self)

    def _emit(self, op: str, value: np.ndarray, parents: tuple, vjp_factory: Callable) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{op}: non-finite output")
        if self.record and any(p.requires_grad for p in parents):
            node = Tensor(value, self, parents, vjp_factory(), requires_grad=True, name=op)
            node.index = len(self.nodes)
            self.nodes.append(node)
            return node
        return Tensor(value, self)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one argument must be a Tensor")


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors from different tapes")
        return x
    return Tensor(np.asarray(x, dtype=DTYPE), tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("add", a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape._emit(
        "add", a.value + b.value, (a, b),
        lambda: lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("sub", a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape._emit(
        "sub", a.value - b.value, (a, b),
        lambda: lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("mul", a.value, b.value)
    av, bv = a.value, b.value
    return tape._emit(
        "mul", av * bv, (a, b),
        lambda: lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape("div", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return tape._emit(
        "div", out, (a, b),
        lambda: lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def _unary(op: str, x: Tensor, value: np.ndarray, deriv: Callable[[], np.ndarray]) -> Tensor:
    return x.tape._emit(op, value, (x,), lambda: (lambda d: lambda g: (g * d,))(deriv()))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _unary("tanh", x, y, lambda: 1.0 - y * y)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.value)
    return _unary("sigmoid", x, y, lambda: y * (1.0 - y))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows and avoids masked indexing
    out = np.tanh(0.5 * v)
    out += 1.0
    out *= 0.5
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    v = x.value
    return _unary("silu", x, v * s, lambda: s * (1.0 + v * (1.0 - s)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _unary("exp", x, y, lambda: y)


def log(x: Tensor) -> Tensor:
    v = x.value
    return _unary("log", x, np.log(v), lambda: 1.0 / v)


def square(x: Tensor) -> Tensor:
    v = x.value
    return _unary("square", x, v * v, lambda: 2.0 * v)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.value)
    return _unary("sqrt", x, y, lambda: 0.5 / y)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; clamped entries pass no gradient."""
    v = x.value
    return _unary("clamp_min", x, np.maximum(v, lo), lambda: (v > lo).astype(DTYPE))


def tabs(x: Tensor) -> Tensor:
    v = x.value
    return _unary("abs", x, np.abs(v), lambda: np.sign(v))


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}") from None

    def factory():
        def vjp(g):
            if bv.ndim == 2:
                ga = g @ bv.T
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            return ga, gb
        return vjp

    return tape._emit("matmul", out, (a, b), factory)


def linear(x: Tensor, w, b=None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b``."""
    tape = _tape_of(x, w)
    x, w = _lift(tape, x), _lift(tape, w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {xv.shape} and {wv.shape}")
    x2 = np.ascontiguousarray(xv).reshape(-1, xv.shape[-1])
    out = (x2 @ wv).reshape(xv.shape[:-1] + (wv.shape[1],))
    if b is None:
        parents = (x, w)
    else:
        b = _lift(tape, b)
        if b.shape != (wv.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {wv.shape}")
        out += b.value
        parents = (x, w, b)

    def factory():
        def vjp(g):
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            gx = (g2 @ wv.T).reshape(xv.shape)
            gw = x2.T @ g2
            if b is None:
                return gx, gw
            return gx, gw, g2.sum(axis=0)
        return vjp

    return tape._emit("linear", out, parents, factory)


# -------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def factory():
        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return vjp

    return x.tape._emit("sum", np.asarray(out, dtype=DTYPE), (x,), factory)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return x.tape._emit("reshape", out, (x,), lambda: lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return x.tape._emit("transpose", np.transpose(x.value, axes), (x,), lambda: lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    try:
        out = x.value[idx]
    except IndexError as e:
        raise ShapeError(f"getitem: {e} for shape {shape}") from None

    def factory():
        def vjp(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)
        return vjp

    return x.tape._emit("getitem", np.array(out, dtype=DTYPE), (x,), factory)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return tape._emit("concat", out, tuple(xs), lambda: lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([x.value for x in xs], axis=axis)
    n = len(xs)

    def factory():
        def vjp(g):
            return tuple(np.take(g, i, axis=axis) for i in range(n))
        return vjp

    return tape._emit("stack", out, tuple(xs), factory)


def shift_time(x: Tensor, axis: int) -> Tensor:
    """Lag by one step along ``axis``; the first slot becomes zero."""
    v = x.value
    out = np.zeros_like(v)
    n = v.shape[axis]
    dst = [slice(None)] * v.ndim
    src = [slice(None)] * v.ndim
    dst[axis] = slice(1, n)
    src[axis] = slice(0, n - 1)
    dst, src = tuple(dst), tuple(src)
    out[dst] = v[src]

    def factory():
        def vjp(g):
            gx = np.zeros_like(g)
            gx[src] = g[dst]
            return (gx,)
        return vjp

    return x.tape._emit("shift", out, (x,), factory)


def lstm(xproj: Tensor, w_h, h0, c0) -> Tensor:
    """Fused LSTM recurrence over the second-to-last axis.

    ``xproj`` is ``[..., L, 4d]`` (input projection plus bias, gate order
    i, f, g, o), ``w_h`` is ``[d, 4d]``, ``h0`` and ``c0`` are ``[..., d]``.
    Returns hidden states ``[..., L, d]``. The backward pass is ordinary
    backpropagation through time.
    """
    tape = _tape_of(xproj, w_h, h0, c0)
    xproj, w_h, h0, c0 = (_lift(tape, v) for v in (xproj, w_h, h0, c0))
    xv, wv = xproj.value, w_h.value
    d = wv.shape[0]
    if wv.shape != (d, 4 * d) or xv.shape[-1] != 4 * d or h0.shape != xv.shape[:-2] + (d,) or c0.shape != h0.shape:
        raise ShapeError(f"lstm: incompatible shapes x{xv.shape} w{wv.shape} h0{h0.shape} c0{c0.shape}")
    lead = xv.shape[:-2]
    L = xv.shape[-2]
    x2 = xv.reshape(-1, L, 4 * d)
    m = x2.shape[0]
    h = h0.value.reshape(m, d)
    c = c0.value.reshape(m, d)
    hs = np.empty((m, L, d))
    cache = []
    for t in range(L):
        z = x2[:, t] + h @ wv
        i = _sigmoid(z[:, :d])
        f = _sigmoid(z[:, d:2 * d])
        g = np.tanh(z[:, 2 * d:3 * d])
        o = _sigmoid(z[:, 3 * d:])
        c_prev = c
        c = f * c + i * g
        tc = np.tanh(c)
        h_prev = h
        h = o * tc
        hs[:, t] = h
        if tape.record:
            cache.append((i, f, g, o, c_prev, tc, h_prev))
    out = hs.reshape(lead + (L, d))

    def factory():
        def vjp(gout):
            g2 = gout.reshape(m, L, d)
            gx = np.empty((m, L, 4 * d))
            gw = np.zeros_like(wv)
            dh = np.zeros((m, d))
            dc = np.zeros((m, d))
            for t in range(L - 1, -1, -1):
                i, f, g, o, c_prev, tc, h_prev = cache[t]
                dh = dh + g2[:, t]
                do = dh * tc
                dc = dc + dh * o * (1.0 - tc * tc)
                di = dc * g
                dg = dc * i
                df = dc * c_prev
                dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
                gx[:, t] = dz
                gw += h_prev.T @ dz
                dh = dz @ wv.T
                dc = dc * f
            return gx.reshape(xv.shape), gw, dh.reshape(h0.shape), dc.reshape(c0.shape)
        return vjp

    return tape._emit("lstm", out, (xproj, w_h, h0, c0), factory)


# --------------------------------------------------------- normalization


def softmax(x: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """Softmax with an optional constant additive bias (may hold ``-inf``).

    Slots whose bias is ``-inf`` get probability exactly 0 and zero gradient.
    A row with every slot masked returns all zeros instead of NaN.
    """
    z = x.value
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE)
        _broadcast_shape("softmax", z, bias)
        z = z + bias
    # exp(-inf - finite) is exactly 0, so masked slots need no special casing
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax[~np.isfinite(zmax)] = 0.0
    e = np.exp(z - zmax)
    s = e.sum(axis=axis, keepdims=True)
    s[s == 0.0] = 1.0
    e /= s
    y = e
    if y.shape != x.shape:
        raise ShapeError(f"softmax: bias {bias.shape} would broadcast input {x.shape} to {y.shape}")

    def factory():
        def vjp(g):
            return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
        return vjp

    return x.tape._emit("softmax", y, (x,), factory)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def factory():
        def vjp(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = np.mean(g * y, axis=-1, keepdims=True)
            return (inv * (g - gm - y * gy),)
        return vjp

    return x.tape._emit("layer_norm", y, (x,), factory)


# ---------------------------------------------------------------- dropout


def dropout_key(seed: int, sample_id: int, site: str) -> int:
    h = hashlib.blake2b(f"{seed}|{sample_id}|{site}".encode(), digest_size=16).digest()
    return int.from_bytes(h, "little")


def dropout_mask(shape: tuple[int, ...], rate: float, seed: int, sample_ids: Sequence[int], site: str) -> np.ndarray:
    """Inverted-dropout multiplier, one counter-based stream per sample row.

    Each leading-axis row gets its own Philox stream keyed by
    ``(seed, sample_id, site)`` so the mask of a sample does not depend on
    which microbatch it travels in.
    """
    if len(sample_ids) != shape[0]:
        raise ShapeError(f"dropout: {len(sample_ids)} sample ids for leading axis {shape[0]}")
    keep = 1.0 - rate
    out = np.empty(shape, dtype=DTYPE)
    for r, sid in enumerate(sample_ids):
        gen = np.random.Generator(np.random.Philox(key=dropout_key(seed, int(sid), site)))
        out[r] = (gen.random(shape[1:]) < keep) / keep
    return out


def dropout(x: Tensor, rate: float, site: str, sample_ids: Sequence[int]) -> Tensor:
    tape = x.tape
    if not tape.training or rate <= 0.0:
        return x
    m = dropout_mask(x.shape, rate, tape.seed, sample_ids, site)
    return mul(x, m)


# --------------------------------------------------------------- backward


def backward(tape: Tape, output: Tensor, upstream) -> dict[str, np.ndarray]:
    """Propagate ``upstream`` from ``output`` to every parameter leaf.

    Returns the gradients of ``sum(upstream * output)`` produced by this call
    and adds them into ``tape.params.grads`` so repeated calls accumulate.
    """
    if not tape.record:
        raise RuntimeError("backward on a forward-only tape")
    if not tape.nodes or output.tape is not tape:
        raise RuntimeError("backward before forward: output was not recorded on this tape")
    upstream = np.asarray(upstream, dtype=DTYPE)
    if upstream.shape != output.shape:
        raise ShapeError(f"backward: upstream shape {upstream.shape} != output shape {output.shape}")
    out: dict[str, np.ndarray] = {}
    if not output.requires_grad:
        return out
    adj: dict[int, np.ndarray] = {output.index: upstream}
    for i in range(output.index, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            if node.name in out:
                out[node.name] = out[node.name] + g
            else:
                out[node.name] = g
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if not p.requires_grad:
                continue
            prev = adj.get(p.index)
            adj[p.index] = gp if prev is None else prev + gp
    for name, g in out.items():
        tape.params.grads[name] += g
    return out


# -------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    deterministic: bool
    passed: bool
    worst: str = ""
    grad_scale: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)


def grad_check(
    fn: Callable[[Tape], Tensor],
    params: Params,
    tol: float = 1e-6,
    step: float = 1e-5,
    seed: int = 0,
    training: bool = False,
    max_coords: int | None = None,
    rel_floor: float = 1e-3,
    rng_seed: int = 0,
    order: int = 4,
    abs_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn`` with central differences.

    ``fn`` builds a scalar from ``tape.param(...)``. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, rel_floor * max|n|)`` so that
    coordinates far below the gradient's scale are judged on that scale;
    ``abs_floor`` does the same for gradients that are tiny overall, where
    finite differences are dominated by roundoff.
    ``order=4`` uses the five-point central stencil, ``order=2`` the
    three-point one.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    params.zero_grad()
    tape = Tape(params, record=True, seed=seed, training=training)
    out = fn(tape)
    if out.shape != ():
        raise ShapeError(f"grad_check: fn must be scalar, got {out.shape}")
    base = float(out.value)
    backward(tape, out, np.ones(()))
    analytic = params.grad_dict()

    def evaluate() -> float:
        t = Tape(params, record=False, seed=seed, training=training)
        return float(fn(t).value)

    deterministic = evaluate() == base and evaluate() == base
    rng = np.random.default_rng(rng_seed)
    numeric: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in params.names():
        arr = params.values[name]
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.empty(coords.size)
        for k, c in enumerate(coords):
            orig = flat[c]
            vals = {}
            for m in ((-2, -1, 1, 2) if order == 4 else (-1, 1)):
                flat[c] = orig + m * step
                vals[m] = evaluate()
            flat[c] = orig
            if order == 4:
                num[k] = (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * step)
            else:
                num[k] = (vals[1] - vals[-1]) / (2.0 * step)
        numeric[name] = (coords, num)
    scale = max((np.max(np.abs(n)) for _, n in numeric.values() if n.size), default=0.0)
    floor = max(rel_floor * scale, abs_floor)
    worst_rel, worst_abs, worst = 0.0, 0.0, ""
    per: dict[str, float] = {}
    n_checked = 0
    for name, (coords, num) in numeric.items():
        a = analytic[name].reshape(-1)[coords]
        err = np.abs(a - num)
        rel = err / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        n_checked += coords.size
        if rel.size:
            per[name] = float(rel.max())
            if rel.max() > worst_rel:
                worst_rel, worst = float(rel.max()), name
            worst_abs = max(worst_abs, float(err.max()))
    return GradCheckReport(
        max_rel_error=worst_rel,
        max_abs_error=worst_abs,
        n_checked=n_checked,
        deterministic=deterministic,
        passed=deterministic and worst_rel < tol,
        worst=worst,
        grad_scale=float(scale),
        per_param=per,
    )


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "tanh": tanh, "sigmoid": sigmoid,
    "silu": silu, "exp": exp, "log": log, "square": square, "abs": tabs, "sqrt": sqrt,
    "clamp_min": clamp_min,
    "matmul": matmul, "linear": linear, "sum": tsum, "mean": mean, "reshape": reshape,
    "transpose": transpose, "getitem": getitem, "concat": concat, "stack": stack,
    "shift_time": shift_time, "lstm": lstm, "softmax": softmax, "layer_norm": layer_norm, "dropout": dropout,
}


def primitives() -> dict[str, Callable]:
    return dict(PRIMITIVES)


def as_tensors(tape: Tape, xs: Iterable) -> list[Tensor]:
    return [_lift(tape, x) for x in xs]

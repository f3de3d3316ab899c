"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every primitive applied to tensors created on it. The
record is append-only, so recording order is a topological order, and
``backward`` visits each node exactly once in reverse. Gradients are
returned as a single flat vector aligned to a ``ParameterStore``'s
registration order, which stays fixed for the lifetime of the store.

All values are float64. The engine is deliberately small: dense arrays,
first-order derivatives, single-threaded per tape.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DiffError",
    "ParameterStore",
    "Tensor",
    "Tape",
    "forward_eval",
    "backward",
    "finite_diff_check",
]


class DiffError(ValueError):
    """An operation's inputs violate its contract (shape, scalarity, ...)."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class ParameterStore:
    """Named float64 arrays with a stable, registration-order flattening."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._order: list[str] = []

    def add(self, name: str, value) -> np.ndarray:
        if name in self._arrays:
            raise DiffError(f"parameter {name!r} already registered")
        arr = _as_f64(value).copy()
        self._arrays[name] = arr
        self._order.append(name)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def set_(self, name: str, value) -> None:
        arr = _as_f64(value)
        if arr.shape != self._arrays[name].shape:
            raise DiffError(
                f"parameter {name!r}: shape {arr.shape} != {self._arrays[name].shape}"
            )
        self._arrays[name] = arr.copy()

    def names(self) -> list[str]:
        return list(self._order)

    @property
    def size(self) -> int:
        return sum(self._arrays[n].size for n in self._order)

    def slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name in self._order:
            n = self._arrays[name].size
            out[name] = slice(offset, offset + n)
            offset += n
        return out

    def flatten(self) -> np.ndarray:
        if not self._order:
            return np.zeros(0)
        return np.concatenate([self._arrays[n].ravel() for n in self._order])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = _as_f64(vec)
        if vec.shape != (self.size,):
            raise DiffError(f"flat vector length {vec.size} != store size {self.size}")
        for name, sl in self.slices().items():
            self._arrays[name] = vec[sl].reshape(self._arrays[name].shape).copy()

    def copy(self) -> "ParameterStore":
        dup = ParameterStore()
        for name in self._order:
            dup.add(name, self._arrays[name])
        return dup

    def copy_from(self, other: "ParameterStore") -> None:
        if other._order != self._order:
            raise DiffError("parameter stores have different registrations")
        for name in self._order:
            self.set_(name, other._arrays[name])


class Tensor:
    """Handle to one value on a tape. Immutable once created."""

    __slots__ = ("tape", "index", "data")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray):
        self.tape = tape
        self.index = index
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DiffError(f"item: tensor has shape {self.shape}, not scalar")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # operator sugar; non-tensor operands are lifted to constants
    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.mul(self, -1.0)


class _Node:
    __slots__ = ("op", "parents", "backward", "kink")

    def __init__(self, op, parents, backward, kink=None):
        self.op = op
        self.parents = parents
        self.backward = backward  # grad_out -> tuple of parent grads
        self.kink = kink  # distance to nearest non-differentiable locus, or None


class Tape:
    """Append-only record of primitives plus an optional parameter binding."""

    def __init__(self, params: ParameterStore | None = None):
        self.params = params
        self._nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self._param_nodes: dict[str, int] = {}

    # ------------------------------------------------------------------ leaves

    def _emit(self, op, value, parents=(), backward=None, kink=None) -> Tensor:
        idx = len(self._nodes)
        self._nodes.append(_Node(op, tuple(p.index for p in parents), backward, kink))
        self._values.append(value)
        return Tensor(self, idx, value)

    def const(self, value) -> Tensor:
        return self._emit("const", _as_f64(value))

    def param(self, name: str) -> Tensor:
        if self.params is None or name not in self.params:
            raise DiffError(f"param: {name!r} not in the bound parameter store")
        if name in self._param_nodes:
            idx = self._param_nodes[name]
            return Tensor(self, idx, self._values[idx])
        t = self._emit("param", self.params[name].copy())
        self._param_nodes[name] = t.index
        return t

    def _lift(self, value) -> Tensor:
        if isinstance(value, Tensor):
            if value.tape is not self:
                raise DiffError("operands live on different tapes")
            return value
        return self.const(value)

    # -------------------------------------------------------------- primitives

    def add(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        out = self._broadcast_op("add", a, b, a.data + b.data)
        return out

    def sub(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        try:
            value = a.data - b.data
        except ValueError:
            raise DiffError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
        sa, sb = a.shape, b.shape
        return self._emit(
            "sub", value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def _broadcast_op(self, op, a, b, value) -> Tensor:
        if value is None:
            raise DiffError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
        sa, sb = a.shape, b.shape
        if op == "add":
            back = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
        else:
            raise AssertionError(op)
        return self._emit(op, value, (a, b), back)

    def mul(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        try:
            value = a.data * b.data
        except ValueError:
            raise DiffError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
        da, db = a.data, b.data
        sa, sb = a.shape, b.shape
        return self._emit(
            "mul", value, (a, b),
            lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)),
        )

    def matmul(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise DiffError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DiffError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        da, db = a.data, b.data
        return self._emit(
            "matmul", da @ db, (a, b),
            lambda g: (g @ db.T, da.T @ g),
        )

    def relu(self, a) -> Tensor:
        a = self._lift(a)
        mask = a.data > 0.0  # subgradient at 0 is 0
        kink = float(np.min(np.abs(a.data))) if a.data.size else np.inf
        return self._emit(
            "relu", np.where(mask, a.data, 0.0), (a,),
            lambda g: (g * mask,), kink=kink,
        )

    def softplus(self, a) -> Tensor:
        a = self._lift(a)
        value = np.logaddexp(0.0, a.data)
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return self._emit("softplus", value, (a,), lambda g: (g * sig,))

    def sigmoid(self, a) -> Tensor:
        a = self._lift(a)
        s = 1.0 / (1.0 + np.exp(-a.data))
        return self._emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, a) -> Tensor:
        a = self._lift(a)
        t = np.tanh(a.data)
        return self._emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))

    def abs(self, a) -> Tensor:
        a = self._lift(a)
        sign = np.sign(a.data)  # sign(0) = 0, matching the subgradient choice
        kink = float(np.min(np.abs(a.data))) if a.data.size else np.inf
        return self._emit(
            "abs", np.abs(a.data), (a,), lambda g: (g * sign,), kink=kink,
        )

    def cos(self, a) -> Tensor:
        a = self._lift(a)
        da = a.data
        return self._emit("cos", np.cos(da), (a,), lambda g: (-g * np.sin(da),))

    def huber(self, a, kappa: float = 1.0) -> Tensor:
        """Elementwise Huber residual: quadratic within kappa, linear outside."""
        if kappa <= 0:
            raise DiffError(f"huber: kappa must be > 0, got {kappa}")
        a = self._lift(a)
        da = a.data
        small = np.abs(da) <= kappa
        value = np.where(small, 0.5 * da * da, kappa * (np.abs(da) - 0.5 * kappa))
        deriv = np.where(small, da, kappa * np.sign(da))
        return self._emit("huber", value, (a,), lambda g: (g * deriv,))

    def mean(self, a, axis: int | None = None) -> Tensor:
        a = self._lift(a)
        da = a.data
        if axis is not None and not (-da.ndim <= axis < da.ndim):
            raise DiffError(f"mean: axis {axis} out of range for shape {a.shape}")
        value = np.mean(da, axis=axis)
        shape = da.shape
        if axis is None:
            count = da.size
            back = lambda g: (np.full(shape, g / count),)
        else:
            count = shape[axis]
            back = lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)
        return self._emit("mean", value, (a,), back)

    def sum(self, a, axis: int | None = None) -> Tensor:
        a = self._lift(a)
        da = a.data
        if axis is not None and not (-da.ndim <= axis < da.ndim):
            raise DiffError(f"sum: axis {axis} out of range for shape {a.shape}")
        shape = da.shape
        if axis is None:
            back = lambda g: (np.full(shape, g),)
        else:
            back = lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
        return self._emit("sum", np.sum(da, axis=axis), (a,), back)

    def max(self, a, axis: int | None = None) -> Tensor:
        """Max over an axis; ties route the gradient to the lowest index."""
        a = self._lift(a)
        da = a.data
        if axis is None:
            flat = da.ravel()
            if flat.size == 0:
                raise DiffError("max: empty input")
            j = int(np.argmax(flat))
            mask = np.zeros_like(da)
            mask.ravel()[j] = 1.0
            top = np.partition(flat, -2)[-2:] if flat.size > 1 else None
            kink = float(top[1] - top[0]) if top is not None else np.inf
            return self._emit(
                "max", flat[j].reshape(()).copy(), (a,),
                lambda g: (g * mask,), kink=kink,
            )
        if not (-da.ndim <= axis < da.ndim):
            raise DiffError(f"max: axis {axis} out of range for shape {a.shape}")
        if da.shape[axis] == 0:
            raise DiffError("max: empty axis")
        idx = np.argmax(da, axis=axis)  # first max, i.e. lowest index
        value = np.take_along_axis(da, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
        mask = np.zeros_like(da)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        if da.shape[axis] > 1:
            top2 = np.partition(da, -2, axis=axis)
            gaps = np.take(top2, -1, axis=axis) - np.take(top2, -2, axis=axis)
            kink = float(np.min(gaps))
        else:
            kink = np.inf
        return self._emit(
            "max", value, (a,),
            lambda g: (np.expand_dims(g, axis) * mask,), kink=kink,
        )

    def reshape(self, a, shape) -> Tensor:
        a = self._lift(a)
        old = a.data.shape
        try:
            value = a.data.reshape(shape)
        except ValueError:
            raise DiffError(f"reshape: cannot view {old} as {shape}")
        return self._emit("reshape", value, (a,), lambda g: (g.reshape(old),))

    def concat(self, parts, axis: int = 0) -> Tensor:
        parts = [self._lift(p) for p in parts]
        if not parts:
            raise DiffError("concat: empty input list")
        try:
            value = np.concatenate([p.data for p in parts], axis=axis)
        except ValueError:
            raise DiffError(
                f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}"
            )
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        return self._emit(
            "concat", value, tuple(parts),
            lambda g: tuple(np.split(g, splits, axis=axis)),
        )

    def narrow(self, a, axis: int, start: int, stop: int) -> Tensor:
        """Contiguous slice [start, stop) along one axis."""
        a = self._lift(a)
        da = a.data
        if not (-da.ndim <= axis < da.ndim):
            raise DiffError(f"narrow: axis {axis} out of range for shape {a.shape}")
        axis = axis % da.ndim
        if not (0 <= start <= stop <= da.shape[axis]):
            raise DiffError(
                f"narrow: [{start}:{stop}) invalid for axis {axis} of shape {a.shape}"
            )
        sel = [slice(None)] * da.ndim
        sel[axis] = slice(start, stop)
        sel = tuple(sel)
        shape = da.shape

        def back(g):
            full = np.zeros(shape)
            full[sel] = g
            return (full,)

        return self._emit("narrow", da[sel].copy(), (a,), back)

    def gather_last(self, a, indices) -> Tensor:
        """Pick one entry along the last axis per leading position."""
        a = self._lift(a)
        da = a.data
        idx = np.asarray(indices, dtype=np.int64)
        if idx.shape != da.shape[:-1]:
            raise DiffError(
                f"gather_last: index shape {idx.shape} != leading shape {da.shape[:-1]}"
            )
        if da.ndim < 1 or (da.size and (idx.min() < 0 or idx.max() >= da.shape[-1])):
            raise DiffError("gather_last: index out of range")
        expanded = np.expand_dims(idx, -1)
        value = np.take_along_axis(da, expanded, axis=-1).squeeze(-1)
        shape = da.shape

        def back(g):
            full = np.zeros(shape)
            np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
            return (full,)

        return self._emit("gather_last", value, (a,), back)

    def batched_matvec(self, wflat, x, rows: int) -> Tensor:
        """Per-sample matrix-vector product.

        `wflat` has shape (B, rows*cols) holding a (rows, cols) matrix per
        sample; `x` has shape (B, cols). Returns (B, rows).
        """
        wflat, x = self._lift(wflat), self._lift(x)
        if wflat.data.ndim != 2 or x.data.ndim != 2:
            raise DiffError("batched_matvec: expected 2-D operands")
        b, cols = x.shape
        if wflat.shape[0] != b or wflat.shape[1] != rows * cols:
            raise DiffError(
                f"batched_matvec: weight shape {wflat.shape} incompatible with "
                f"x {x.shape} and rows={rows}"
            )
        w3 = wflat.data.reshape(b, rows, cols)
        dx = x.data
        value = np.einsum("brc,bc->br", w3, dx)

        def back(g):
            gw = np.einsum("br,bc->brc", g, dx).reshape(b, rows * cols)
            gx = np.einsum("br,brc->bc", g, w3)
            return (gw, gx)

        return self._emit("batched_matvec", value, (wflat, x), back)

    # -------------------------------------------------------------- backward

    def backward(self, out: Tensor) -> np.ndarray:
        """Gradient of a scalar output w.r.t. every registered parameter."""
        if out.tape is not self:
            raise DiffError("backward: output is not on this tape")
        if out.data.size != 1:
            raise DiffError(f"backward: output must be scalar, got shape {out.shape}")
        if self.params is None:
            raise DiffError("backward: tape has no parameter store bound")
        adjoint: list[np.ndarray | None] = [None] * (out.index + 1)
        adjoint[out.index] = np.ones_like(self._values[out.index])
        for i in range(out.index, -1, -1):
            g = adjoint[i]
            node = self._nodes[i]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if adjoint[pid] is None:
                    adjoint[pid] = np.zeros_like(self._values[pid])
                adjoint[pid] += pg
        flat = np.zeros(self.params.size)
        slices = self.params.slices()
        for name, nid in self._param_nodes.items():
            if nid <= out.index and adjoint[nid] is not None:
                flat[slices[name]] = adjoint[nid].ravel()
        return flat

    def kink_margin(self) -> float:
        """Distance of recorded values to the nearest non-smooth locus.

        Covers relu/abs inputs near 0 and near-ties under max. Infinite when
        no such primitive was recorded.
        """
        margins = [n.kink for n in self._nodes if n.kink is not None]
        return float(min(margins)) if margins else np.inf


def forward_eval(graph_builder, *inputs, params: ParameterStore | None = None) -> Tensor:
    """Run `graph_builder(tape, *input_tensors)` on a fresh tape.

    Inputs are lifted to constants; the returned tensor keeps its tape
    attached so `backward` can follow.
    """
    tape = Tape(params)
    lifted = [tape.const(x) for x in inputs]
    out = graph_builder(tape, *lifted)
    if not isinstance(out, Tensor):
        raise DiffError("forward_eval: graph builder must return a Tensor")
    return out


def backward(scalar_output: Tensor) -> np.ndarray:
    return scalar_output.tape.backward(scalar_output)


def finite_diff_check(build_loss, params: ParameterStore, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `build_loss(tape)` must deterministically construct a scalar loss from
    the bound parameters. Error per parameter is
    |analytic - fd| / max(1, |fd|); the max over all parameters is returned.
    """
    if step <= 0:
        raise DiffError(f"finite_diff_check: step must be > 0, got {step}")
    tape = Tape(params)
    out = build_loss(tape)
    if out.data.size != 1:
        raise DiffError("finite_diff_check: loss must be scalar")
    analytic = tape.backward(out)

    base = params.flatten()
    names = []
    for name, sl in params.slices().items():
        names.extend((name, i) for i in range(sl.stop - sl.start))
    fd = np.zeros_like(base)
    try:
        for i in range(base.size):
            probe = base.copy()
            vals = []
            for sign in (1.0, -1.0):
                probe[i] = base[i] + sign * step
                params.load_flat(probe)
                v = build_loss(Tape(params)).item()
                if not np.isfinite(v):
                    name, j = names[i]
                    raise DiffError(
                        f"finite_diff_check: non-finite loss probing {name}[{j}]"
                    )
                vals.append(v)
            fd[i] = (vals[0] - vals[1]) / (2.0 * step)
    finally:
        params.load_flat(base)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0

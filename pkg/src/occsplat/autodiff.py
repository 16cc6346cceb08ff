"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape records a topologically ordered list of nodes built by the op
functions below.  Ops accept Tensors (tracked or constant) plus plain
arrays/floats, compute eagerly with numpy, and append a node when any
input is tracked.  backward() walks the node list in reverse and
accumulates vector-Jacobian products.

Everything is float64.  Elementwise ops require exact shape agreement;
the only implicit broadcasts are scalar (size-1) expansion and
leading-axis expansion, both routed through the explicit `broadcast_to`
op so the adjoint is a plain reduction.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError

_GELU_C0 = np.sqrt(2.0 / np.pi)
_GELU_C1 = 0.044715
_L2_GUARD = 1e-12


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    if not a.flags.c_contiguous:
        a = np.ascontiguousarray(a)
    return a


class Tensor:
    """A dense float64 value, optionally attached to a Tape node."""

    __slots__ = ("array", "tape", "node_id")

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        self.array = _as_array(value)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat float64 view of the underlying storage."""
        return self.array.reshape(-1)

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __repr__(self):
        tag = f" node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

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


class _Node:
    __slots__ = ("op", "parents", "inputs", "out", "extra")

    def __init__(self, op, parents, inputs, out, extra=None):
        self.op = op
        self.parents = parents      # tuple of node ids (None for constants)
        self.inputs = inputs        # tuple of input ndarrays
        self.out = out              # output ndarray
        self.extra = extra          # op-specific saved context


class Tape:
    """Append-only op recorder; parents of node i always have id < i."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] | None = None

    def leaf(self, value) -> Tensor:
        arr = _as_array(value).copy()
        self.nodes.append(_Node("leaf", (), (), arr))
        return Tensor(arr, self, len(self.nodes) - 1)

    def _record(self, op, parent_tensors, out, extra=None) -> Tensor:
        pids = tuple(t.node_id if (t.tape is self) else None for t in parent_tensors)
        inputs = tuple(t.array for t in parent_tensors)
        self.nodes.append(_Node(op, pids, inputs, out, extra))
        return Tensor(out, self, len(self.nodes) - 1)

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() output w.r.t. `tensor`.

        Leaves that the output does not depend on get a zero gradient.
        """
        if tensor.tape is not self:
            raise ContractError("tensor does not live on this tape")
        if self.grads is None:
            raise ContractError("backward() has not been run on this tape")
        g = self.grads[tensor.node_id]
        if g is None:
            return np.zeros_like(tensor.array)
        return g


def constant(value) -> Tensor:
    return Tensor(value)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractError("operands live on different tapes")
            tape = t.tape
    return tape


def _emit(op, tensors, out, extra=None) -> Tensor:
    tape = _find_tape(*tensors)
    if tape is None:
        return Tensor(out)
    return tape._record(op, tensors, out, extra)


# ---------------------------------------------------------------------------
# shape plumbing

def broadcast_to(x, shape) -> Tensor:
    """Expand a scalar or leading-axis-compatible tensor to `shape`.

    Allowed: size-1 tensor to any shape, or x.shape equal to a trailing
    suffix of `shape`.  Anything else is a shape error.
    """
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    if x.size == 1:
        out = np.broadcast_to(x.array.reshape(()), shape).copy()
    elif len(shape) >= len(x.shape) and shape[len(shape) - len(x.shape):] == x.shape:
        out = np.broadcast_to(x.array, shape).copy()
    else:
        raise ContractError(f"cannot broadcast {x.shape} to {shape}")
    return _emit("broadcast", (x,), out, extra=x.shape)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    out = x.array.reshape(shape).copy()
    return _emit("reshape", (x,), out, extra=x.shape)


def concat(tensors, axis=0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    out = np.concatenate([t.array for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    return _emit("concat", tuple(ts), out, extra=(axis, sizes))


def slice_(x, key) -> Tensor:
    """Basic slicing along any axes; `key` is a tuple of slice objects/ints."""
    x = _coerce(x)
    if not isinstance(key, tuple):
        key = (key,)
    out = np.ascontiguousarray(x.array[key])
    return _emit("slice", (x,), out, extra=(key, x.shape))


def gather_rows(x, idx) -> Tensor:
    """out[i] = x[idx[i]] along axis 0; idx is a constant int array."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.ascontiguousarray(x.array[idx])
    return _emit("gather", (x,), out, extra=(idx, x.shape))


def segment_sum(x, seg_ids, num_segments) -> Tensor:
    """out[s] = sum of rows of x whose seg_ids equal s (ids constant)."""
    x = _coerce(x)
    seg = np.asarray(seg_ids, dtype=np.intp)
    if seg.shape[0] != x.shape[0]:
        raise ContractError("segment ids must match leading axis")
    out = np.zeros((int(num_segments),) + x.shape[1:], dtype=np.float64)
    np.add.at(out, seg, x.array)
    return _emit("segsum", (x,), out, extra=seg)


# ---------------------------------------------------------------------------
# elementwise

def _pair(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        if b.size == 1 or (len(a.shape) > len(b.shape) and a.shape[len(a.shape) - len(b.shape):] == b.shape):
            b = broadcast_to(b, a.shape)
        elif a.size == 1 or (len(b.shape) > len(a.shape) and b.shape[len(b.shape) - len(a.shape):] == a.shape):
            a = broadcast_to(a, b.shape)
        else:
            raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", (a, b), a.array + b.array)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", (a, b), a.array - b.array)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", (a, b), a.array * b.array)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("div", (a, b), a.array / b.array)


def neg(x) -> Tensor:
    x = _coerce(x)
    return _emit("neg", (x,), -x.array)


def scale(x, c: float) -> Tensor:
    x = _coerce(x)
    return _emit("scale", (x,), x.array * float(c), extra=float(c))


def exp(x) -> Tensor:
    x = _coerce(x)
    return _emit("exp", (x,), np.exp(x.array))


def log(x) -> Tensor:
    x = _coerce(x)
    return _emit("log", (x,), np.log(x.array))


def sqrt(x) -> Tensor:
    x = _coerce(x)
    return _emit("sqrt", (x,), np.sqrt(x.array))


def tanh(x) -> Tensor:
    x = _coerce(x)
    return _emit("tanh", (x,), np.tanh(x.array))


def softplus(x) -> Tensor:
    x = _coerce(x)
    a = x.array
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return _emit("softplus", (x,), out)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _coerce(x)
    a = x.array
    u = _GELU_C0 * (a + _GELU_C1 * a ** 3)
    out = 0.5 * a * (1.0 + np.tanh(u))
    return _emit("gelu", (x,), out)


# ---------------------------------------------------------------------------
# reductions and normalizations (last axis unless an axis is given)

def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _coerce(x)
    a = x.array
    m = a.max(axis=-1, keepdims=True)
    e = np.exp(a - m)
    out = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", (x,), out)


def logsumexp(x) -> Tensor:
    """log(sum(exp(x))) over the last axis, keepdims; adjoint is softmax."""
    x = _coerce(x)
    a = x.array
    m = a.max(axis=-1, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True))
    return _emit("logsumexp", (x,), out)


def l2_normalize(x) -> Tensor:
    """Normalize rows (last axis) to unit length.

    Rows with norm below 1e-12 map to the zero vector and receive zero
    gradient, so downstream code never divides by a vanishing norm.
    """
    x = _coerce(x)
    a = x.array
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    ok = n >= _L2_GUARD
    safe = np.where(ok, n, 1.0)
    out = np.where(ok, a / safe, 0.0)
    return _emit("l2norm", (x,), out, extra=(safe, ok))


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    if axis is None:
        out = np.array([x.array.sum()])
    else:
        out = x.array.sum(axis=axis, keepdims=keepdims)
        if out.ndim == 0:
            out = out.reshape(1)
    return _emit("sum", (x,), np.ascontiguousarray(out), extra=(axis, keepdims, x.shape))


def mean_(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    if axis is None:
        denom = x.size
    else:
        denom = x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / denom)


# ---------------------------------------------------------------------------
# matrix products

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ContractError("matmul expects 2-D operands")
    return _emit("matmul", (a, b), a.array @ b.array)


def bmm(a, b, transpose_a=False, transpose_b=False) -> Tensor:
    """Batched matmul on 3-D operands with optional transposes of the
    trailing two axes."""
    a, b = _coerce(a), _coerce(b)
    if len(a.shape) != 3 or len(b.shape) != 3:
        raise ContractError("bmm expects 3-D operands")
    aa = np.swapaxes(a.array, 1, 2) if transpose_a else a.array
    bb = np.swapaxes(b.array, 1, 2) if transpose_b else b.array
    return _emit("bmm", (a, b), np.ascontiguousarray(aa @ bb),
                 extra=(transpose_a, transpose_b))


# ---------------------------------------------------------------------------
# bilinear image sampling

def bilinear2d(grid, locs) -> Tensor:
    """Sample a (H, W, D) grid at (N, 2) locations given as (x, y) in
    pixel units, with border clamping.  Differentiable in both the grid
    values and the locations (away from integer-coordinate kinks).
    """
    grid, locs = _coerce(grid), _coerce(locs)
    if len(grid.shape) != 3 or len(locs.shape) != 2 or locs.shape[1] != 2:
        raise ContractError("bilinear2d expects (H,W,D) grid and (N,2) locations")
    H, W, _ = grid.shape
    g = grid.array
    xy = locs.array
    x = np.clip(xy[:, 0], 0.0, W - 1.0)
    y = np.clip(xy[:, 1], 0.0, H - 1.0)
    inside_x = (xy[:, 0] > 0.0) & (xy[:, 0] < W - 1.0)
    inside_y = (xy[:, 1] > 0.0) & (xy[:, 1] < H - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.minimum(x0, W - 2) if W > 1 else x0 * 0
    y0 = np.minimum(y0, H - 2) if H > 1 else y0 * 0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    g00 = g[y0, x0]
    g01 = g[y0, x1]
    g10 = g[y1, x0]
    g11 = g[y1, x1]
    out = (g00 * (1 - fx) * (1 - fy) + g01 * fx * (1 - fy)
           + g10 * (1 - fx) * fy + g11 * fx * fy)
    extra = (x0, x1, y0, y1, fx, fy, inside_x, inside_y, grid.shape)
    return _emit("bilinear", (grid, locs), np.ascontiguousarray(out), extra=extra)


# ---------------------------------------------------------------------------
# backward

def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _reduce_broadcast(g, from_shape):
    if g.shape == from_shape:
        return g
    if int(np.prod(from_shape)) == 1:
        return np.array([g.sum()]).reshape(from_shape)
    extra = g.ndim - len(from_shape)
    return g.sum(axis=tuple(range(extra))).reshape(from_shape)


def _vjp(node: _Node, g: np.ndarray):
    op = node.op
    ins = node.inputs
    if op == "add":
        return (g, g)
    if op == "sub":
        return (g, -g)
    if op == "mul":
        return (g * ins[1], g * ins[0])
    if op == "div":
        return (g / ins[1], -g * ins[0] / (ins[1] * ins[1]))
    if op == "neg":
        return (-g,)
    if op == "scale":
        return (g * node.extra,)
    if op == "exp":
        return (g * node.out,)
    if op == "log":
        return (g / ins[0],)
    if op == "sqrt":
        return (g * 0.5 / node.out,)
    if op == "tanh":
        return (g * (1.0 - node.out ** 2),)
    if op == "softplus":
        return (g * _sigmoid(ins[0]),)
    if op == "gelu":
        a = ins[0]
        u = _GELU_C0 * (a + _GELU_C1 * a ** 3)
        t = np.tanh(u)
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * a ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t ** 2) * du),)
    if op == "softmax":
        y = node.out
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)
    if op == "logsumexp":
        a = ins[0]
        m = a.max(axis=-1, keepdims=True)
        e = np.exp(a - m)
        sm = e / e.sum(axis=-1, keepdims=True)
        return (g * sm,)
    if op == "l2norm":
        safe, ok = node.extra
        a = ins[0]
        dot = (g * a).sum(axis=-1, keepdims=True)
        da = g / safe - a * dot / safe ** 3
        return (np.where(ok, da, 0.0),)
    if op == "sum":
        axis, keepdims, in_shape = node.extra
        if axis is None:
            return (np.full(in_shape, g.reshape(-1)[0]),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)
    if op == "matmul":
        a, b = ins
        return (g @ b.T, a.T @ g)
    if op == "bmm":
        ta, tb = node.extra
        a, b = ins
        aa = np.swapaxes(a, 1, 2) if ta else a
        bb = np.swapaxes(b, 1, 2) if tb else b
        da = g @ np.swapaxes(bb, 1, 2)
        db = np.swapaxes(aa, 1, 2) @ g
        if ta:
            da = np.swapaxes(da, 1, 2)
        if tb:
            db = np.swapaxes(db, 1, 2)
        return (np.ascontiguousarray(da), np.ascontiguousarray(db))
    if op == "broadcast":
        return (_reduce_broadcast(g, node.extra),)
    if op == "reshape":
        return (g.reshape(node.extra),)
    if op == "concat":
        axis, sizes = node.extra
        outs = []
        start = 0
        for s in sizes:
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + s)
            outs.append(np.ascontiguousarray(g[tuple(key)]))
            start += s
        return tuple(outs)
    if op == "slice":
        key, in_shape = node.extra
        da = np.zeros(in_shape)
        da[key] = g
        return (da,)
    if op == "gather":
        idx, in_shape = node.extra
        da = np.zeros(in_shape)
        np.add.at(da, idx, g)
        return (da,)
    if op == "segsum":
        seg = node.extra
        return (np.ascontiguousarray(g[seg]),)
    if op == "bilinear":
        x0, x1, y0, y1, fx, fy, inside_x, inside_y, gshape = node.extra
        grid, _ = ins
        dgrid = np.zeros(gshape)
        np.add.at(dgrid, (y0, x0), g * (1 - fx) * (1 - fy))
        np.add.at(dgrid, (y0, x1), g * fx * (1 - fy))
        np.add.at(dgrid, (y1, x0), g * (1 - fx) * fy)
        np.add.at(dgrid, (y1, x1), g * fx * fy)
        g00, g01 = grid[y0, x0], grid[y0, x1]
        g10, g11 = grid[y1, x0], grid[y1, x1]
        ddx = ((g01 - g00) * (1 - fy) + (g11 - g10) * fy)
        ddy = ((g10 - g00) * (1 - fx) + (g11 - g01) * fx)
        dx = (g * ddx).sum(axis=-1) * inside_x
        dy = (g * ddy).sum(axis=-1) * inside_y
        return (dgrid, np.stack([dx, dy], axis=-1))
    raise ContractError(f"no adjoint for op {op!r}")


def backward(tape: Tape, out: Tensor) -> None:
    """Accumulate gradients of a scalar output into tape.grads.

    Calling backward twice on the same tape resets the accumulators
    first, so repeated calls yield identical gradients.
    """
    if out.tape is not tape:
        raise ContractError("output does not live on this tape")
    if out.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
    tape.grads = [None] * len(tape.nodes)
    tape.grads[out.node_id] = np.ones_like(out.array)
    for nid in range(out.node_id, -1, -1):
        g = tape.grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op == "leaf":
            continue
        contribs = _vjp(node, g)
        for pid, contrib in zip(node.parents, contribs):
            if pid is None or contrib is None:
                continue
            if tape.grads[pid] is None:
                tape.grads[pid] = contrib.copy() if contrib is not np.ndarray else contrib
            else:
                tape.grads[pid] = tape.grads[pid] + contrib


# ---------------------------------------------------------------------------
# finite-difference checking

def gradcheck(fn, point, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of fn and central
    finite differences at `point`.

    fn maps a single Tensor to a scalar Tensor.  NaN in either estimate
    raises NumericError instead of passing silently.
    """
    point = _as_array(point)
    tape = Tape()
    x = tape.leaf(point)
    y = fn(x)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ContractError("gradcheck target must return a scalar tensor")
    backward(tape, y)
    analytic = tape.grad(x).reshape(-1)

    flat = point.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        for sign, slot in ((+1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[i] += sign * h
            val = fn(Tensor(bumped.reshape(point.shape))).item()
            if slot == 0:
                f_plus = val
            else:
                f_minus = val
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    if np.isnan(analytic).any() or np.isnan(numeric).any():
        raise NumericError("NaN encountered in gradient check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck_many(fn, points: dict, h: float = 1e-5) -> dict:
    """gradcheck for a function of several named tensors.

    fn maps a dict name -> Tensor to a scalar Tensor; returns the max
    relative error per name.
    """
    names = list(points.keys())
    shapes = {k: _as_array(points[k]).shape for k in names}
    sizes = {k: int(np.prod(shapes[k])) for k in names}

    def packed(flat_t: Tensor) -> Tensor:
        parts = {}
        off = 0
        for k in names:
            n = sizes[k]
            parts[k] = reshape(slice_(flat_t, (slice(off, off + n),)), shapes[k])
            off += n
        return fn(parts)

    flat = np.concatenate([_as_array(points[k]).reshape(-1) for k in names])
    tape = Tape()
    x = tape.leaf(flat)
    y = packed(x)
    backward(tape, y)
    analytic = tape.grad(x)

    numeric = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        dn = flat.copy()
        dn[i] -= h
        numeric[i] = (packed(Tensor(up)).item() - packed(Tensor(dn)).item()) / (2.0 * h)

    if np.isnan(analytic).any() or np.isnan(numeric).any():
        raise NumericError("NaN encountered in gradient check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    out = {}
    off = 0
    for k in names:
        n = sizes[k]
        out[k] = float(rel[off:off + n].max()) if n else 0.0
        off += n
    return out

"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The model code only needs a small closed set of operations (convolution,
elementwise arithmetic, a few reductions, softmax, pooling and bilinear
upsampling, 2-D matmul), so each operation carries two hand-written rules:
a VJP (for backward / vector-Jacobian products) and a JVP (forward tangent
propagation over a recorded tape, used for matrix-free Jacobian products).

There is no general broadcasting: binary operations require identical shapes,
and the only mixed form is tensor-with-python-scalar. Shapes are validated
eagerly with errors naming the offending dimension.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "tsum",
    "tmean",
    "sumsq",
    "matmul",
    "transpose2d",
    "reshape",
    "concat",
    "conv2d",
    "avg_pool2",
    "upsample2",
    "backward",
    "linearize",
    "Linearization",
]


class Tensor:
    """A dense float64 array with optional gradient accumulation.

    Tensors are treated as immutable after construction; the only sanctioned
    mutation is accumulation into ``grad`` during backward passes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all defined in terms of the module-level ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


class _Node:
    """One recorded operation: output, inputs, and its VJP/JVP rules."""

    __slots__ = ("out", "inputs", "vjp", "jvp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable, jvp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.jvp = jvp


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations, usable as a context manager.

    Recording order is a topological order of the computation, so one reverse
    sweep visits every node exactly once after all of its consumers.  A tape
    belongs to one logical thread; parallelism is only sound across
    independent tapes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape scopes must nest"
        return False

    def vjp(self, outputs: Sequence[Tensor], cotangents: Sequence[np.ndarray],
            wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Pull cotangents on ``outputs`` back to ``wrt``; pure, grad is untouched."""
        grads: dict[int, np.ndarray] = {}
        for out, cot in zip(outputs, cotangents):
            cot = np.asarray(cot, dtype=np.float64)
            if cot.shape != out.data.shape:
                raise ValueError(
                    f"cotangent shape {cot.shape} != output shape {out.data.shape}")
            key = id(out)
            grads[key] = grads[key] + cot if key in grads else cot.copy()
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.vjp(g)):
                if ig is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]

    def jvp(self, wrt: Sequence[Tensor], tangents: Sequence[np.ndarray],
            outputs: Sequence[Tensor]) -> list[np.ndarray]:
        """Push tangents on ``wrt`` forward through the tape to ``outputs``."""
        tans: dict[int, np.ndarray] = {}
        for w, t in zip(wrt, tangents):
            t = np.asarray(t, dtype=np.float64)
            if t.shape != w.data.shape:
                raise ValueError(f"tangent shape {t.shape} != leaf shape {w.data.shape}")
            tans[id(w)] = t
        for node in self.nodes:
            in_tans = [tans.get(id(i)) for i in node.inputs]
            if all(t is None for t in in_tans):
                continue
            tans[id(node.out)] = node.jvp(in_tans)
        return [tans.get(id(o), np.zeros_like(o.data)) for o in outputs]

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf."""
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if not self.nodes:
            raise ValueError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen_leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.vjp(g)):
                if ig is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp.requires_grad:
                    seen_leaves[key] = inp
        for key, leaf in seen_leaves.items():
            if leaf.grad is None:
                leaf.grad = Tensor(np.zeros_like(leaf.data))
            leaf.grad.data += grads[key]


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable, jvp: Callable) -> Tensor:
    if _TAPE_STACK:
        _TAPE_STACK[-1].nodes.append(_Node(out, inputs, vjp, jvp))
    return out


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _z(t, like):
    return np.zeros_like(like) if t is None else t


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b),
                   vjp=lambda g: (g, g),
                   jvp=lambda t: _z(t[0], a.data) + _z(t[1], b.data))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b),
                   vjp=lambda g: (g, -g),
                   jvp=lambda t: _z(t[0], a.data) - _z(t[1], b.data))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape tensors."""
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b),
                   vjp=lambda g: (g * b.data, g * a.data),
                   jvp=lambda t: _z(t[0], a.data) * b.data + a.data * _z(t[1], b.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,),
                   vjp=lambda g: (g * s,),
                   jvp=lambda t: t[0] * s)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data + s)
    return _record(out, (a,), vjp=lambda g: (g,), jvp=lambda t: t[0])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,),
                   vjp=lambda g: (g * mask,),
                   jvp=lambda t: t[0] * mask)


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(s)
    d = s * (1.0 - s)
    return _record(out, (a,),
                   vjp=lambda g: (g * d,),
                   jvp=lambda t: t[0] * d)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _record(out, (a,),
                   vjp=lambda g: (g * s,),
                   jvp=lambda t: t[0] * s)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis`` with max subtraction for stability."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for shape {a.data.shape}")
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    def jvp(t):
        d = t[0]
        return s * (d - np.sum(d * s, axis=axis, keepdims=True))

    return _record(out, (a,), vjp=vjp, jvp=jvp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data))
    return _record(out, (a,),
                   vjp=lambda g: (np.full_like(a.data, float(g)),),
                   jvp=lambda t: np.sum(t[0]))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.mean(a.data))
    return _record(out, (a,),
                   vjp=lambda g: (np.full_like(a.data, float(g) / n),),
                   jvp=lambda t: np.mean(t[0]))


def sumsq(a: Tensor) -> Tensor:
    """Squared L2 norm, sum(x**2)."""
    out = Tensor(np.sum(a.data * a.data))
    return _record(out, (a,),
                   vjp=lambda g: (2.0 * float(g) * a.data,),
                   jvp=lambda t: 2.0 * np.sum(a.data * t[0]))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ValueError(f"reshape: cannot view {a.data.shape} as {shape}")
    src_shape = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,),
                   vjp=lambda g: (g.reshape(src_shape),),
                   jvp=lambda t: t[0].reshape(shape))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.data.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,),
                   vjp=lambda g: (g.T,),
                   jvp=lambda t: t[0].T)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"concat: axis {axis} out of range for rank {nd}")
    axis = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ValueError("concat: rank mismatch")
        for d in range(nd):
            if d != axis and t.data.shape[d] != tensors[0].data.shape[d]:
                raise ValueError(
                    f"concat: dimension {d} mismatch {t.data.shape} vs {tensors[0].data.shape}")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    def jvp(t):
        parts = [_z(ti, x.data) for ti, x in zip(t, tensors)]
        return np.concatenate(parts, axis=axis)

    return _record(out, tuple(tensors), vjp=vjp, jvp=jvp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.data.shape[1]} vs {b.data.shape[0]}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b),
                   vjp=lambda g: (g @ b.data.T, a.data.T @ g),
                   jvp=lambda t: _z(t[0], a.data) @ b.data + a.data @ _z(t[1], b.data))


# ---------------------------------------------------------------------------
# convolution, pooling, upsampling


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    cin = xp.shape[0]
    cols = np.empty((cin, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(cin * k * k, oh * ow)


def _col2im(cols: np.ndarray, cin: int, hp: int, wp: int, k: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    xp = np.zeros((cin, hp, wp), dtype=np.float64)
    cols = cols.reshape(cin, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, i, j]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a C_in x H x W input with a C_out x C_in x k x k kernel."""
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: input must be CxHxW, got shape {x.data.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be C_out x C_in x k x k, got {w.data.shape}")
    cout, cin_k, kh, kw = w.data.shape
    cin, h, wd = x.data.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ValueError(f"conv2d: kernel size {kh} must be odd")
    if cin_k != cin:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {cin_k}")
    if b is not None and b.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    k, s, p = kh, int(stride), int(padding)
    if s < 1:
        raise ValueError(f"conv2d: stride must be positive, got {s}")
    if p < 0:
        raise ValueError(f"conv2d: padding must be nonnegative, got {p}")
    oh = (h + 2 * p - k) // s + 1
    ow = (wd + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: output would be {oh}x{ow} for input {h}x{wd}, kernel {k}, "
            f"stride {s}, padding {p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    cols = _im2col(xp, k, s, oh, ow)
    wmat = w.data.reshape(cout, cin * k * k)
    out_data = (wmat @ cols).reshape(cout, oh, ow)
    if b is not None:
        out_data = out_data + b.data[:, None, None]
    out = Tensor(out_data)

    def vjp(g):
        gm = g.reshape(cout, oh * ow)
        dw = (gm @ cols.T).reshape(w.data.shape)
        dxp = _col2im(wmat.T @ gm, cin, hp, wp, k, s, oh, ow)
        dx = dxp[:, p:hp - p, p:wp - p] if p else dxp
        if b is not None:
            return dx, dw, g.sum(axis=(1, 2))
        return dx, dw

    def jvp(t):
        dx, dw = t[0], t[1]
        acc = np.zeros((cout, oh * ow), dtype=np.float64)
        if dx is not None:
            dxp = np.pad(dx, ((0, 0), (p, p), (p, p))) if p else dx
            acc += wmat @ _im2col(dxp, k, s, oh, ow)
        if dw is not None:
            acc += dw.reshape(cout, cin * k * k) @ cols
        res = acc.reshape(cout, oh, ow)
        if b is not None and t[2] is not None:
            res = res + t[2][:, None, None]
        return res

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, vjp=vjp, jvp=jvp)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    if x.data.ndim != 3:
        raise ValueError(f"avg_pool2: input must be CxHxW, got shape {x.data.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial size {h}x{w} not divisible by 2")
    d = x.data
    out = Tensor(0.25 * (d[:, 0::2, 0::2] + d[:, 1::2, 0::2]
                         + d[:, 0::2, 1::2] + d[:, 1::2, 1::2]))

    def vjp(g):
        return (0.25 * np.repeat(np.repeat(g, 2, axis=1), 2, axis=2),)

    def jvp(t):
        d = t[0]
        return 0.25 * (d[:, 0::2, 0::2] + d[:, 1::2, 0::2]
                       + d[:, 0::2, 1::2] + d[:, 1::2, 1::2])

    return _record(out, (x,), vjp=vjp, jvp=jvp)


def _interp_coeffs(n_out: int, n_in: int):
    # 2x bilinear, align_corners=False, edge clamped
    pos = np.arange(n_out) / 2.0 - 0.25
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    return i0, i1, 1.0 - frac, frac


def _interp_axis(x: np.ndarray, axis: int, i0, i1, w0, w1) -> np.ndarray:
    xm = np.moveaxis(x, axis, 0)
    sh = (-1,) + (1,) * (xm.ndim - 1)
    ym = w0.reshape(sh) * xm[i0] + w1.reshape(sh) * xm[i1]
    return np.moveaxis(ym, 0, axis)


def _interp_axis_adj(g: np.ndarray, axis: int, n_in: int, i0, i1, w0, w1) -> np.ndarray:
    gm = np.moveaxis(g, axis, 0)
    sh = (-1,) + (1,) * (gm.ndim - 1)
    res = np.zeros((n_in,) + gm.shape[1:], dtype=np.float64)
    np.add.at(res, i0, w0.reshape(sh) * gm)
    np.add.at(res, i1, w1.reshape(sh) * gm)
    return np.moveaxis(res, 0, axis)


def upsample2(x: Tensor) -> Tensor:
    """2x bilinear upsampling of a CxHxW tensor (align_corners=False)."""
    if x.data.ndim != 3:
        raise ValueError(f"upsample2: input must be CxHxW, got shape {x.data.shape}")
    c, h, w = x.data.shape
    rid0, rid1, rw0, rw1 = _interp_coeffs(2 * h, h)
    cid0, cid1, cw0, cw1 = _interp_coeffs(2 * w, w)

    def fwd(d):
        y = _interp_axis(d, 1, rid0, rid1, rw0, rw1)
        return _interp_axis(y, 2, cid0, cid1, cw0, cw1)

    out = Tensor(fwd(x.data))

    def vjp(g):
        y = _interp_axis_adj(g, 2, w, cid0, cid1, cw0, cw1)
        return (_interp_axis_adj(y, 1, h, rid0, rid1, rw0, rw1),)

    return _record(out, (x,), vjp=vjp, jvp=lambda t: fwd(t[0]))


# ---------------------------------------------------------------------------
# linearization for matrix-free Jacobian products


class Linearization:
    """Jacobian products of a residual map at a fixed linearization point.

    Records ``residual_fn(params)`` once on a private tape; ``jvp`` and
    ``vjp`` then replay it to form J v and J^T u without materializing J.
    """

    def __init__(self, residual_fn: Callable, params: Sequence[Tensor]):
        self.params = list(params)
        with Tape() as tape:
            out = residual_fn(self.params)
        self.tape = tape
        self.outputs: list[Tensor] = list(out) if isinstance(out, (list, tuple)) else [out]

    def value(self) -> list[np.ndarray]:
        return [o.data for o in self.outputs]

    def jvp(self, tangents: Sequence[np.ndarray]) -> list[np.ndarray]:
        """J v: push parameter tangents through to the residual blocks."""
        if len(tangents) != len(self.params):
            raise ValueError(f"expected {len(self.params)} tangents, got {len(tangents)}")
        return self.tape.jvp(self.params, tangents, self.outputs)

    def vjp(self, cotangents: Sequence[np.ndarray]) -> list[np.ndarray]:
        """J^T u: pull residual cotangents back to the parameters."""
        if len(cotangents) != len(self.outputs):
            raise ValueError(
                f"expected {len(self.outputs)} cotangents, got {len(cotangents)}")
        return self.tape.vjp(self.outputs, cotangents, self.params)


def linearize(residual_fn: Callable, params: Sequence[Tensor]) -> Linearization:
    return Linearization(residual_fn, params)

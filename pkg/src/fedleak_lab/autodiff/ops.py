"""Differentiable operators.

Every backward rule is built from other operators in this module, so the
whole set is closed under differentiation. relu and abs use subgradient 0 at
the kink.
"""

from __future__ import annotations

import numpy as np

from .tensor import DomainError, Function, ShapeError, Tensor, as_tensor


# ---------------------------------------------------------------------------
# broadcasting helpers


def _sum_to_shape(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape == shape:
        return a
    ndiff = a.ndim - len(shape)
    if ndiff < 0:
        raise ShapeError(f"cannot reduce {a.shape} to {shape}")
    axes = list(range(ndiff))
    for i, n in enumerate(shape):
        if n == 1 and a.shape[ndiff + i] != 1:
            axes.append(ndiff + i)
    out = a.sum(axis=tuple(axes), keepdims=True) if axes else a
    return out.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"shapes {shapes} do not broadcast") from exc


class SumTo(Function):
    kind = "sum_to"

    def forward(self, a):
        return _sum_to_shape(a, self.attrs["shape"])

    def backward(self, g):
        return (broadcast_to(g, self.inputs[0].shape),)


class BroadcastTo(Function):
    kind = "broadcast_to"

    def forward(self, a):
        return np.broadcast_to(a, self.attrs["shape"])

    def backward(self, g):
        return (sum_to(g, self.inputs[0].shape),)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    _broadcast_shape(x.shape, shape)
    return BroadcastTo.apply(x, shape=shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    kind = "add"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    kind = "sub"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)


class Mul(Function):
    kind = "mul"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    kind = "div"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        if np.any(b == 0):
            raise DomainError("division by zero")
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, self.output), b)), b.shape)
        return ga, gb


class Neg(Function):
    kind = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (neg(g),)


class Exp(Function):
    kind = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (mul(g, self.output),)


class Log(Function):
    kind = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log of non-positive value")
        return np.log(a)

    def backward(self, g):
        return (div(g, self.inputs[0]),)


class Sqrt(Function):
    kind = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise DomainError("sqrt of negative value")
        return np.sqrt(a)

    def backward(self, g):
        return (div(mul(g, 0.5), self.output),)


class Abs(Function):
    kind = "abs"

    def forward(self, a):
        return np.abs(a)

    def backward(self, g):
        return (mul(g, Tensor._wrap(np.sign(self.inputs[0].data))),)


class Relu(Function):
    kind = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g):
        mask = (self.inputs[0].data > 0).astype(np.float64)
        return (mul(g, Tensor._wrap(mask)),)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else as_tensor(x)


def add(a, b) -> Tensor:
    return Add.apply(_lift(a), _lift(b))


def sub(a, b) -> Tensor:
    return Sub.apply(_lift(a), _lift(b))


def mul(a, b) -> Tensor:
    return Mul.apply(_lift(a), _lift(b))


def div(a, b) -> Tensor:
    return Div.apply(_lift(a), _lift(b))


def neg(a) -> Tensor:
    return Neg.apply(_lift(a))


def exp(a) -> Tensor:
    return Exp.apply(_lift(a))


def log(a) -> Tensor:
    return Log.apply(_lift(a))


def sqrt(a) -> Tensor:
    return Sqrt.apply(_lift(a))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Abs.apply(_lift(a))


def relu(a) -> Tensor:
    return Relu.apply(_lift(a))


# ---------------------------------------------------------------------------
# shape manipulation


class Reshape(Function):
    kind = "reshape"

    def forward(self, a):
        try:
            return a.reshape(self.attrs["shape"])
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc

    def backward(self, g):
        return (reshape(g, self.inputs[0].shape),)


class Transpose(Function):
    kind = "transpose"

    def forward(self, a):
        return np.transpose(a, self.attrs["axes"])

    def backward(self, g):
        axes = self.attrs["axes"]
        if axes is None:
            inv = None
        else:
            inv = tuple(np.argsort(axes))
        return (transpose(g, inv),)


class Index(Function):
    """Basic or advanced indexing; the adjoint scatters back with add."""

    kind = "slice"

    def forward(self, a):
        return a[self.attrs["key"]]

    def backward(self, g):
        return (index_add(g, self.attrs["key"], self.inputs[0].shape, unique=self.attrs["unique"]),)


class IndexAdd(Function):
    kind = "index_add"

    def forward(self, a):
        out = np.zeros(self.attrs["shape"])
        key = self.attrs["key"]
        if self.attrs["unique"] or _is_basic_key(key):
            out[key] = a
        else:
            np.add.at(out, key, a)
        return out

    def backward(self, g):
        return (index(g, self.attrs["key"], unique=self.attrs["unique"]),)


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer, type(None), type(Ellipsis))) for k in items)


class Pad(Function):
    kind = "pad"

    def forward(self, a):
        return np.pad(a, self.attrs["widths"])

    def backward(self, g):
        key = tuple(slice(lo, lo + n) for (lo, _), n in zip(self.attrs["widths"], self.inputs[0].shape))
        return (index(g, key),)


class Concat(Function):
    kind = "concat"

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.attrs["axis"])

    def backward(self, g):
        axis = self.attrs["axis"]
        out = []
        start = 0
        for t in self.inputs:
            n = t.shape[axis]
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + n)
            out.append(index(g, tuple(key)) if t.requires_grad else None)
            start += n
        return out


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    return Reshape.apply(a, shape=shape)


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is not None:
        axes = tuple(int(i) for i in axes)
    return Transpose.apply(a, axes=axes)


def index(a, key, unique: bool = False) -> Tensor:
    """``a[key]``; pass ``unique=True`` when an integer-array key has no repeats."""
    return Index.apply(_lift(a), key=key, unique=unique)


def index_add(a, key, shape, unique: bool = False) -> Tensor:
    return IndexAdd.apply(_lift(a), key=key, shape=tuple(shape), unique=unique)


def slice_(a, key) -> Tensor:
    return index(a, key)


def pad(a, widths) -> Tensor:
    a = _lift(a)
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    if len(widths) != a.ndim:
        raise ShapeError(f"pad widths {widths} do not match rank {a.ndim}")
    return Pad.apply(a, widths=widths)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        return Concat.apply(*tensors, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def flatten_all(tensors) -> Tensor:
    """Concatenate the row-major flattening of each tensor."""
    return concat([reshape(t, (-1,)) if t.ndim != 1 else t for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    kind = "sum"

    def forward(self, a):
        return np.sum(a, axis=self.attrs["axis"], keepdims=self.attrs["keepdims"])

    def backward(self, g):
        shape = self.inputs[0].shape
        axis = self.attrs["axis"]
        if not self.attrs["keepdims"]:
            kshape = list(shape)
            for ax in (range(len(shape)) if axis is None else axis):
                kshape[ax] = 1
            g = reshape(g, kshape)
        return (broadcast_to(g, shape),)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    return Sum.apply(a, axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    ax = _norm_axis(axis, a.ndim)
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    if count == 0:
        raise DomainError("mean over an empty axis")
    return mul(sum(a, axis=ax, keepdims=keepdims), 1.0 / count)


class L2Norm(Function):
    kind = "l2norm"

    def forward(self, a):
        return np.sqrt(np.sum(a * a))

    def backward(self, g):
        return (div(mul(g, self.inputs[0]), self.output),)


def l2norm(a) -> Tensor:
    return L2Norm.apply(_lift(a))


# ---------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    kind = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if b.ndim == 1 and a.ndim == 2:
        return reshape(MatMul.apply(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def _softmax_np(a, axis):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Function):
    kind = "softmax"

    def forward(self, a):
        return _softmax_np(a, self.attrs["axis"])

    def backward(self, g):
        s = self.output
        inner = sum(mul(g, s), axis=self.attrs["axis"], keepdims=True)
        return (mul(s, sub(g, inner)),)


class LogSumExp(Function):
    kind = "logsumexp"

    def forward(self, a):
        axis = self.attrs["axis"]
        m = a.max(axis=axis, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)

    def backward(self, g):
        a = self.inputs[0]
        axis = self.attrs["axis"]
        gk = reshape(g, tuple(1 if i == axis else n for i, n in enumerate(a.shape)))
        return (mul(broadcast_to(gk, a.shape), softmax(a, axis=axis)),)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    return Softmax.apply(a, axis=axis % a.ndim)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    return LogSumExp.apply(a, axis=axis % a.ndim)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeError("labels must be one-dimensional")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise DomainError(f"label out of range [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy over the batch.

    ``targets`` is either an integer label vector or a (B, N) tensor of
    class probabilities (used when labels are refined jointly).
    """
    logits = _lift(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, N), got {logits.shape}")
    if isinstance(targets, Tensor):
        t = targets
    else:
        arr = np.asarray(targets)
        if arr.ndim == 1:
            t = Tensor._wrap(one_hot(arr, logits.shape[1]))
        else:
            t = as_tensor(arr)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    per_sample = sub(mul(logsumexp(logits, axis=1), sum(t, axis=1)), sum(mul(t, logits), axis=1))
    return mean(per_sample)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col_np(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im_np(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


class Im2Col(Function):
    kind = "im2col"

    def forward(self, x):
        cols, _, _ = _im2col_np(x, self.attrs["kh"], self.attrs["kw"], self.attrs["stride"], self.attrs["pad"])
        return cols

    def backward(self, g):
        a = self.attrs
        return (Col2Im.apply(g, x_shape=self.inputs[0].shape, kh=a["kh"], kw=a["kw"],
                             stride=a["stride"], pad=a["pad"]),)


class Col2Im(Function):
    kind = "col2im"

    def forward(self, cols):
        a = self.attrs
        return _col2im_np(cols, a["x_shape"], a["kh"], a["kw"], a["stride"], a["pad"])

    def backward(self, g):
        a = self.attrs
        return (Im2Col.apply(g, kh=a["kh"], kw=a["kw"], stride=a["stride"], pad=a["pad"]),)


class Conv2d(Function):
    """Cross-correlation of a (B, C, H, W) input with an (O, C, kh, kw) kernel.

    The input gradient is the transposed correlation (col2im of W^T g),
    the kernel gradient correlates the output gradient with the input.
    """

    kind = "conv2d"

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d shapes {x.shape} and {w.shape} do not conform")
        o, c, kh, kw = w.shape
        s, p = self.attrs["stride"], self.attrs["pad"]
        if x.shape[2] + 2 * p < kh or x.shape[3] + 2 * p < kw:
            raise ShapeError("kernel larger than padded input")
        cols, ho, wo = _im2col_np(x, kh, kw, s, p)
        out = np.matmul(w.reshape(o, -1), cols)
        return out.reshape(x.shape[0], o, ho, wo)

    def backward(self, g):
        x, w = self.inputs
        o, c, kh, kw = w.shape
        b = x.shape[0]
        s, p = self.attrs["stride"], self.attrs["pad"]
        ho, wo = g.shape[2], g.shape[3]
        g2 = reshape(transpose(g, (1, 0, 2, 3)), (o, b * ho * wo))
        gx = gw = None
        if x.requires_grad:
            w2 = reshape(w, (o, c * kh * kw))
            cols_g = matmul(transpose(w2), g2)  # (CKK, B*L)
            cols_g = transpose(reshape(cols_g, (c * kh * kw, b, ho * wo)), (1, 0, 2))
            gx = Col2Im.apply(cols_g, x_shape=x.shape, kh=kh, kw=kw, stride=s, pad=p)
        if w.requires_grad:
            cols = Im2Col.apply(x, kh=kh, kw=kw, stride=s, pad=p)  # (B, CKK, L)
            cols2 = reshape(transpose(cols, (1, 0, 2)), (c * kh * kw, b * ho * wo))
            gw = reshape(matmul(g2, transpose(cols2)), w.shape)
        return gx, gw


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(_lift(x), _lift(w), stride=int(stride), pad=int(pad))


class AvgPool2d(Function):
    """Non-overlapping k x k average pooling."""

    kind = "avgpool2d"

    def forward(self, x):
        k = self.attrs["k"]
        b, c, h, w = x.shape
        if h % k or w % k:
            raise ShapeError(f"avgpool2d({k}) needs spatial dims divisible by {k}, got {h}x{w}")
        return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, g):
        k = self.attrs["k"]
        b, c, h, w = self.inputs[0].shape
        g6 = reshape(g, (b, c, h // k, 1, w // k, 1))
        up = broadcast_to(g6, (b, c, h // k, k, w // k, k))
        return (mul(reshape(up, (b, c, h, w)), 1.0 / (k * k)),)


def avgpool2d(x, k: int) -> Tensor:
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d needs a 4-d input, got {x.shape}")
    return AvgPool2d.apply(x, k=int(k))


# ---------------------------------------------------------------------------
# generic entry point

_REGISTRY = {
    "matmul": lambda xs, **kw: matmul(*xs),
    "conv2d": lambda xs, stride=1, pad=0: conv2d(xs[0], xs[1], stride=stride, pad=pad),
    "add": lambda xs: add(*xs),
    "sub": lambda xs: sub(*xs),
    "mul": lambda xs: mul(*xs),
    "div": lambda xs: div(*xs),
    "neg": lambda xs: neg(*xs),
    "exp": lambda xs: exp(*xs),
    "log": lambda xs: log(*xs),
    "sqrt": lambda xs: sqrt(*xs),
    "abs": lambda xs: abs(*xs),
    "relu": lambda xs: relu(*xs),
    "avgpool2d": lambda xs, k=2: avgpool2d(xs[0], k),
    "reshape": lambda xs, shape: reshape(xs[0], shape),
    "pad": lambda xs, widths: pad(xs[0], widths),
    "sum": lambda xs, axis=None, keepdims=False: sum(xs[0], axis=axis, keepdims=keepdims),
    "mean": lambda xs, axis=None, keepdims=False: mean(xs[0], axis=axis, keepdims=keepdims),
    "l2norm": lambda xs: l2norm(xs[0]),
    "concat": lambda xs, axis=0: concat(xs, axis=axis),
    "slice": lambda xs, key: index(xs[0], key),
    "softmax-crossentropy": lambda xs, labels=None: softmax_cross_entropy(
        xs[0], labels if labels is not None else xs[1]),
}

OP_KINDS = tuple(_REGISTRY)


def apply(op_kind: str, inputs, **attributes) -> Tensor:
    """Apply a named operator to a list of tensors."""
    try:
        fn = _REGISTRY[op_kind]
    except KeyError:
        raise ValueError(f"unknown op-kind {op_kind!r}; expected one of {OP_KINDS}") from None
    return fn([_lift(x) for x in inputs], **attributes)


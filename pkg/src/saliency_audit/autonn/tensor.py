"""A small reverse-mode autodiff engine over numpy arrays.

Every op builds an output ``Tensor`` that remembers its parents and a closure
accumulating gradients into them. ``Tensor.backward`` walks the recorded graph
in reverse topological order. Ops whose inputs do not require gradients
record nothing, so inference runs at plain numpy cost.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def tape(self) -> list[Tensor]:
        """Nodes reachable from ``self`` in topological order (inputs first)."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = self.tape()
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if dtype is None and arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _node(data, parents, op, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.data.dtype), b
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype) if not isinstance(b, Tensor) else b
    return a, b


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / b.data**2, b.shape))

    return _node(a.data / b.data, (a, b), "div", backward)


def power(a, k: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(g * k * a.data ** (k - 1))

    return _node(a.data**k, (a,), "pow", backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _node(out_data, (a,), "exp", backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(g / a.data)

    return _node(np.log(a.data), (a,), "log", backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out_data)

    return _node(out_data, (a,), "sqrt", backward)


def relu(a, guided: bool = False) -> Tensor:
    """ReLU. With ``guided`` the backward pass also drops negative upstream gradients."""
    a = as_tensor(a)
    gate = a.data > 0

    def backward(g):
        if guided:
            a._accum(g * (gate & (g > 0)))
        else:
            a._accum(g * gate)

    return _node(np.where(gate, a.data, 0).astype(a.data.dtype), (a,), "relu", backward)


# reductions and shape ops

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g / count, a.shape))

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), "transpose", backward)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _node(a.data[idx], (a,), "getitem", backward)


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))

    def backward(g):
        a._accum(g[crop])

    return _node(np.pad(a.data, widths), (a,), "pad", backward)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def frames(a, width: int, hop: int) -> Tensor:
    """Overlapping windows along the last axis: ``[..., L] -> [..., n, width]``."""
    a = as_tensor(a)
    n = 1 + (a.shape[-1] - width) // hop
    view = np.lib.stride_tricks.sliding_window_view(a.data, width, axis=-1)[..., ::hop, :][..., :n, :]

    def backward(g):
        full = np.zeros_like(a.data)
        for t in range(n):
            full[..., t * hop : t * hop + width] += g[..., t, :]
        a._accum(full)

    return _node(np.ascontiguousarray(view), (a,), "frames", backward)


# convolutional ops, NCHW layout

def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (xp.shape[2] - kh) // sh + 1
    wo = (xp.shape[3] - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {x.shape} too small for kernel {w.shape}")
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        if w.requires_grad:
            w._accum(np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
            x._accum(gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]])

    return _node(out, parents, "conv2d", backward)


def maxpool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    B, C, H, W = x.shape
    h2, w2 = H // k, W // k
    if h2 < 1 or w2 < 1:
        raise ValueError(f"input {x.shape} too small for {k}x{k} pooling")
    blocks = (
        x.data[:, :, : h2 * k, : w2 * k]
        .reshape(B, C, h2, k, w2, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, h2, w2, k * k)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(B, C, h2, w2, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h2 * k, w2 * k)
        full = np.zeros_like(x.data)
        full[:, :, : h2 * k, : w2 * k] = gb
        x._accum(full)

    return _node(out, (x,), "maxpool2d", backward)


def global_mean_pool(x) -> Tensor:
    return mean(x, axis=(2, 3))


# classification heads

def log_softmax(z, axis=-1) -> Tensor:
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        z._accum(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (z,), "log_softmax", backward)


def softmax(z: np.ndarray, axis=-1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        logits._accum(g * grad / n)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), "softmax_xent", backward)

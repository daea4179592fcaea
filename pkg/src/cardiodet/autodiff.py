"""Dense-tensor arithmetic with reverse-mode differentiation.

A Tensor wraps a numpy array (float32 or float64) and remembers the ops
that produced it, forming a DAG that is rebuilt on every forward pass.
backward() walks the DAG once in reverse topological order and accumulates
gradients into every reachable tensor with requires_grad=True.

Deliberate restrictions: no broadcasting (bias addition goes through
add_row / conv2d), 3x3 kernels only, pad in {0,1}, stride in {1,2},
2x2 max pooling only. Non-smooth points are pinned down: relu passes no
gradient at exactly 0, maxpool and minimum break ties toward the first
(row-major) element.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


class Tensor:
    """A node in the computation graph.

    data: numpy array, float32 or float64.
    requires_grad: gradients are accumulated into .grad during backward().
    Interior nodes carry a _backward closure and references to parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @staticmethod
    def _make(data, parents, backward_fn):
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        # never mutate g in place: local rules may alias one buffer to
        # several consumers (e.g. add hands the same array to both parents)
        if self.requires_grad:
            if self.grad is None:
                self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
            else:
                self.grad = self.grad + g

    def backward(self):
        backward(self)

    # operator sugar for the common binary ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def constant(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Topologically orders the DAG below `loss`, seeds d(loss)/d(loss)=1 and
    applies each node's local rule once. Gradients accumulate (+=) so
    shared subexpressions are handled correctly.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accum(g)  # leaf: parameters and inputs keep their gradient
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                # allocate rather than +=: pg may alias a buffer that is
                # still pending for another node
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        # free the closure so big intermediates can be collected
        node._backward = None
        node._parents = ()


def gradients(loss: Tensor, params) -> dict:
    """Run backward and return {param_name_or_index: grad array}."""
    for p in params:
        p.grad = None
    backward(loss)
    out = {}
    for i, p in enumerate(params):
        key = p.name if p.name is not None else i
        out[key] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    _check_same_shape("minimum", a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor._make(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._make(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return Tensor._make(a.data + np.asarray(float(c), dtype=a.dtype), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is defined as 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is stable for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(y, (a,), lambda g: (g * (y * (1.0 - y)),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._make(y, (a,), lambda g: (g * (1.0 - y * y),))


def cos(a: Tensor) -> Tensor:
    s = np.sin(a.data)
    return Tensor._make(np.cos(a.data), (a,), lambda g: (-g * s,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._make(y, (a,), lambda g: (g * y,))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + exp(x)), computed without overflow; gradient is sigmoid(x)."""
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return Tensor._make(y, (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                        lambda g: (g.transpose(inv),))


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]  # view; graph outputs are never mutated in place

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return Tensor._make(out, (a,), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._make(a.data[idx], (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise ShapeError("concat: mixed dtypes")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    shp = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.full(shp, g, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shp).copy(),)

    return Tensor._make(a.data.sum(axis=axis), (a,), bwd)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    shp = a.data.shape
    n = a.data.size if axis is None else shp[axis]

    def bwd(g):
        if axis is None:
            return (np.full(shp, g / n, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shp).copy(),)

    return Tensor._make(a.data.mean(axis=axis), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    return Tensor._make(a.data @ b.data, (a, b),
                        lambda g: (g @ b.data.T, a.data.T @ g))


def add_row(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-m row vector to every row of an [n, m] matrix."""
    if a.data.ndim != 2 or b.data.shape != (a.data.shape[1],):
        raise ShapeError(f"add_row: {a.data.shape} + {b.data.shape}")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_row(matmul(x, w), b)


# ---------------------------------------------------------------------------
# convolution / pooling

_COL_CHUNK = 1 << 23  # floats per im2col buffer chunk, caps transient memory


def _im2col(xp, s, hh, ww):
    """Padded input [n,C,Hp,Wp] -> columns [n, C*9, hh*ww], NCHW-native."""
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, 3, 3, hh, ww), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + s * hh:s, kx:kx + s * ww:s]
    return cols.reshape(n, c * 9, hh * ww)


def _col2im(dcols, n, c, hp, wp, s, hh, ww, dtype):
    """Scatter-add column gradients back into padded-input layout."""
    dxp = np.zeros((n, c, hp, wp), dtype=dtype)
    dc = dcols.reshape(n, c, 3, 3, hh, ww)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + s * hh:s, kx:kx + s * ww:s] += dc[:, :, ky, kx]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=1) -> Tensor:
    """3x3 cross-correlation. x:[N,C,H,W], w:[K,C,3,3], b:[K] -> [N,K,H',W']."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected x[N,C,H,W], w[K,C,3,3]; got {x.data.shape}, {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: input has {x.data.shape[1]} channels but kernel expects {w.data.shape[1]}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({w.data.shape[0]},)")
    if pad not in (0, 1) or stride not in (1, 2):
        raise ShapeError(f"conv2d: pad must be 0/1 and stride 1/2, got pad={pad} stride={stride}")
    n, c, h, wdt = x.data.shape
    k = w.data.shape[0]
    if h < 3 or wdt < 3:
        raise ShapeError(f"conv2d: spatial size {h}x{wdt} below kernel size")
    hh = (h + 2 * pad - 3) // stride + 1
    ww = (wdt + 2 * pad - 3) // stride + 1

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    w2 = w.data.reshape(k, c * 9)

    # chunk along N to bound the im2col buffer
    per_img = hh * ww * c * 9
    step = max(1, min(n, _COL_CHUNK // max(1, per_img)))
    out = np.empty((n, k, hh * ww), dtype=x.data.dtype)
    for i0 in range(0, n, step):
        i1 = min(n, i0 + step)
        np.matmul(w2, _im2col(xp[i0:i1], stride, hh, ww), out=out[i0:i1])
    out += b.data[:, None]
    out = out.reshape(n, k, hh, ww)

    def bwd(g):
        g2 = g.reshape(n, k, hh * ww)
        dw2 = np.zeros((k, c * 9), dtype=x.data.dtype)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i0 in range(0, n, step):
            i1 = min(n, i0 + step)
            cols = _im2col(xp[i0:i1], stride, hh, ww)
            dw2 += np.matmul(g2[i0:i1], cols.transpose(0, 2, 1)).sum(axis=0)
            if dxp is not None:
                dcols = np.matmul(w2.T, g2[i0:i1])
                dxp[i0:i1] = _col2im(dcols, i1 - i0, c, hp, wp, stride, hh, ww, x.data.dtype)
        db = g2.sum(axis=(0, 2))
        dx = None
        if dxp is not None:
            # strided view is fine: consumers are elementwise or re-pad
            dx = dxp[:, :, 1:-1, 1:-1] if pad else dxp
        return (dx, dw2.reshape(k, c, 3, 3), db)

    return Tensor._make(out, (x, w, b), bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties broken toward the first element in
    row-major window order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: expected [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: H and W must be even, got {h}x{w}")
    quads = (x.data[:, :, 0::2, 0::2], x.data[:, :, 0::2, 1::2],
             x.data[:, :, 1::2, 0::2], x.data[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]),
                     np.maximum(quads[2], quads[3]))

    def bwd(g):
        gx = np.zeros((n, c, h, w), dtype=x.data.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (dy, dx) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken  # first row-major max wins
            gx[:, :, dy::2, dx::2] = np.where(hit, g, 0)
            taken |= hit
        return (gx,)

    return Tensor._make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# softmax


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of an [n, m] matrix (stable shifted form)."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D, got {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) * y,)

    return Tensor._make(y, (a,), bwd)

"""Dense H×W×C grids and a tape-based reverse-mode differentiation core.

Every value flowing through the graph is a numpy array of shape (H, W, C);
scalars are (1, 1, 1).  Convolution kernels are the one exception and carry
shape (k, k, C_in, C_out).  There is no broadcasting beyond scalars: binary
ops require identical shapes or a size-1 operand, which keeps loss wiring
explicit.

The tape is implicit: each ``Node`` stores its parents and a closure
computing vector-Jacobian products, and ``backward`` replays them in reverse
topological order.  Gradients accumulate additively, so calling ``backward``
twice without zeroing doubles every gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ShapeError

DEFAULT_DTYPE = np.float64


class Node:
    """A value in the computation graph together with its gradient buffer."""

    __slots__ = ("value", "grad", "parents", "_vjp", "name")

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self._vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"

    # Arithmetic sugar; scalars are auto-wrapped as constants.
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


@dataclass
class Parameter:
    """Named trainable leaf of the graph."""

    name: str
    node: Node
    trainable: bool = field(default=True)


def as_node(x, dtype=None):
    """Wrap arrays or python numbers as constant leaves; pass Nodes through."""
    if isinstance(x, Node):
        return x
    if np.isscalar(x):
        arr = np.full((1, 1, 1), x, dtype=dtype or DEFAULT_DTYPE)
        return Node(arr)
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Node(arr)


def constant(values, dtype=None):
    return as_node(np.asarray(values), dtype=dtype)


def leaf(values, name=None, dtype=None):
    arr = np.array(values, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Node(arr, name=name)


def zero_grad(*nodes):
    for node in nodes:
        node.grad[...] = 0.0


# ---------------------------------------------------------------------------
# elementwise ops


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    # the operand was a broadcast scalar
    return np.sum(g).reshape(shape).astype(g.dtype, copy=False)


def _binary(a, b, op_name, fwd, dfa, dfb):
    a = as_node(a)
    b = as_node(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and av.size != 1 and bv.size != 1:
        raise ShapeError(f"{op_name}: shapes {av.shape} and {bv.shape} do not match "
                         "and neither operand is a scalar")
    out = fwd(av, bv)

    def vjp(g):
        return (_reduce_to(dfa(g, av, bv, out), av.shape),
                _reduce_to(dfb(g, av, bv, out), bv.shape))

    return Node(out, (a, b), vjp)


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: input must be strictly positive")
    val = a.value
    return Node(np.log(val), (a,), lambda g: (g / val,))


def absval(a):
    a = as_node(a)
    val = a.value
    # subgradient 0 at 0 (np.sign(0) == 0)
    return Node(np.abs(val), (a,), lambda g: (g * np.sign(val),))


def max0(a):
    a = as_node(a)
    val = a.value
    return Node(np.maximum(val, 0.0), (a,), lambda g: (g * (val > 0.0),))


def sigmoid(a):
    a = as_node(a)
    val = a.value
    out = np.empty_like(val)
    pos = val >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-val[pos]))
    ez = np.exp(val[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "abs": absval, "max0": max0, "sigmoid": sigmoid,
}

_UNARY = {"exp", "log", "abs", "max0", "sigmoid"}


def elementwise(op, a, b=None):
    """Dispatch on op name.  Binary ops accept a scalar-broadcast second operand."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"elementwise: unknown op {op!r}")
    fn = _ELEMENTWISE[op]
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"elementwise: {op} is unary")
        return fn(a)
    if b is None:
        raise ContractError(f"elementwise: {op} needs two operands")
    return fn(a, b)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only where the input was in range."""
    a = as_node(a)
    val = a.value
    mask = (val >= lo) & (val <= hi)
    return Node(np.clip(val, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structural ops


def reduce_sum(a):
    a = as_node(a)
    val = a.value
    out = np.sum(val).reshape(1, 1, 1)

    def vjp(g):
        return (np.full(val.shape, g.ravel()[0], dtype=val.dtype),)

    return Node(out, (a,), vjp)


def channel_sum(a):
    """Sum over the channel axis, (H, W, C) -> (H, W, 1)."""
    a = as_node(a)
    c = a.value.shape[2]
    out = a.value.sum(axis=2, keepdims=True)
    return Node(out, (a,), lambda g: (np.repeat(g, c, axis=2),))


def channel_mean(a):
    return mul(channel_sum(a), 1.0 / a.value.shape[2])


def crop(a, y0, y1, x0, x1):
    """Spatial slice [y0:y1, x0:x1]; adjoint embeds the gradient back with zeros."""
    a = as_node(a)
    val = a.value
    out = val[y0:y1, x0:x1, :].copy()

    def vjp(g):
        full = np.zeros_like(val)
        full[y0:y1, x0:x1, :] = g
        return (full,)

    return Node(out, (a,), vjp)


def stack_rows(nodes, gap):
    """Stack grids vertically with ``gap`` zero rows between them.

    With gap >= k-1 a 'same' zero-padded convolution of the stack computes
    bit-identical results to convolving each grid separately, which lets
    weight-sharing passes batch several inputs through one GEMM.
    """
    nodes = [as_node(n) for n in nodes]
    w, c = nodes[0].value.shape[1:]
    for n in nodes:
        if n.value.shape[1:] != (w, c):
            raise ShapeError(f"stack_rows: {n.value.shape[1:]} != {(w, c)}")
    pieces = []
    for i, n in enumerate(nodes):
        if i:
            pieces.append(np.zeros((gap, w, c), dtype=nodes[0].value.dtype))
        pieces.append(n.value)
    out = np.concatenate(pieces, axis=0)
    heights = [n.value.shape[0] for n in nodes]

    def vjp(g):
        grads = []
        y = 0
        for h in heights:
            grads.append(g[y:y + h])
            y += h + gap
        return tuple(grads)

    return Node(out, tuple(nodes), vjp)


def concat_channels(nodes):
    nodes = [as_node(n) for n in nodes]
    h, w = nodes[0].value.shape[:2]
    for n in nodes:
        if n.value.shape[:2] != (h, w):
            raise ShapeError(f"concat_channels: spatial dims {n.value.shape[:2]} != {(h, w)}")
    sizes = [n.value.shape[2] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=2)

    def vjp(g):
        grads = []
        start = 0
        for c in sizes:
            grads.append(g[:, :, start:start + c])
            start += c
        return tuple(grads)

    return Node(out, tuple(nodes), vjp)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_len(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding="same"):
    """Cross-correlation convolution.

    x: (H, W, C_in) node; w: (k, k, C_in, C_out) node; b: (1, 1, C_out) node.
    ``same`` pads with zeros by (k-1)//2 on each side.
    """
    x = as_node(x)
    w = w.node if isinstance(w, Parameter) else as_node(w)
    if b is not None:
        b = b.node if isinstance(b, Parameter) else as_node(b)
    xv, wv = x.value, w.value
    if wv.ndim != 4 or wv.shape[0] != wv.shape[1]:
        raise ShapeError(f"conv2d: kernel must be (k, k, C_in, C_out), got {wv.shape}")
    k = wv.shape[0]
    if k % 2 == 0:
        raise ContractError(f"conv2d: kernel size must be odd, got {k}")
    cin, cout = wv.shape[2], wv.shape[3]
    if xv.shape[2] != cin:
        raise ShapeError(f"conv2d: input channels {xv.shape[2]} != kernel C_in {cin}")
    if padding not in ("same", "valid"):
        raise ContractError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    pad = (k - 1) // 2 if padding == "same" else 0

    if pad:
        xp = np.zeros((xv.shape[0] + 2 * pad, xv.shape[1] + 2 * pad, cin),
                      dtype=xv.dtype)
        xp[pad:pad + xv.shape[0], pad:pad + xv.shape[1]] = xv
    else:
        xp = xv
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    # one im2col copy, reused as a GEMM operand by forward and weight-backward
    cols = np.ascontiguousarray(win).reshape(ho * wo, cin * k * k)
    wmat = np.ascontiguousarray(wv.transpose(2, 0, 1, 3)).reshape(cin * k * k, cout)
    out = (cols @ wmat).reshape(ho, wo, cout)
    if b is not None:
        if b.value.shape != (1, 1, cout):
            raise ShapeError(f"conv2d: bias shape {b.value.shape} != (1, 1, {cout})")
        out = out + b.value

    def vjp(g):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[dy:dy + ho * stride:stride,
                    dx:dx + wo * stride:stride] += g @ wv[dy, dx].T
        gx = gxp[pad:pad + xv.shape[0], pad:pad + xv.shape[1]] if pad else gxp
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 1)).reshape(1, 1, -1))

    parents = (x, w) if b is None else (x, w, b)
    return Node(out, parents, vjp)


# ---------------------------------------------------------------------------
# pooling / resampling


def avgpool2(a):
    a = as_node(a)
    h, w, c = a.value.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: dims must be even, got {h}x{w}")
    out = a.value.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25,)

    return Node(out, (a,), vjp)


_RESIZE_CACHE = {}


def _resize_matrix(n_in, n_out, dtype):
    """Row-stochastic bilinear resampling matrix (half-pixel centers, border clamp)."""
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in), dtype=dtype)
    for j in range(n_out):
        s = (j + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        f = s - i0
        i1 = min(i0 + 1, n_in - 1)
        m[j, i0] += 1.0 - f
        m[j, i1] += f
    _RESIZE_CACHE[key] = m
    return m


def resize_bilinear_values(values, out_h, out_w):
    """Plain-array separable bilinear resize (no gradient tracking)."""
    rh = _resize_matrix(values.shape[0], out_h, values.dtype)
    rw = _resize_matrix(values.shape[1], out_w, values.dtype)
    t = np.tensordot(rh, values, axes=([1], [0]))
    return np.tensordot(rw, t, axes=([1], [1])).transpose(1, 0, 2)


def resize_bilinear(a, out_h, out_w):
    """Differentiable bilinear resize; the adjoint is the transposed resampling."""
    a = as_node(a)
    val = a.value
    rh = _resize_matrix(val.shape[0], out_h, val.dtype)
    rw = _resize_matrix(val.shape[1], out_w, val.dtype)
    t = np.tensordot(rh, val, axes=([1], [0]))
    out = np.tensordot(rw, t, axes=([1], [1])).transpose(1, 0, 2)

    def vjp(g):
        u = np.tensordot(rh.T, g, axes=([1], [0]))
        return (np.tensordot(rw.T, u, axes=([1], [1])).transpose(1, 0, 2),)

    return Node(out, (a,), vjp)


def upsample_bilinear2(a):
    a = as_node(a)
    h, w = a.value.shape[:2]
    return resize_bilinear(a, 2 * h, 2 * w)


def pool_and_resize(a, mode):
    if mode == "avgpool2":
        return avgpool2(a)
    if mode == "upsample_bilinear2":
        return upsample_bilinear2(a)
    raise ContractError(f"pool_and_resize: unknown mode {mode!r}")


def box_mean3(a):
    """3x3 uniform box mean with edge-replicated borders; exact adjoint."""
    a = as_node(a)
    val = a.value
    h, w, _ = val.shape
    vp = np.pad(val, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(val)
    for dy in range(3):
        for dx in range(3):
            out += vp[dy:dy + h, dx:dx + w]
    out /= 9.0

    def vjp(g):
        gp = np.zeros_like(vp)
        g9 = g / 9.0
        for dy in range(3):
            for dx in range(3):
                gp[dy:dy + h, dx:dx + w] += g9
        gx = gp[1:h + 1, 1:w + 1].copy()
        # fold the replicated border contributions back onto the edges
        gx[0] += gp[0, 1:w + 1]
        gx[-1] += gp[h + 1, 1:w + 1]
        gx[:, 0] += gp[1:h + 1, 0]
        gx[:, -1] += gp[1:h + 1, w + 1]
        gx[0, 0] += gp[0, 0]
        gx[0, -1] += gp[0, w + 1]
        gx[-1, 0] += gp[h + 1, 0]
        gx[-1, -1] += gp[h + 1, w + 1]
        return (gx,)

    return Node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root):
    """Populate .grad of every node reachable from a scalar root.

    Gradients from this call are added to whatever is already in .grad;
    fan-out contributions within the call accumulate additively.
    """
    if root.value.shape != (1, 1, 1):
        raise ContractError(f"backward: root must be scalar (1,1,1), got {root.value.shape}")
    order = _toposort(root)
    adjoint = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg

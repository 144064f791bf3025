"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the operations the coefficient network and its loss need are provided.
Convolutions use cross-correlation semantics (no kernel flip) with zero
padding, matching the usual deep-learning convention. The dictionary filters
are applied with the same orientation (see ``lapar.assembly``), so a tap at
row ``i``, column ``j`` of a kernel always multiplies the pixel at offset
``(i - k//2, j - k//2)``.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from lapar import kernels


class Tensor:
    """An n-d array with an optional gradient slot.

    Tensors produced by differentiable ops carry a ``_parents`` tuple and a
    ``_backward`` closure mapping the output gradient to one gradient per
    parent (``None`` for parents that do not need one).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(grad_out)`` must return one array (or ``None``) per parent.
    """
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise -------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return make_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_op("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return make_op("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_op("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate (N, C_i, H, W) tensors along the channel axis."""
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {x.shape}")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    data = np.concatenate([x.data for x in xs], axis=1)
    return make_op("concat", data, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)))


# -- convolution -------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-d cross-correlation of (N, Cin, H, W) with (Cout, Cin, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input {x.shape} has {cin} channels but weight {weight.shape} expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: need padding >= 0 and stride >= 1")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")

    xd = x.data
    if xd.dtype != weight.dtype:
        xd = xd.astype(weight.dtype)
    if kh == 1 and kw == 1 and padding == 0 and stride == 1:
        cols = xd.reshape(n, cin, h * w)
    else:
        cols = kernels.im2col(np.ascontiguousarray(xd), kh, kw, padding, stride)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def _backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = g2[0] @ cols[0].T
            for i in range(1, n):
                gw += g2[i] @ cols[i].T
            gw = gw.reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if kh == 1 and kw == 1 and padding == 0 and stride == 1:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols, x.shape, kh, kw, padding, stride)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, parents, _backward)


def weight_norm(direction: Tensor, gain: Tensor) -> Tensor:
    """Per-output-channel ``gain[c] * direction[c] / ||direction[c]||``."""
    v = direction.data
    cout = v.shape[0]
    if gain.shape != (cout,):
        raise ValueError(f"weight_norm: gain shape {gain.shape} does not match {cout} output channels")
    flat = v.reshape(cout, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    if np.any(norms == 0):
        bad = np.flatnonzero(norms == 0).tolist()
        raise ValueError(f"weight_norm: zero-norm direction for output channels {bad}")
    unit = flat / norms[:, None]
    g = gain.data
    w = (g[:, None] * unit).reshape(v.shape)

    def _backward(gw):
        gw = gw.reshape(cout, -1)
        dot = (gw * unit).sum(axis=1)
        ggain = dot
        gdir = (g / norms)[:, None] * (gw - dot[:, None] * unit)
        return gdir.reshape(v.shape), ggain

    return make_op("weight_norm", w, (direction, gain), _backward)


def weight_norm_conv2d(x: Tensor, direction: Tensor, gain: Tensor, bias: Optional[Tensor] = None,
                       stride: int = 1, padding: int = 0) -> Tensor:
    return conv2d(x, weight_norm(direction, gain), bias, stride=stride, padding=padding)


# -- rearrangement -----------------------------------------------------------

def _shuffle(a: np.ndarray, s: int) -> np.ndarray:
    n, c, h, w = a.shape
    c_out = c // (s * s)
    return a.reshape(n, c_out, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c_out, h * s, w * s)


def _unshuffle(a: np.ndarray, s: int) -> np.ndarray:
    n, c, hs, ws = a.shape
    h, w = hs // s, ws // s
    return a.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Depth-to-space: out[n, c, h*s+a, w*s+b] = in[n, c*s*s + a*s + b, h, w]."""
    if x.data.ndim != 4:
        raise ValueError(f"pixel_shuffle expects a 4-d tensor, got {x.shape}")
    if s < 1 or x.shape[1] % (s * s):
        raise ValueError(f"pixel_shuffle: {x.shape[1]} channels not divisible by s^2={s * s}")
    if s == 1:
        return make_op("pixel_shuffle", x.data.copy(), (x,), lambda g: (g,))
    return make_op("pixel_shuffle", _shuffle(x.data, s), (x,), lambda g: (_unshuffle(g, s),))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    if x.data.ndim != 4 or x.shape[2] % s or x.shape[3] % s:
        raise ValueError(f"pixel_unshuffle: spatial dims of {x.shape} not divisible by {s}")
    return make_op("pixel_unshuffle", _unshuffle(x.data, s), (x,), lambda g: (_shuffle(g, s),))


# -- pixel-adaptive assembly -------------------------------------------------

def basis_combine(phi: Tensor, responses: np.ndarray) -> Tensor:
    """Per-pixel dot product over the basis axis.

    ``phi`` is (N, L, H, W); ``responses`` is (N, L, H, W) or
    (N, ch, L, H, W) for multi-channel images sharing one coefficient map.
    Returns (N, 1, H, W) or (N, ch, H, W). Responses are treated as constants.
    """
    p = phi.data
    if responses.ndim == 4:
        if responses.shape != p.shape:
            raise ValueError(f"basis_combine: phi {p.shape} vs responses {responses.shape}")
        out = (p * responses).sum(axis=1, keepdims=True)
        return make_op("basis_combine", out, (phi,), lambda g: (g * responses,))
    if responses.ndim != 5 or responses.shape[:1] + responses.shape[2:] != p.shape:
        raise ValueError(f"basis_combine: phi {p.shape} vs responses {responses.shape}")
    out = np.einsum("nlhw,nclhw->nchw", p, responses, optimize=True)
    return make_op("basis_combine", out, (phi,),
                   lambda g: (np.einsum("nchw,nclhw->nlhw", g, responses, optimize=True),))


# -- testing aid -------------------------------------------------------------

def numerical_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central finite difference of scalar ``f()`` w.r.t. ``arr[index]`` (in place)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(loss_fn: Callable[[], Tensor], params: dict, probes: int, rng: np.random.Generator,
              h: float = 1e-5) -> list:
    """Compare backward() against central differences at random entries.

    ``params`` maps names to leaf tensors (float64 recommended) that
    ``loss_fn`` reads. Probes are spread round-robin over the tensors.
    Returns ``(name, index, analytic, numeric, relative_error)`` rows.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def value():
        return float(loss_fn().data)

    rows = []
    names = list(params)
    for i in range(probes):
        name = names[i % len(names)]
        arr = params[name].data
        idx = tuple(int(rng.integers(n)) for n in arr.shape)
        num = numerical_grad(value, arr, idx, h)
        ana = float(analytic[name][idx])
        rows.append((name, idx, ana, num, relative_error(ana, num)))
    return rows

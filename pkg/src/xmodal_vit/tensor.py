"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the cross-modal ViT needs are provided. Every op records
a backward closure holding exactly the activations it needs; ``backward``
walks the recorded nodes in reverse creation order.

Shape rules are deliberately narrow: elementwise binary ops accept equal
shapes, or a right operand whose shape is a trailing suffix of the left one
(the row-wise bias / affine case). Anything else raises ``ShapeError``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import warnings
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NearZeroNormWarning",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "astype",
    "transpose",
    "reshape",
    "concat",
    "softmax",
    "layernorm",
    "gelu",
    "cross_entropy_logits",
    "cosine_similarity",
    "backward",
    "zero_grad",
]

LAYERNORM_EPS = 1e-6
COSINE_EPS = 1e-8

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NearZeroNormWarning(RuntimeWarning):
    """A cosine-similarity operand has (near) zero norm; the eps guard kicked in."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional array plus an optional gradient and graph link.

    ``data`` is a numpy array (row-major); ``grad`` is allocated lazily on
    leaves that require gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out.op = op
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> int:
    """Return how many leading axes of ``a`` ``b`` is broadcast across."""
    if a.shape == b.shape:
        return 0
    k = a.ndim - b.ndim
    if k > 0 and a.shape[k:] == b.shape:
        return k
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_leading(g: np.ndarray, k: int) -> np.ndarray:
    return g.sum(axis=tuple(range(k))) if k else g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    k = _check_suffix(a, b, "add")

    def grad_fn(g):
        return g, _reduce_leading(g, k)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    k = _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g * bd, _reduce_leading(g * ad, k)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


# rational minimax fit of erf on [-4, 4]; max abs error ~4e-7 in float32
_ERF_NUM = (-2.72614225801306e-10, 2.77068142495902e-08, -2.10102402082508e-06, -5.69250639462346e-05,
            -7.34990630326855e-04, -2.95459980854025e-03, -1.60960333262415e-02)
_ERF_DEN = (-1.45660718464996e-05, -2.13374055278905e-04, -1.68282697438203e-03, -7.37332916720468e-03,
            -1.42647390514189e-02)


def _erf(x: np.ndarray) -> np.ndarray:
    """erf to working precision: scipy in double, a float32-accurate rational form otherwise."""
    if x.dtype == np.float64:
        return erf(x)
    t = x.dtype.type
    xc = np.minimum(x, t(4.0))
    np.maximum(xc, t(-4.0), out=xc)
    x2 = xc * xc
    num = x2 * t(_ERF_NUM[0])
    num += t(_ERF_NUM[1])
    for c in _ERF_NUM[2:]:
        num *= x2
        num += t(c)
    den = x2 * t(_ERF_DEN[0])
    den += t(_ERF_DEN[1])
    for c in _ERF_DEN[2:]:
        den *= x2
        den += t(c)
    num *= xc
    num /= den
    return num


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * xd.dtype.type(_SQRT_HALF)))
    cdf = cdf.astype(xd.dtype, copy=False)

    def grad_fn(g):
        return (g * _gelu_grad(xd, cdf),)

    return _make(xd * cdf, (x,), grad_fn, "gelu")


def _gelu_grad(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    t = x.dtype.type
    pdf = t(_INV_SQRT_2PI) * np.exp(t(-0.5) * x * x)
    return cdf + x * pdf


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` and ``b[..., k, n]`` (same leading dims) or ``b[k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    shared_weight = b.ndim == 2 and a.ndim > 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if shared_weight:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    if shared_weight:
        # one large GEMM instead of a loop over the leading axes
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd
    return _make(out, (a, b), grad_fn, "matmul")


def astype(a: Tensor, dtype) -> Tensor:
    """Precision cast; the gradient is cast back to the source dtype."""
    src = a.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "astype")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2-D, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(int(ax) for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no operands")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (int / slice) indexing only, so the scatter in backward has no collisions."""
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not isinstance(i, (int, np.integer, slice)) and i is not Ellipsis:
            raise TypeError(f"only basic int/slice indexing is supported, got {type(i).__name__}")
    src_shape, dtype = a.shape, a.dtype

    def grad_fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), grad_fn, "slice")


def tsum(a: Tensor, axis=None) -> Tensor:
    src = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation, attention and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax: empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data
    lead = x.ndim - 1

    def grad_fn(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = _reduce_leading(g * xhat, lead)
        if beta.requires_grad:
            gbeta = _reduce_leading(g, lead)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), grad_fn, "layernorm")


def cross_entropy_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: expected [batch, classes], got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise ShapeError(f"cross_entropy_logits: {labels.shape[0]} labels for batch of {b}")
    if c < 2:
        raise ShapeError("cross_entropy_logits: need at least two classes")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range [0, {c}): {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "cross_entropy")


def cosine_similarity(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity along the last axis: ``u.v / ((|u|+eps)(|v|+eps))``."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes {u.shape} and {v.shape} differ")
    ud, vd = u.data, v.data
    nu = np.sqrt((ud * ud).sum(axis=-1))
    nv = np.sqrt((vd * vd).sum(axis=-1))
    if np.any(nu < eps) or np.any(nv < eps):
        warnings.warn("cosine_similarity: operand with near-zero norm", NearZeroNormWarning, stacklevel=2)
    a = nu + eps
    b = nv + eps
    s = (ud * vd).sum(axis=-1)
    out = s / (a * b)

    def grad_fn(g):
        gu = gv = None
        # d|u|/du = u/|u|, taken as 0 at u = 0
        if u.requires_grad:
            unit_u = ud / np.where(nu > 0, nu, 1.0)[..., None]
            gu = (g / (a * b))[..., None] * vd - (g * s / (a * a * b))[..., None] * unit_u
        if v.requires_grad:
            unit_v = vd / np.where(nv > 0, nv, 1.0)[..., None]
            gv = (g / (a * b))[..., None] * ud - (g * s / (a * b * b))[..., None] * unit_v
        return gu, gv

    return _make(np.asarray(out, dtype=ud.dtype), (u, v), grad_fn, "cosine_similarity")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _collect(root: Tensor) -> list:
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in _collect(root):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

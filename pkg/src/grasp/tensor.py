"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small.  Storage is row-major numpy float64.
Shapes are explicit everywhere: elementwise operations require equal
shapes, with the single exception that one operand may be a scalar
(a 0-d tensor or a plain Python number).  There is no other implicit
broadcasting, no views escape into user code, and matmul is strictly
two-dimensional.

Differentiation uses a tape.  Every operation whose output needs a
gradient records a node holding its parent tensors and a pullback that
maps the output gradient onto the parents.  Creation order is already a
topological order (an operation's inputs exist before its output), so
the backward sweep simply visits the recorded nodes reachable from the
root once each, in descending creation order.  Gradients accumulate
additively, which makes fan-out and cross-graph accumulation (for
batched losses) fall out naturally.

Tensors created with ``requires_grad=False`` are frozen: their backing
arrays are marked read-only at construction.  Gradient accumulators are
allocated at construction for every tensor that requires a gradient and
are only ever added to; call :func:`zero_grads` between optimizer steps.

A single tape is built and swept on one thread; nothing here is
thread-safe and nothing needs to be at this scale.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import ConfigError, DimensionError

_SEQ = itertools.count()


class _Node:
    """One recorded operation: the parents it read and its pullback."""

    __slots__ = ("name", "parents", "pullback")

    def __init__(self, name, parents, pullback):
        self.name = name
        self.parents = parents
        self.pullback = pullback


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        self._init(arr, requires_grad, None)

    @classmethod
    def _wrap(cls, arr, requires_grad, node):
        # Internal constructor that takes ownership of ``arr`` (no copy).
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        t = object.__new__(cls)
        t._init(arr, requires_grad, node)
        return t

    def _init(self, arr, requires_grad, node):
        if not requires_grad:
            arr.flags.writeable = False
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self.node = node
        self.seq = next(_SEQ)

    # -- introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient plumbing --------------------------------------------

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self, seed=None):
        backward(self, seed)

    # -- operator sugar ------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def softplus(self):
        return softplus(self)

    def abs(self):
        return absolute(self)

    def softmax(self, axis):
        return softmax(self, axis)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """The operations reachable from a root, in creation order.

    Creation order is a topological order of the graph, so sweeping the
    list in reverse runs every pullback after the full output gradient
    of its node has accumulated.  Each node is visited exactly once.
    """

    __slots__ = ("tensors",)

    def __init__(self, tensors):
        self.tensors = tensors

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.parents)
        found.sort(key=lambda t: t.seq)
        return cls(found)

    def run_backward(self):
        for t in reversed(self.tensors):
            t.node.pullback(t.grad)
            # interior gradients are consumed by the sweep; only leaves keep
            # accumulating across backward calls
            t.grad[...] = 0.0


def backward(root: Tensor, seed=None):
    """Accumulate d(root)/d(leaf) into every reachable gradient."""
    if not root.requires_grad:
        raise ValueError("backward() root does not track gradients")
    if seed is None:
        if root.data.size != 1:
            raise DimensionError(
                f"backward() without a seed gradient needs a scalar root, got shape {root.shape}"
            )
        root.grad += 1.0
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.data.shape:
            raise DimensionError(
                f"seed gradient shape {seed.shape} does not match root shape {root.shape}"
            )
        root.grad += seed
    Tape.trace(root).run_backward()


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# -- op helpers --------------------------------------------------------


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_elementwise(name, a, b):
    if a.data.shape == b.data.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{name}: shapes {a.data.shape} and {b.data.shape} are incompatible")


def _fit(g, t: Tensor):
    # Reduce a gradient onto a scalar operand of a broadcast op.
    if _is_scalar(t) and np.ndim(g) != 0:
        return g.sum()
    return g


def _attach(arr, name, pairs):
    """Build the output tensor; record a node if any parent needs grads.

    ``pairs`` is a list of (parent, pull) where ``pull`` maps the output
    gradient to that parent's contribution.
    """
    if not any(p.requires_grad for p, _ in pairs):
        return Tensor._wrap(arr, False, None)

    parents = tuple(p for p, _ in pairs)

    def pullback(g):
        for p, pull in pairs:
            if p.requires_grad:
                p.grad += pull(g)

    return Tensor._wrap(arr, True, _Node(name, parents, pullback))


# -- arithmetic ---------------------------------------------------------


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("add", a, b)
    out = a.data + b.data
    return _attach(out, "add", [(a, lambda g: _fit(g, a)), (b, lambda g: _fit(g, b))])


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("sub", a, b)
    out = a.data - b.data
    return _attach(out, "sub", [(a, lambda g: _fit(g, a)), (b, lambda g: _fit(-g, b))])


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("mul", a, b)
    out = a.data * b.data
    return _attach(
        out,
        "mul",
        [(a, lambda g: _fit(g * b.data, a)), (b, lambda g: _fit(g * a.data, b))],
    )


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("div", a, b)
    out = a.data / b.data
    return _attach(
        out,
        "div",
        [
            (a, lambda g: _fit(g / b.data, a)),
            (b, lambda g: _fit(-g * a.data / (b.data * b.data), b)),
        ],
    )


def neg(a):
    a = _coerce(a)
    return _attach(-a.data, "neg", [(a, lambda g: -g)])


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-d operands, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain")
    out = a.data @ b.data
    return _attach(
        out,
        "matmul",
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
    )


def transpose(a):
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got shape {a.data.shape}")
    return _attach(a.data.T.copy(), "transpose", [(a, lambda g: g.T)])


# -- pointwise nonlinearities -------------------------------------------


def _sigmoid_arr(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _coerce(a)
    y = _sigmoid_arr(a.data)
    return _attach(y, "sigmoid", [(a, lambda g: g * y * (1.0 - y))])


def relu(a):
    a = _coerce(a)
    mask = a.data > 0
    return _attach(np.where(mask, a.data, 0.0), "relu", [(a, lambda g: g * mask)])


def tanh(a):
    a = _coerce(a)
    y = np.tanh(a.data)
    return _attach(y, "tanh", [(a, lambda g: g * (1.0 - y * y))])


def softplus(a):
    """log(1 + exp(x)), evaluated stably for large |x|."""
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data)
    return _attach(out, "softplus", [(a, lambda g: g * _sigmoid_arr(a.data))])


def absolute(a):
    a = _coerce(a)
    return _attach(np.abs(a.data), "abs", [(a, lambda g: g * np.sign(a.data))])


def softmax(a, axis):
    a = _coerce(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {a.data.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _attach(y, "softmax", [(a, pull)])


# -- reductions and structure -------------------------------------------


def tsum(a):
    a = _coerce(a)
    out = np.array(a.data.sum())
    return _attach(out, "sum", [(a, lambda g: np.full(a.data.shape, float(g)))])


def tmean(a):
    a = _coerce(a)
    n = a.data.size
    out = np.array(a.data.mean())
    return _attach(out, "mean", [(a, lambda g: np.full(a.data.shape, float(g) / n))])


def reshape(a, shape):
    a = _coerce(a)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view shape {a.data.shape} as {tuple(shape)}")
    out = a.data.reshape(shape).copy()
    return _attach(out, "reshape", [(a, lambda g: g.reshape(a.data.shape))])


def concat(tensors, axis):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat along axis {axis}: shapes {[t.data.shape for t in tensors]}"
        ) from exc
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        pairs.append((t, pull))
    return _attach(out, "concat", pairs)


def cols(a, start, stop):
    """Column slice of a 2-d tensor."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise DimensionError(f"cols needs a 2-d tensor, got shape {a.data.shape}")
    if not (0 <= start < stop <= a.data.shape[1]):
        raise DimensionError(f"cols [{start}:{stop}] out of range for shape {a.data.shape}")
    out = a.data[:, start:stop].copy()

    def pull(g):
        full = np.zeros(a.data.shape)
        full[:, start:stop] = g
        return full

    return _attach(out, "cols", [(a, pull)])


def scale_rows(a, s):
    """Multiply row i of a 2-d tensor by s[i]."""
    a, s = _coerce(a), _coerce(s)
    if a.data.ndim != 2 or s.data.ndim != 1 or s.data.shape[0] != a.data.shape[0]:
        raise DimensionError(
            f"scale_rows: shapes {a.data.shape} and {s.data.shape} are incompatible"
        )
    out = a.data * s.data[:, None]
    return _attach(
        out,
        "scale_rows",
        [
            (a, lambda g: g * s.data[:, None]),
            (s, lambda g: (g * a.data).sum(axis=1)),
        ],
    )


def add_rowvec(a, b):
    """Add a length-n vector to every row of an (m, n) tensor."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or b.data.shape[0] != a.data.shape[1]:
        raise DimensionError(
            f"add_rowvec: shapes {a.data.shape} and {b.data.shape} are incompatible"
        )
    out = a.data + b.data[None, :]
    return _attach(
        out,
        "add_rowvec",
        [(a, lambda g: g), (b, lambda g: g.sum(axis=0))],
    )


def depatchify(a, grid_h, grid_w, patch):
    """Reassemble (grid_h*grid_w, patch*patch) token logits into an image.

    Token t = ty*grid_w + tx owns the patch*patch block of the output at
    rows [ty*patch, (ty+1)*patch) and columns [tx*patch, (tx+1)*patch);
    its vector is that block in row-major order.
    """
    a = _coerce(a)
    if a.data.shape != (grid_h * grid_w, patch * patch):
        raise DimensionError(
            f"depatchify: shape {a.data.shape} does not match grid "
            f"({grid_h}x{grid_w}) of {patch}x{patch} patches"
        )
    out = (
        a.data.reshape(grid_h, grid_w, patch, patch)
        .transpose(0, 2, 1, 3)
        .reshape(grid_h * patch, grid_w * patch)
    ).copy()

    def pull(g):
        return (
            g.reshape(grid_h, patch, grid_w, patch)
            .transpose(0, 2, 1, 3)
            .reshape(grid_h * grid_w, patch * patch)
        )

    return _attach(out, "depatchify", [(a, pull)])


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split an (H, W) array into (L, patch*patch) row-major patch vectors.

    Plain numpy helper (model inputs are constants, nothing to differentiate).
    """
    h, w = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    return image.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)


# -- attention ----------------------------------------------------------


class AttentionParams:
    """Projection weights for one multi-head cross-attention layer."""

    __slots__ = ("wq", "wk", "wv", "wo")

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "AttentionParams":
        scale = 1.0 / math.sqrt(dim)
        mats = [Tensor(rng.normal(0.0, scale, (dim, dim)), requires_grad=True) for _ in range(4)]
        return cls(*mats)

    def tensors(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]


def multihead_cross_attention(q, k, v, params: AttentionParams, heads: int):
    """Multi-head cross-attention over full token matrices.

    Returns (output, attn) where output is (L_q, D) and attn stacks the
    per-head softmax weights into shape (heads, L_q, L_k).  Queries,
    keys, and values are projected, split into column blocks per head,
    mixed by scaled dot-product attention, concatenated, and projected
    by the output matrix.
    """
    q, k, v = _coerce(q), _coerce(k), _coerce(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention operands must be 2-d token matrices")
    dim = q.data.shape[1]
    if k.data.shape[1] != dim or v.data.shape[1] != dim:
        raise DimensionError(
            f"attention: channel mismatch {q.data.shape} / {k.data.shape} / {v.data.shape}"
        )
    if k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(
            f"attention: key/value length mismatch {k.data.shape} vs {v.data.shape}"
        )
    if heads < 1 or dim % heads:
        raise ConfigError(f"head count {heads} does not divide channel width {dim}")
    dh = dim // heads
    scale = 1.0 / math.sqrt(dh)

    qp = matmul(q, params.wq)
    kp = matmul(k, params.wk)
    vp = matmul(v, params.wv)

    l_q, l_k = q.data.shape[0], k.data.shape[0]
    mixed, weights = [], []
    for h in range(heads):
        qh = cols(qp, h * dh, (h + 1) * dh)
        kh = cols(kp, h * dh, (h + 1) * dh)
        vh = cols(vp, h * dh, (h + 1) * dh)
        attn = softmax(mul(matmul(qh, transpose(kh)), scale), axis=1)
        mixed.append(matmul(attn, vh))
        weights.append(reshape(attn, (1, l_q, l_k)))

    out = matmul(concat(mixed, axis=1), params.wo)
    return out, concat(weights, axis=0)

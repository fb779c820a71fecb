"""Minimal reverse-mode automatic differentiation over numpy buffers.

Dense tensors, CSR sparse matrices, a recording tape, Xavier init and Adam.
Everything here is single-threaded: the tape is owned by one training loop.
"""

from __future__ import annotations

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    """A dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype] if isinstance(dtype, str) else dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def grad_or_zero(self):
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"


class SparseMatrix:
    """CSR matrix used for normalized adjacencies. Values are constants
    (never differentiated through); only the dense operand carries grads."""

    __slots__ = ("rows", "cols", "indptr", "indices", "values", "_t")

    def __init__(self, rows, cols, indptr, indices, values):
        self.rows = int(rows)
        self.cols = int(cols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values)
        self._t = None
        if self.indptr.shape != (self.rows + 1,):
            raise ValueError(f"indptr length {self.indptr.shape} does not match rows {self.rows}")
        if self.indices.shape != self.values.shape:
            raise ValueError("indices/values length mismatch")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.cols):
            raise ValueError("column index out of range")
        # sort column indices within each row
        for r in range(self.rows):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            order = np.argsort(self.indices[lo:hi], kind="stable")
            self.indices[lo:hi] = self.indices[lo:hi][order]
            self.values[lo:hi] = self.values[lo:hi][order]

    @classmethod
    def from_coo(cls, rows, cols, row_idx, col_idx, values):
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values)
        order = np.lexsort((col_idx, row_idx))
        row_idx, col_idx, values = row_idx[order], col_idx[order], values[order]
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(indptr, row_idx + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(rows, cols, indptr, col_idx, values)

    @property
    def nnz(self):
        return len(self.values)

    def matmul_dense(self, x: np.ndarray) -> np.ndarray:
        """CSR @ dense, vectorized via per-row segment reduction."""
        if x.shape[0] != self.cols:
            raise ValueError(f"sparse cols {self.cols} vs dense rows {x.shape[0]}")
        out = np.zeros((self.rows,) + x.shape[1:], dtype=x.dtype)
        if self.nnz == 0:
            return out
        prods = self.values.astype(x.dtype)[:, None] * x[self.indices]
        lengths = np.diff(self.indptr)
        nonempty = np.nonzero(lengths)[0]
        starts = self.indptr[nonempty]
        out[nonempty] = np.add.reduceat(prods, starts, axis=0)
        return out

    def transpose(self) -> "SparseMatrix":
        if self._t is None:
            lengths = np.diff(self.indptr)
            row_idx = np.repeat(np.arange(self.rows, dtype=np.int64), lengths)
            self._t = SparseMatrix.from_coo(self.cols, self.rows, self.indices, row_idx, self.values)
            self._t._t = self
        return self._t

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.values.dtype)
        lengths = np.diff(self.indptr)
        row_idx = np.repeat(np.arange(self.rows, dtype=np.int64), lengths)
        out[row_idx, self.indices] = self.values
        return out


class Tape:
    """Append-only record of operations; backward replays it in reverse."""

    def __init__(self):
        self._ops = []

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def __len__(self):
        return len(self._ops)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(fn):
    tape = _active_tape()
    if tape is not None:
        tape.record(fn)


def backward(tape: Tape, loss: Tensor):
    """Accumulate gradients of a scalar loss into .grad of every tensor on the tape."""
    if len(tape) == 0:
        raise ValueError("backward on an empty tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._ops):
        fn()


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad, a.data.shape))
        b.accumulate(_unbroadcast(out.grad, b.data.shape))

    _record(bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data - b.data)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad, a.data.shape))
        b.accumulate(_unbroadcast(-out.grad, b.data.shape))

    _record(bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    _record(bwd)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = Tensor(a.data / b.data)

    def bwd():
        if out.grad is None:
            return
        a.accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
        b.accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    _record(bwd)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def bwd():
        if out.grad is not None:
            a.accumulate(-out.grad)

    _record(bwd)
    return out


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.data.dtype.type(c)
    out = Tensor(a.data * c)

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad * c)

    _record(bwd)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        bd, ad = b.data, a.data
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if bd.ndim > 1 else np.multiply.outer(g, bd)
        if ad.ndim == 1:
            gb = np.matmul(ad[:, None], g[..., None, :])
            gb = _unbroadcast(gb, bd.shape) if gb.shape != bd.shape else gb
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g if g.ndim > 1 else g[..., None, :])
        a.accumulate(_unbroadcast(ga, ad.shape))
        b.accumulate(_unbroadcast(gb, bd.shape))

    _record(bwd)
    return out


def sparse_dense_matmul(a: SparseMatrix, x) -> Tensor:
    """A @ X for a constant CSR matrix A and a dense (possibly trainable) X."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"dense operand must be 2-d, got {x.data.shape}")
    out = Tensor(a.matmul_dense(x.data))
    at = a.transpose()

    def bwd():
        if out.grad is not None:
            x.accumulate(at.matmul_dense(out.grad))

    _record(bwd)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad * (1.0 - out.data * out.data))

    _record(bwd)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(_stable_sigmoid(a.data))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad * out.data * (1.0 - out.data))

    _record(bwd)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(a.data.dtype.type(0), a.data))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad * _stable_sigmoid(a.data))

    _record(bwd)
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.where(a.data >= 0, a.data, slope * a.data))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad * np.where(a.data >= 0, 1.0, slope).astype(a.data.dtype))

    _record(bwd)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad * out.data)

    _record(bwd)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad / a.data)

    _record(bwd)
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad * 0.5 / out.data)

    _record(bwd)
    return out


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def bwd():
        if out.grad is None:
            return
        s = out.data
        inner = (out.grad * s).sum(axis=-1, keepdims=True)
        a.accumulate(s * (out.grad - inner))

    _record(bwd)
    return out


def logsumexp_rows(a) -> Tensor:
    """log-sum-exp along the last axis, returning shape[:-1]."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(s)).squeeze(-1))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad[..., None] * (e / s))

    _record(bwd)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd():
        if out.grad is None:
            return
        for t, piece in zip(tensors, np.split(out.grad, splits, axis=axis)):
            t.accumulate(piece)

    _record(bwd)
    return out


def mean_over(tensors) -> Tensor:
    """Elementwise mean of same-shape tensors."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("mean_over of an empty list")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = Tensor(acc / len(tensors))
    inv = 1.0 / len(tensors)

    def bwd():
        if out.grad is None:
            return
        for t in tensors:
            t.accumulate(out.grad * inv)

    _record(bwd)
    return out


def gather_rows(a, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a.accumulate(g)

    _record(bwd)
    return out


def segment_sum(a, seg_ids, num_segments: int) -> Tensor:
    """Sum rows of `a` into `num_segments` buckets given by seg_ids."""
    a = _as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    res = np.zeros((num_segments,) + a.data.shape[1:], dtype=a.data.dtype)
    np.add.at(res, seg_ids, a.data)
    out = Tensor(res)

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad[seg_ids])

    _record(bwd)
    return out


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    _record(bwd)
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd():
        if out.grad is not None:
            a.accumulate(out.grad.reshape(a.data.shape))

    _record(bwd)
    return out


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def bwd():
        if out.grad is not None:
            a.accumulate(np.swapaxes(out.grad, -1, -2))

    _record(bwd)
    return out


def take_diag(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ValueError(f"take_diag needs a square matrix, got {a.data.shape}")
    out = Tensor(np.diagonal(a.data).copy())

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(a.data)
        np.fill_diagonal(g, out.grad)
        a.accumulate(g)

    _record(bwd)
    return out


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    a = _as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = Tensor(a.data / denom)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        live = norms > eps
        inner = (g * out.data).sum(axis=-1, keepdims=True)
        a.accumulate(np.where(live, (g - out.data * inner) / denom, g / denom))

    _record(bwd)
    return out


# ---------------------------------------------------------------------------
# initialization and optimizer


def xavier_init(shape, seed, dtype="f32") -> Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)), seeded."""
    shape = tuple(int(s) for s in shape)
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, dtype=dtype)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update with bias correction; mutates params in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def zero_grads(params):
    for p in params:
        p.grad = None

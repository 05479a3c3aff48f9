"""Small reverse-mode autodiff over 2-D float64 arrays.

Operations record themselves on the innermost active :class:`GradTape`.
Outside a tape they just compute values, which is how inference runs.

    with GradTape() as tape:
        loss = reduce_sum(sigmoid(w))
    grads = tape.backward(loss)
"""
from __future__ import annotations

import struct
import threading
from typing import BinaryIO, Callable, Sequence

import numpy as np

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tensor:
    """A 2-D float64 value that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor must be at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeError(RuntimeError):
    pass


class GradTape:
    """Records primitive applications; ``backward`` replays them in reverse."""

    def __init__(self):
        self.records: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every leaf that requires it.

        Returns a mapping ``id(leaf) -> gradient``. The tape is cleared and
        refuses a second call.
        """
        if self._consumed:
            raise TapeError("backward already called on this tape; record again")
        if loss.data.size != 1:
            raise ValueError("loss must be a scalar (1x1) tensor")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        # records are already in topological (creation) order
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._backward is None:
                    leaves[key] = p
        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[key] = leaf.grad
        if id(loss) in grads and loss._backward is None and loss.requires_grad:
            loss.grad = grads[id(loss)]
            out[id(loss)] = loss.grad
        self.records.clear()
        return out


def active_tape() -> GradTape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.records.append(out)
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[1] == b.shape[0], f"matmul: inner dims {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x cols row vector to every row of ``a``."""
    _check(bias.shape == (1, a.shape[1]), f"add_bias: bias {bias.shape} for {a.shape}")
    return _make(a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad**p
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), back)


def row_log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    s = np.exp(ls)
    return _make(ls, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; ``eps`` keeps an all-zero row at zero."""
    norm = np.sqrt((a.data**2).sum(axis=1, keepdims=True) + eps)
    y = a.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _make(y, (a,), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    _check(all(p.shape[0] == rows for p in parts), "concat_cols: row counts differ")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].shape[1]
    _check(all(p.shape[1] == cols for p in parts), "concat_rows: column counts differ")
    offs = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[offs[i] : offs[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def repeat_rows(a: Tensor, m: int) -> Tensor:
    """Stack a single-row tensor ``m`` times."""
    _check(a.shape[0] == 1, "repeat_rows expects a single row")
    return _make(np.repeat(a.data, m, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),))


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def back(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def take_elements(a: Tensor, rows, cols) -> Tensor:
    """Gather ``a[rows[i], cols[i]]`` into a column vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _make(a.data[rows, cols].reshape(-1, 1), (a,), back)


def masked_row_max(a: Tensor, exclude_cols) -> Tensor:
    """Per-row max skipping one column per row; gradient goes to the argmax."""
    exclude_cols = np.asarray(exclude_cols, dtype=np.int64)
    _check(len(exclude_cols) == a.shape[0], "masked_row_max: one excluded column per row")
    _check(a.shape[1] >= 2, "masked_row_max: need at least two columns")
    vals = a.data.copy()
    r = np.arange(a.shape[0])
    vals[r, exclude_cols] = -np.inf
    arg = vals.argmax(axis=1)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[r, arg] = g[:, 0]
        return (out,)

    return _make(vals[r, arg].reshape(-1, 1), (a,), back)


def segment_sum(values: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of a column vector into ``n_segments`` buckets."""
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n_segments, values.shape[1]))
    np.add.at(out, segments, values.data)
    return _make(out, (values,), lambda g: (g[segments],))


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_rows(a: Tensor) -> Tensor:
    n = a.shape[0]
    return _make(a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g, n, axis=0) / n,))


def reduce(a: Tensor, how: str = "sum") -> Tensor:
    if how == "sum":
        return reduce_sum(a)
    if how == "mean":
        return scale(reduce_sum(a), 1.0 / a.data.size)
    raise ValueError(f"unknown reduction {how!r}")


def spmm(s, t: Tensor) -> Tensor:
    """Constant scipy sparse matrix times tensor."""
    _check(s.shape[1] == t.shape[0], f"spmm: shape mismatch {s.shape} @ {t.shape}")
    st = s.T.tocsr()
    return _make(np.asarray(s @ t.data), (t,), lambda g: (np.asarray(st @ g),))


class SparsePattern:
    """Fixed COO sparsity structure whose values change between calls.

    Precomputes the CSR layout once so that building the matrix for a new
    value vector is a cheap permutation. Entries must be unique.
    """

    def __init__(self, rows, cols, shape: tuple[int, int]):
        import scipy.sparse as sp

        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.shape = (int(shape[0]), int(shape[1]))
        nnz = len(self.rows)
        probe = sp.csr_matrix((np.arange(1, nnz + 1, dtype=np.float64), (self.rows, self.cols)), shape=self.shape)
        if probe.nnz != nnz:
            raise ValueError("sparse pattern has duplicate entries")
        self._indices = probe.indices
        self._indptr = probe.indptr
        self._perm = probe.data.astype(np.int64) - 1
        probe_t = probe.T.tocsr()
        self._t_indices = probe_t.indices
        self._t_indptr = probe_t.indptr
        self._t_perm = probe_t.data.astype(np.int64) - 1

    @property
    def nnz(self) -> int:
        return len(self.rows)

    def matrix(self, values: np.ndarray):
        import scipy.sparse as sp

        return sp.csr_matrix((values[self._perm], self._indices, self._indptr), shape=self.shape)

    def matrix_t(self, values: np.ndarray):
        import scipy.sparse as sp

        return sp.csr_matrix((values[self._t_perm], self._t_indices, self._t_indptr),
                             shape=(self.shape[1], self.shape[0]))


def spmm_pattern(pattern: SparsePattern, values: Tensor, t: Tensor) -> Tensor:
    """Sparse matrix with differentiable ``values`` (nnz x 1) times ``t``.

    The gradient reaches both the stored values and ``t``.
    """
    _check(values.shape == (pattern.nnz, 1), "spmm: values must be nnz x 1")
    _check(pattern.shape[1] == t.shape[0], f"spmm: shape mismatch {pattern.shape} @ {t.shape}")
    vals = values.data[:, 0]
    td = t.data
    rows, cols = pattern.rows, pattern.cols

    def back(g):
        g_vals = np.einsum("ij,ij->i", g[rows], td[cols]).reshape(-1, 1) if values.requires_grad else None
        g_t = np.asarray(pattern.matrix_t(vals) @ g) if t.requires_grad else None
        return (g_vals, g_t)

    return _make(np.asarray(pattern.matrix(vals) @ td), (values, t), back)


def spmm_values(rows, cols, values: Tensor, n_rows: int, t: Tensor) -> Tensor:
    return spmm_pattern(SparsePattern(rows, cols, (n_rows, t.shape[0])), values, t)


# ----------------------------------------------------------------- optimizer


class RMSprop:
    """RMSprop with L2 weight decay folded into the gradient.

    ``state`` holds the running squared-gradient average per parameter.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, decay: float = 0.99,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        rmsprop_step(self.params, grads, self.state, self.lr, self.decay, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def rmsprop_step(params, grads, state, lr, decay=0.99, eps=1e-8, weight_decay=0.0):
    """In-place RMSprop update; ``state`` is a list of squared-gradient averages."""
    for p, g, sq in zip(params, grads, state):
        if weight_decay:
            g = g + weight_decay * p.data
        sq *= decay
        sq += (1.0 - decay) * g * g
        p.data -= lr * g / (np.sqrt(sq) + eps)
    return params, state


# ------------------------------------------------------------- serialization


def write_tensor(fh: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    fh.write(struct.pack("<QQ", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(16)
    if len(head) != 16:
        raise ValueError("truncated tensor header")
    rows, cols = struct.unpack("<QQ", head)
    raw = fh.read(8 * rows * cols)
    if len(raw) != 8 * rows * cols:
        raise ValueError("truncated tensor payload")
    return Tensor(np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64))

"""Dense tensors with reverse-mode differentiation.

Small numpy-backed engine: every operation records its parents and a
backward closure, and ``Tensor.backward()`` replays the graph once in
reverse topological order. Training runs in float32; gradient checks run
in float64 (finite differences are unusable at single precision).

No broadcasting beyond what the ops below define explicitly; shapes are
validated eagerly so failures point at the offending op.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


def set_default_dtype(name: str) -> None:
    """Set the dtype new tensors default to: "f32" or "f64"."""
    global DEFAULT_DTYPE
    table = {"f32": np.float32, "f64": np.float64}
    if name not in table:
        raise ValueError(f"unknown precision {name!r}, expected 'f32' or 'f64'")
    DEFAULT_DTYPE = table[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ("f32" or "f64")."""
    global DEFAULT_DTYPE
    saved = DEFAULT_DTYPE
    set_default_dtype(name)
    try:
        yield
    finally:
        DEFAULT_DTYPE = saved


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (forward values only)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Tensor:
    """N-dimensional array plus an optional gradient accumulator.

    ``data`` is immutable by convention once the tensor participates in a
    graph; ``grad`` is only written during a single backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        self must be a scalar. Visits each graph node exactly once.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad += 1.0
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the model code.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._prev = ()
    out._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed dtypes {dt} and {t.data.dtype}")


def _accum(t: Tensor, g: np.ndarray) -> None:
    # lazy gradient allocation: own a fresh buffer on first contribution
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _grad_buffer(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def as_tensor(data, dtype=None) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype if dtype is not None else DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (not differentiated w.r.t. c)."""
    c = float(c)  # numpy scalars would promote float32 arrays

    def backward(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.full_like(a.data, g / n))
            else:
                buf = _grad_buffer(a)
                buf += np.expand_dims(g, axis) / n

    return _make(a.data.mean(axis=axis), (a,), backward)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    def backward(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.full_like(a.data, g))
            else:
                buf = _grad_buffer(a)
                buf += np.expand_dims(g, axis)

    return _make(a.data.sum(axis=axis), (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the SwiGLU gate nonlinearity."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the leading axis: [G,n,m] @ [G,m,p] -> [G,n,p]."""
    _check_same_dtype(a, b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


# ---------------------------------------------------------------------------
# gather / scatter (the dispatch primitives)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[idx[i]]; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            np.add.at(_grad_buffer(a), idx, g)

    return _make(a.data[idx], (a,), backward)


def scatter_rows(rows: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Scatter-add row vectors into a fresh [n_rows, d] tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if rows.data.ndim != 2 or len(idx) != rows.shape[0]:
        raise ValueError("scatter_rows expects [n, d] rows and n indices")
    data = np.zeros((n_rows, rows.shape[1]), dtype=rows.data.dtype)
    np.add.at(data, idx, rows.data)

    def backward(g):
        if rows.requires_grad:
            _accum(rows, g[idx])

    return _make(data, (rows,), backward)


def scatter_rows_multi(chunks: list[tuple[Tensor, np.ndarray]], n_rows: int) -> Tensor:
    """Scatter-add several (rows, indices) chunks into one [n_rows, d] tensor.

    Row indices must be unique within each chunk (they may repeat across
    chunks); one graph node replaces a chain of scatter_rows + add.
    """
    if not chunks:
        raise ValueError("scatter_rows_multi needs at least one chunk")
    d = chunks[0][0].shape[1]
    index_arrays = [np.asarray(idx, dtype=np.intp) for _, idx in chunks]
    data = np.zeros((n_rows, d), dtype=chunks[0][0].data.dtype)
    for (rows, _), idx in zip(chunks, index_arrays):
        data[idx] += rows.data  # unique-per-chunk indices make plain fancy add safe

    def backward(g):
        for (rows, _), idx in zip(chunks, index_arrays):
            if rows.requires_grad:
                _accum(rows, g[idx])

    return _make(data, tuple(rows for rows, _ in chunks), backward)


def take_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row column gather: out[t, j] = a[t, idx[t, j]]."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])[:, None]

    def backward(g):
        if a.requires_grad:
            np.add.at(_grad_buffer(a), (rows, idx), g)

    return _make(a.data[rows, idx], (a,), backward)


def take_elements(a: Tensor, row_idx: np.ndarray, col_idx: np.ndarray) -> Tensor:
    """1-D gather out[i] = a[row_idx[i], col_idx[i]] from a 2-D tensor."""
    row_idx = np.asarray(row_idx, dtype=np.intp)
    col_idx = np.asarray(col_idx, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            np.add.at(_grad_buffer(a), (row_idx, col_idx), g)

    return _make(a.data[row_idx, col_idx], (a,), backward)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a [n, d] tensor by scalar s[i]."""
    _check_same_dtype(a, s)
    if a.data.ndim != 2 or s.data.ndim != 1 or a.shape[0] != s.shape[0]:
        raise ValueError(f"scale_rows shape mismatch {a.shape} vs {s.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s.data[:, None])
        if s.requires_grad:
            _accum(s, (g * a.data).sum(axis=1))

    return _make(a.data * s.data[:, None], (a, s), backward)


# ---------------------------------------------------------------------------
# softmax family


def softmax(logits: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax along ``axis``.

    ``mask`` (optional, boolean, True = keep) zeroes out excluded slots
    exactly; each slice must keep at least one slot. Raises on non-finite
    input.
    """
    x = logits.data
    if not np.isfinite(x).all():
        raise ValueError("non-finite logits")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            inner = (g * probs).sum(axis=axis, keepdims=True)
            _accum(logits, probs * (g - inner))

    return _make(probs, (logits,), backward)


def log_sum_exp(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)
    probs = e / s

    def backward(g):
        if logits.requires_grad:
            _accum(logits, np.expand_dims(g, axis) * probs)

    return _make(out_data, (logits,), backward)


def topk_select(scores: Tensor, k: int) -> tuple[list[int], Tensor]:
    """Indices and values of the k largest entries of a 1-D tensor.

    Values come back sorted descending; ties go to the lower index. The
    selection itself is hard: gradients flow only through the selected
    values.
    """
    if scores.data.ndim != 1:
        raise ValueError("topk_select expects a 1-D tensor")
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError("k exceeds expert count")
    # Stable argsort on the negated values keeps equal scores in index order.
    idx = np.argsort(-scores.data, kind="stable")[:k]
    return list(int(i) for i in idx), take_rows(scores, idx)


def topk_rows(scores: Tensor, k: int) -> tuple[np.ndarray, Tensor]:
    """Row-wise top-k of a [T, N] tensor: ([T,k] indices, [T,k] values)."""
    if scores.data.ndim != 2:
        raise ValueError("topk_rows expects a 2-D tensor")
    n = scores.shape[1]
    if not 1 <= k <= n:
        raise ValueError("k exceeds expert count")
    idx = np.argsort(-scores.data, axis=1, kind="stable")[:, :k]
    return idx, take_cols(scores, idx)


# ---------------------------------------------------------------------------
# neural-net ops


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under [n, V] logits."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError("cross_entropy expects [n, V] logits and n targets")
    n = logits.shape[0]
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    lse = np.squeeze(m + np.log(s), axis=1)
    nll = lse - x[np.arange(n), targets]
    probs = e / s

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), targets] -= 1.0
            _accum(logits, (g / n) * d)

    return _make(np.asarray(nll.mean(), dtype=x.dtype), (logits,), backward)


def dropout(x: Tensor, p: float, seed: int) -> Tensor:
    """Inverted-scaling dropout; identity at p=0, mask fixed by seed."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate {p} outside [0, 1)")
    if p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * keep)

    return _make(x.data * keep, (x,), backward)


def rope(x: Tensor, positions: np.ndarray, n_rot: int, base: float = 10000.0) -> Tensor:
    """Rotary position encoding on the first ``n_rot`` dims of the last axis.

    x is [G, T, D] with positions indexed along the middle axis. Pair j
    (dims 2j, 2j+1) rotates by angle p * base**(-2j / n_rot); dims past
    n_rot pass through untouched.
    """
    if n_rot % 2 != 0:
        raise ValueError("rotated span must be even")
    if x.data.ndim != 3 or n_rot > x.shape[-1]:
        raise ValueError(f"rope expects [G, T, D] with n_rot <= D, got {x.shape}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (x.shape[1],):
        raise ValueError("positions must match the middle axis")
    half = n_rot // 2
    theta = base ** (-2.0 * np.arange(half) / n_rot)
    angles = positions[:, None] * theta[None, :]
    cos = np.cos(angles).astype(x.data.dtype)[None, :, :]
    sin = np.sin(angles).astype(x.data.dtype)[None, :, :]

    def _rotate(arr, cos_t, sin_t):
        out = arr.copy()
        x1 = arr[..., 0:n_rot:2]
        x2 = arr[..., 1:n_rot:2]
        out[..., 0:n_rot:2] = x1 * cos_t - x2 * sin_t
        out[..., 1:n_rot:2] = x1 * sin_t + x2 * cos_t
        return out

    def backward(g):
        if x.requires_grad:
            # transpose of a rotation is the rotation by the negated angle
            _accum(x, _rotate(g, cos, -sin))

    return _make(_rotate(x.data, cos, sin), (x,), backward)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """Gated feed-forward: (silu(x @ w_gate) * (x @ w_up)) @ w_down.

    x may be [n, d_model] or a single [d_model] vector.
    """
    vector_in = x.data.ndim == 1
    if vector_in:
        x = reshape(x, (1, x.shape[0]))
    h = mul(silu(matmul(x, w_gate)), matmul(x, w_up))
    out = matmul(h, w_down)
    if vector_in:
        out = reshape(out, (out.shape[1],))
    return out

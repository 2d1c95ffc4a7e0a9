"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

One :class:`Tape` records one forward pass; ops append nodes in creation
order, which is already topological, so :meth:`Tape.backward` is a single
reverse sweep. A fresh tape is built per optimization iteration, keeping
memory bounded. Tensors without a tape are constants and never receive
gradients.

Default working precision is float32 with float64 accumulation inside
reductions. Ops follow the dtype of their tensor inputs, so building a
graph from float64 leaves yields float64 everywhere; finite-difference
verification uses that path.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense real array, optionally tracked on a tape."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape=None, node_id=None):
        self.values = values
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node_id}"
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, {tag})"


class GradientMap:
    """Gradients keyed by tape node; zeros for tape tensors never reached."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise ContractError("tensor does not belong to the differentiated tape")
        g = self._grads.get(t.node_id)
        if g is None:
            return np.zeros_like(t.values)
        return g


class Tape:
    """Recorder for one forward pass."""

    def __init__(self):
        self._parents = []  # node_id -> tuple[(parent_id, vjp), ...]

    def leaf(self, values, dtype=None) -> Tensor:
        values = np.asarray(values, dtype=dtype if dtype is not None else None)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(DEFAULT_DTYPE)
        return self._record(values, ())

    def _record(self, values, parents) -> Tensor:
        t = Tensor(values, self, len(self._parents))
        self._parents.append(tuple(parents))
        return t

    def backward(self, loss: Tensor) -> GradientMap:
        """Accumulate gradients of a scalar loss for every tape node."""
        if loss.tape is not self:
            raise ContractError("loss tensor is not on this tape")
        if loss.values.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.values.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.values)
        }
        for node_id in range(loss.node_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            for parent_id, vjp in self._parents[node_id]:
                contrib = vjp(g)
                prev = grads.get(parent_id)
                grads[parent_id] = contrib if prev is None else prev + contrib
        return GradientMap(self, grads)


def constant(values, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("inputs come from two different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(g.dtype, copy=False)


def _make(values, inputs_and_vjps) -> Tensor:
    """Build the output tensor, recording vjps for tape-tracked inputs."""
    tape = _tape_of(*[t for t, _ in inputs_and_vjps])
    if tape is None:
        return Tensor(values)
    parents = [(t.node_id, vjp) for t, vjp in inputs_and_vjps if t.tape is not None]
    return tape._record(values, parents)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    try:
        out = a.values + b.values
    except ValueError:
        raise ContractError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    try:
        out = a.values - b.values
    except ValueError:
        raise ContractError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    try:
        out = a.values * b.values
    except ValueError:
        raise ContractError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    av, bv = a.values, b.values
    return _make(out, [
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ])


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.values / b.values
    av, bv = a.values, b.values
    return _make(out, [
        (a, lambda g: _unbroadcast(g / bv, a.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), b.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, [(a, lambda g: -g)])


def square(a: Tensor) -> Tensor:
    av = a.values
    return _make(av * av, [(a, lambda g: g * (2 * av))])


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return _make(out, [(a, lambda g: g * (0.5 / out))])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _make(out, [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    av = a.values
    return _make(np.log(av), [(a, lambda g: g / av)])


def abs_(a: Tensor) -> Tensor:
    av = a.values
    return _make(np.abs(av), [(a, lambda g: g * np.sign(av))])


def relu(a: Tensor) -> Tensor:
    av = a.values
    mask = av > 0
    return _make(np.where(mask, av, 0), [(a, lambda g: g * mask)])


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner)

    return _make(out.astype(x.dtype, copy=False), [(a, vjp)])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]. Gradient is 1 inside and at the boundary, 0 outside."""
    av = a.values
    mask = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), [(a, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, result cast back to the input dtype)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.values, axis=axis, dtype=np.float64, keepdims=keepdims)
    out = np.asarray(out).astype(a.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).astype(a.dtype, copy=False)

    return _make(out, [(a, vjp)])


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.mean(a.values, axis=axis, dtype=np.float64, keepdims=keepdims)
    out = np.asarray(out).astype(a.dtype)
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False)

    return _make(out, [(a, vjp)])


def max_reduce(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.max(a.values, axis=axis, keepdims=keepdims)
    out_b = np.max(a.values, axis=axis, keepdims=True)
    mask = a.values == out_b
    counts = mask.sum(axis=axis, keepdims=True)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * (g / counts)).astype(a.dtype, copy=False)

    return _make(np.asarray(out), [(a, vjp)])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ContractError(
            f"matmul: shapes {a.shape} and {b.shape} are not compatible"
        )
    av, bv = a.values, b.values

    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        return _unbroadcast(ga, a.shape)

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(gb, b.shape)

    return _make(out, [(a, vjp_a), (b, vjp_b)])


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Strided 1-D convolution: x (T, Cin), w (K, Cin, Cout) -> (To, Cout)."""
    xv, wv = x.values, w.values
    if xv.ndim != 2 or wv.ndim != 3 or xv.shape[1] != wv.shape[1]:
        raise ContractError(
            f"conv1d: incompatible shapes x{xv.shape} w{wv.shape}"
        )
    T, Cin = xv.shape
    K, _, Cout = wv.shape
    if T < K:
        raise ContractError(f"conv1d: input length {T} shorter than kernel {K}")
    To = (T - K) // stride + 1
    s0, s1 = xv.strides
    windows = np.lib.stride_tricks.as_strided(
        xv, shape=(To, K, Cin), strides=(s0 * stride, s0, s1)
    )
    cols = windows.reshape(To, K * Cin)
    out = cols @ wv.reshape(K * Cin, Cout)

    def vjp_x(g):
        gx = np.zeros_like(xv)
        for k in range(K):
            gx[k:k + stride * To:stride] += g @ wv[k].T
        return gx

    def vjp_w(g):
        gw = np.empty_like(wv)
        for k in range(K):
            gw[k] = windows[:, k, :].T @ g
        return gw

    return _make(out, [(x, vjp_x), (w, vjp_w)])


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    av = a.values
    shifted = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot)).astype(av.dtype, copy=False)

    return _make(out.astype(av.dtype, copy=False), [(a, vjp)])


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    av = a.values
    shifted = av - np.max(av, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * np.sum(g, axis=axis, keepdims=True)).astype(
            av.dtype, copy=False
        )

    return _make(out.astype(av.dtype, copy=False), [(a, vjp)])


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.values.reshape(shape), [(a, lambda g: g.reshape(old))])


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.values, ax1, ax2)
    return _make(np.ascontiguousarray(out), [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def slice_(a: Tensor, key) -> Tensor:
    out = a.values[key]

    def vjp(g):
        gx = np.zeros_like(a.values)
        gx[key] = g
        return gx

    return _make(np.ascontiguousarray(out), [(a, vjp)])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    entries = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return np.ascontiguousarray(g[tuple(sl)])

        entries.append((t, vjp))
    return _make(out, entries)


def gather(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0, e.g. embedding lookup. indices may be N-D."""
    idx = np.asarray(indices)
    out = a.values[idx]

    def vjp(g):
        gx = np.zeros_like(a.values)
        np.add.at(gx, idx, g)
        return gx

    return _make(out, [(a, vjp)])


def stop_gradient(a: Tensor) -> Tensor:
    """Detach: same values, treated as a constant by backward."""
    return Tensor(a.values)


def linear_operator(a: Tensor, fwd, adj) -> Tensor:
    """Apply a fixed linear map y = F(x) with a caller-supplied adjoint.

    `adj` must be the true adjoint of `fwd` (⟨F x, y⟩ == ⟨x, adj(y)⟩);
    the engine trusts the pair, so verify it with a dot-product test.
    """
    return _make(fwd(a.values), [(a, lambda g: adj(g))])


# ---------------------------------------------------------------------------
# signal framing (the building blocks of the differentiable STFT)


def reflect_pad(a: Tensor, pad) -> Tensor:
    """Reflect-pad a 1-D tensor; pad is an int or a (left, right) pair."""
    av = a.values
    if av.ndim != 1:
        raise ContractError(f"reflect_pad expects 1-D input, got shape {av.shape}")
    lo, hi = (pad, pad) if isinstance(pad, int) else pad
    if max(lo, hi) >= av.shape[0]:
        raise ContractError(
            f"reflect_pad: pad ({lo}, {hi}) too large for length {av.shape[0]}"
        )
    idx = np.pad(np.arange(av.shape[0]), (lo, hi), mode="reflect")
    out = av[idx]

    def vjp(g):
        gx = np.zeros_like(av)
        np.add.at(gx, idx, g)
        return gx

    return _make(out, [(a, vjp)])


def frame(a: Tensor, win: int, hop: int) -> Tensor:
    """Slice a 1-D tensor into overlapping frames of shape (n_frames, win)."""
    av = a.values
    if av.ndim != 1 or av.shape[0] < win:
        raise ContractError(f"frame: need 1-D input of length >= {win}")
    n = 1 + (av.shape[0] - win) // hop
    s0 = av.strides[0]
    out = np.lib.stride_tricks.as_strided(av, (n, win), (s0 * hop, s0)).copy()

    def vjp(g):
        gx = np.zeros_like(av)
        for k in range(win):
            gx[k:k + hop * n:hop] += g[:, k]
        return gx

    return _make(out, [(a, vjp)])


def overlap_add(frames_t: Tensor, hop: int, length: int) -> Tensor:
    """Sum frames (n, win) back into a signal of exactly `length` samples."""
    fv = frames_t.values
    n, win = fv.shape
    if length != (n - 1) * hop + win:
        raise ContractError(
            f"overlap_add: length {length} != (n-1)*hop+win = {(n - 1) * hop + win}"
        )
    out = np.zeros(length, dtype=fv.dtype)
    for k in range(win):
        out[k:k + hop * n:hop] += fv[:, k]

    def vjp(g):
        gf = np.empty_like(fv)
        for k in range(win):
            gf[:, k] = g[k:k + hop * n:hop]
        return gf

    return _make(out, [(frames_t, vjp)])


# ---------------------------------------------------------------------------
# the attack update step


def sgd_step(values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One plain gradient-descent step; projection is the caller's business."""
    values = np.asarray(values)
    grad = np.asarray(grad)
    if values.shape != grad.shape:
        raise ContractError(
            f"sgd_step: value shape {values.shape} != grad shape {grad.shape}"
        )
    return (values - lr * grad).astype(values.dtype, copy=False)

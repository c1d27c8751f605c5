"""Dense tensor engine with reverse-mode gradient accumulation.

Tensors wrap float32/float64 numpy arrays. Operations executed while a
Tape is active record backward closures; Tape.backward walks the record
in reverse creation order (a valid reverse-topological order, since every
input exists before its consumer) and accumulates gradients additively.

Integer ids and boolean masks are passed around as plain numpy arrays,
never as Tensors: only real-valued data participates in the tape.

Broadcasting is restricted to bias-style trailing alignment (e.g. adding
a (d,) bias to a (B,T,d) activation). Everything else must be explicit;
``row_scale`` covers the one per-row scaling pattern the models need.
"""

from __future__ import annotations

import threading

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # light operator sugar; the free functions are the primary API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Single-owner record of one forward pass.

    ``record_stops``/``replay_stops`` support the finite-difference
    harness: a recording pass captures every stop_gradient output, and a
    replay pass pins those values so the perturbed loss is the exact
    function whose gradient backpropagation computes.
    """

    def __init__(self, grad_enabled=True):
        self.nodes: list[Tensor] = []
        self.grad_enabled = grad_enabled
        self.record_stops: list[np.ndarray] | None = None
        self.replay_stops: list[np.ndarray] | None = None
        self._stop_cursor = 0

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss._ensure_grad()
        loss.grad += np.ones((), dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            # reset intermediate grads so a repeated backward re-walks cleanly;
            # leaves live outside the tape and keep accumulating
            node.grad = None


_tls = threading.local()


def _push_tape(tape: Tape):
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    stack.append(tape)


def _pop_tape(tape: Tape):
    stack = _tls.stack
    assert stack and stack[-1] is tape, "tape exit out of order"
    stack.pop()


def _active_tape() -> Tape | None:
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor):
    """Run backward on the active tape."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    tape.backward(loss)


def _make(data, parents, backward_fn) -> Tensor:
    """Create an op output, registering it on the active tape if tracking."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and tape.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_suffix_broadcast(a_shape, b_shape):
    """Allow equal shapes or trailing-suffix bias-style broadcast."""
    small, big = sorted((a_shape, b_shape), key=len)
    if big[len(big) - len(small):] != small:
        raise ShapeError(f"incompatible shapes {a_shape} and {b_shape}")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over the leading axes introduced by suffix broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_suffix_broadcast(a.data.shape, b.data.shape)
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_suffix_broadcast(a.data.shape, b.data.shape)
    data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad -= _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_suffix_broadcast(a.data.shape, b.data.shape)
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * c

    return _make(data, (a,), backward_fn)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale each trailing-axis row of x by a scalar: out[...,:] = x[...,:] * s[...]."""
    if s.data.shape != x.data.shape[:-1]:
        raise ShapeError(f"row_scale needs s shaped {x.data.shape[:-1]}, got {s.data.shape}")
    data = x.data * s.data[..., None]

    def backward_fn(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g * s.data[..., None]
        if s.requires_grad:
            s._ensure_grad()
            s.grad += (g * x.data).sum(axis=-1)

    return _make(data, (x, s), backward_fn)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g / a.data

    return _make(data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * data

    return _make(data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * (a.data > 0)

    return _make(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.grad += _unbroadcast(ga, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.grad += _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), backward_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += np.transpose(g, inverse)

    return _make(data, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g.reshape(a.data.shape)

    return _make(data, (a,), backward_fn)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._ensure_grad()
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return _make(data, tuple(tensors), backward_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for shape {a.data.shape} axis {axis}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad[idx] += g

    return _make(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            if axis is None:
                a.grad += g
            else:
                a.grad += np.expand_dims(g, axis)

    return _make(data, (a,), backward_fn)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            if axis is None:
                a.grad += g / n
            else:
                a.grad += np.expand_dims(g, axis) / n

    return _make(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.grad += (g - dot) * data

    return _make(data, (a,), backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g - np.exp(data) * g.sum(axis=axis, keepdims=True)

    return _make(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# indexing


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a (V, d) table by an integer id array."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.data.shape[0]):
        raise ShapeError(f"ids out of range for table with {table.data.shape[0]} rows")
    data = table.data[ids]

    def backward_fn(g):
        if table.requires_grad:
            table._ensure_grad()
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return _make(data, (table,), backward_fn)


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per trailing-axis row: out[...] = a[..., idx[...]]."""
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"take_along_last needs idx shaped {a.data.shape[:-1]}, got {idx.shape}")
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
            a.grad += full

    return _make(data, (a,), backward_fn)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True; mask may broadcast over a."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += np.where(mask, 0.0, g)

    return _make(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine must be shaped ({d},), got {gamma.data.shape} and {beta.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gamma.data * xhat + beta.data

    def backward_fn(g):
        if gamma.requires_grad:
            gamma._ensure_grad()
            gamma.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            beta._ensure_grad()
            beta.grad += g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            x._ensure_grad()
            gx = g * gamma.data
            x.grad += inv_std * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )

    return _make(data, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# gradient routing


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity; contributes exactly zero gradient to its input.

    Under a recording tape the forward value is captured; under a replay
    tape the captured value is substituted, so finite differencing of a
    replayed loss treats every stopped path as the constant it is.
    """
    tape = _active_tape()
    data = a.data
    if tape is not None:
        if tape.replay_stops is not None:
            data = tape.replay_stops[tape._stop_cursor]
            tape._stop_cursor += 1
        elif tape.record_stops is not None:
            tape.record_stops.append(data.copy())
    return Tensor(data)


def grad_reverse(a: Tensor) -> Tensor:
    """Forward identity; backward flips the gradient's sign."""

    def backward_fn(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad -= g

    return _make(a.data, (a,), backward_fn)


def grad_half_reverse(a: Tensor) -> Tensor:
    """Forward identity; backward flips the sign on the second half of the last axis."""
    d = a.data.shape[-1]
    half = d // 2
    first = narrow(a, a.data.ndim - 1, 0, half)
    second = grad_reverse(narrow(a, a.data.ndim - 1, half, d - half))
    return concat([first, second], axis=a.data.ndim - 1)


# ---------------------------------------------------------------------------
# verification helper


def finite_difference(f, params, h: float = 1e-5):
    """Central-difference gradients of a replayable scalar loss.

    ``f`` builds the loss under the active tape. A first recording pass
    captures stop_gradient values and the analytic gradients; the
    perturbed passes replay those values. Returns (analytic, numeric)
    gradient maps keyed like ``params``.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        tape.record_stops = []
        loss = f()
        tape.backward(loss)
    pins = tape.record_stops
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    def eval_loss():
        t = Tape(grad_enabled=False)
        t.replay_stops = pins
        with t:
            return f().item()

    numeric = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            num[i] = (up - down) / (2.0 * h)
        numeric[name] = num.reshape(p.data.shape)
    return analytic, numeric


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Max |a-n| / max(|a|, |n|, floor); the floor keeps near-zero grads honest."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))

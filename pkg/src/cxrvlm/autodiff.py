"""Dense float32 tensors with reverse-mode automatic differentiation.

Small by design: exactly the operations the patch encoder, the MLP
adapter, and the decoder-only language model need. Every differentiable
op records a backward closure; `backward()` walks the graph once in
reverse topological order. Gradient buffers are allocated only for
tensors that require gradients, so frozen parameters never carry grads.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

# Fault-injection hooks for the self-check harness. Adding a known name
# deliberately corrupts one backward rule so the gradient checker must
# flag it. Never set outside tests / `selfcheck --inject-fault`.
FAULT_HOOKS: set[str] = set()

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs."""


class GraphError(RuntimeError):
    """Backward called on an invalid target or an already-consumed graph."""


class EmptyLossError(ValueError):
    """A loss was requested over zero masked positions."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / generation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Row-major dense array with an optional gradient buffer.

    `data` is float32 by default; the dtype escape hatch exists only so
    the gradient checker can run both routes in float64.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all graph logic lives in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Only valid on a scalar (single-element) loss. A second call on
        the same loss without rebuilding the graph is an error.
        """
        if self.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._done:
            raise GraphError("backward already ran on this graph; rebuild the loss first")
        self._done = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> tuple[Tensor, bool]:
    """Wrap an op output; returns (tensor, recorded). Checks finiteness."""
    if not np.isfinite(data).all():
        raise NonFiniteError("forward op produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if record:
        out.requires_grad = True
        out._parents = tuple(parents)
    return out, record


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def constant(data, dtype=None) -> Tensor:
    """A value tensor that never tracks gradients (masks, inputs)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; `b` may be same-shape, a trailing-axis vector, or scalar."""
    b = _as_tensor(b, a)
    if b.data.ndim > a.data.ndim:
        a, b = b, a
    if not (b.data.shape == a.data.shape
            or b.data.ndim == 0
            or (b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0])):
        raise DimensionError(f"add shapes {a.shape} and {b.shape} do not broadcast")
    out, record = _result(a.data + b.data, (a, b))
    if record:
        def bw(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                if b.data.shape == g.shape:
                    _accumulate(b, g)
                else:
                    axes = tuple(range(g.ndim - b.data.ndim))
                    _accumulate(b, g.sum(axis=axes).reshape(b.data.shape))
        out._backward = bw
    return out


def neg(a: Tensor) -> Tensor:
    out, record = _result(-a.data, (a,))
    if record:
        out._backward = lambda g: _accumulate(a, -g)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be same-shape or a python scalar."""
    b = _as_tensor(b, a)
    if b.data.ndim != 0 and b.data.shape != a.data.shape:
        raise DimensionError(f"mul shapes {a.shape} and {b.shape} do not match")
    out, record = _result(a.data * b.data, (a, b))
    if record:
        def bw(g):
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                gb = g * a.data
                _accumulate(b, gb.sum() if b.data.ndim == 0 else gb)
        out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out, record = _result(a.data @ b.data, (a, b))
    if record:
        def bw(g):
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        out._backward = bw
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    out, record = _result(a.data.T.copy(), (a,))
    if record:
        out._backward = lambda g: _accumulate(a, g.T)
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x), Phi the standard normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0, dtype=x.dtype)))
    out, record = _result((x * cdf).astype(x.dtype), (a,))
    if record:
        def bw(g):
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            local = cdf + x * pdf
            if "double_gelu_backward" in FAULT_HOOKS:
                local = 2.0 * local
            _accumulate(a, (g * local).astype(x.dtype))
        out._backward = bw
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out, record = _result((xhat * gain.data + bias.data).astype(x.dtype), (a, gain, bias))
    if record:
        def bw(g):
            if bias.requires_grad:
                _accumulate(bias, g.reshape(-1, d).sum(axis=0))
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if a.requires_grad:
                gy = g * gain.data
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                _accumulate(a, ((gy - m1 - xhat * m2) * inv).astype(x.dtype))
        out._backward = bw
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out, record = _result(p.astype(x.dtype), (a,))
    if record:
        def bw(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(a, (p * (g - dot)).astype(x.dtype))
        out._backward = bw
    return out


def softmax_cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean of -log softmax(logits)[target] over masked positions.

    `logits` is [T, V]; `targets` integer ids of length T; `loss_mask`
    booleans of length T with at least one bit set.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"expected [T, V] logits, got {logits.shape}")
    t, v = logits.shape
    ids = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(loss_mask, dtype=bool).reshape(-1)
    if ids.shape[0] != t or mask.shape[0] != t:
        raise DimensionError(
            f"targets/mask lengths {ids.shape[0]}/{mask.shape[0]} do not match T={t}")
    if not mask.any():
        raise EmptyLossError("loss mask selects no positions")
    checked = ids[mask]
    if checked.size and (checked.min() < 0 or checked.max() >= v):
        raise IndexError(f"target id out of range for vocab size {v}")

    x = logits.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = int(mask.sum())
    safe_ids = np.where(mask, ids, 0)
    picked = logp[np.arange(t), safe_ids]
    loss_val = -(picked * mask).sum() / n
    out, record = _result(np.asarray(loss_val, dtype=x.dtype), (logits,))
    if record:
        def bw(g):
            probs = np.exp(logp)
            probs[np.arange(t), safe_ids] -= 1.0
            probs *= (mask / n)[:, None]
            _accumulate(logits, (float(g) * probs).astype(x.dtype))
        out._backward = bw
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer id."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")
    out, record = _result(table.data[idx].copy(), (table,))
    if record:
        def bw(g):
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            _accumulate(table, acc)
        out._backward = bw
    return out


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    if axis not in (0, 1):
        raise DimensionError("concat supports axis 0 or 1")
    out, record = _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    if record:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
                    _accumulate(p, piece)
        out._backward = bw
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out, record = _result(a.data[start:stop].copy(), (a,))
    if record:
        def bw(g):
            acc = np.zeros_like(a.data)
            acc[start:stop] = g
            _accumulate(a, acc)
        out._backward = bw
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-D tensor, got {a.shape}")
    out, record = _result(a.data[:, start:stop].copy(), (a,))
    if record:
        def bw(g):
            acc = np.zeros_like(a.data)
            acc[:, start:stop] = g
            _accumulate(a, acc)
        out._backward = bw
    return out


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out, record = _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,))
    if record:
        out._backward = lambda g: _accumulate(a, np.full_like(a.data, float(g)))
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Both routes run in float64 so the check measures the backward rule,
    not float32 roundoff. `f` must be scalar-valued and re-runnable.
    """
    if not (0.0 < h < 1e-1):
        raise ValueError(f"step h={h} outside (0, 1e-1)")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
    y = f(x64)
    if not isinstance(y, Tensor) or y.size != 1:
        raise GraphError("grad_check requires a scalar-valued function")
    y.backward()
    analytic = x64.grad.copy() if x64.grad is not None else np.zeros_like(x64.data)

    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(x64).item()
            flat[i] = orig - h
            lo = f(x64).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-8
    return float(np.max(np.abs(analytic - numeric) / denom))

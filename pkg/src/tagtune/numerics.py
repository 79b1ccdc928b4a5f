"""Minimal reverse-mode autodiff over numpy arrays, plus AdamW and the cosine schedule.

The op set is fixed: exactly what a small decoder-only transformer with tag
embeddings and linear heads needs. No general broadcasting. Training runs in
float32; gradient-check tests build float64 graphs by constructing leaf
tensors with dtype=np.float64 (ops inherit the dtype of their inputs).
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32


class NumericsError(RuntimeError):
    """Non-finite values, dtype mixing, or misuse of the autodiff graph."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


def make_rng(seed: int) -> np.random.Generator:
    """Single 64-bit seeded generator; every stochastic op takes one explicitly."""
    return np.random.default_rng(np.uint64(seed))


class Tensor:
    """Dense row-major real array with optional gradient buffer.

    data: np.float32 (or np.float64 in check mode); grad: same-shape array,
    populated by backward() only for requires_grad tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, s: float) -> "Tensor":
        return scale(self, s)

    __rmul__ = __mul__

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise NumericsError(f"mixed dtypes in op: {sorted(str(d) for d in dtypes)}")


def assert_finite(x, what: str) -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


# -----------------------------------------------------------------------------
# Ops
# -----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2D matrix product. a (n,k) @ b (k,m) -> (n,m)."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _from_op(out_data, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also a (n,d) + b (d,) for bias rows."""
    _check_same_dtype(a, b)
    bias_case = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    if not bias_case and a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes {a.data.shape} + {b.data.shape}")
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0) if bias_case else g)

    return _from_op(out_data, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    s = float(s)
    out_data = a.data * a.data.dtype.type(s)

    def backward_fn(g):
        _accumulate(a, g * s)

    return _from_op(out_data, (a,), backward_fn)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all elements -> scalar (shape ())."""
    out_data = a.data.sum()

    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, g))

    return _from_op(np.asarray(out_data), (a,), backward_fn)


def reduce_mean(a: Tensor) -> Tensor:
    """Mean of all elements -> scalar (shape ())."""
    n = a.data.size
    out_data = a.data.mean()

    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, g / n))

    return _from_op(np.asarray(out_data), (a,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Pointwise GELU, tanh approximation: 0.5*x*(1+tanh(c*(x+0.044715*x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * (x2 * xd)))
    out_data = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _from_op(out_data, (x,), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along axis; rows along axis sum to 1."""
    if not (-x.data.ndim <= axis < x.data.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _from_op(out_data, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize rows of x (n,d) to zero mean / unit variance, then scale and shift."""
    _check_same_dtype(x, gain, bias)
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise ShapeError(f"layer_norm shapes x={x.data.shape} gain={gain.data.shape} bias={bias.data.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, (dxhat - m1 - xhat * m2) * inv)

    return _from_op(out_data, (x, gain, bias), backward_fn)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup: table (R,d), ids (n,) ints -> (n,d). Gradient scatter-adds to the table."""
    idx = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows table must be 2D, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"gather_rows ids out of range [0,{table.data.shape[0]})")
    out_data = table.data[idx]

    def backward_fn(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _from_op(out_data, (table,), backward_fn)


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate along the sequence (row) axis."""
    if not parts:
        raise ShapeError("concat_rows on empty list")
    _check_same_dtype(*parts)
    widths = {p.data.shape[1] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError(f"concat_rows needs 2D parts of equal width, got {[p.data.shape for p in parts]}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return _from_op(out_data, tuple(parts), backward_fn)


_CAUSAL_MASKS: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).name)
    mask = _CAUSAL_MASKS.get(key)
    if mask is None:
        mask = np.triu(np.full((n, n), -np.inf, dtype=dtype), k=1)
        _CAUSAL_MASKS[key] = mask
    return mask


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with the autoregressive mask.

    q, k, v (n,d); d divisible by n_heads; output (n,d). Position i attends
    to positions j <= i only. Head stacking uses batched matmul, (h,n,hd).
    """
    _check_same_dtype(q, k, v)
    n, d = q.data.shape
    if k.data.shape != (n, d) or v.data.shape != (n, d):
        raise ShapeError(f"attention shapes q={q.data.shape} k={k.data.shape} v={v.data.shape}")
    if d % n_heads != 0:
        raise ShapeError(f"d={d} not divisible by n_heads={n_heads}")
    hd = d // n_heads
    inv_scale = 1.0 / math.sqrt(hd)
    q_h = np.ascontiguousarray(q.data.reshape(n, n_heads, hd).transpose(1, 0, 2))
    k_h = np.ascontiguousarray(k.data.reshape(n, n_heads, hd).transpose(1, 0, 2))
    v_h = np.ascontiguousarray(v.data.reshape(n, n_heads, hd).transpose(1, 0, 2))
    scores = (q_h @ k_h.transpose(0, 2, 1)) * q.data.dtype.type(inv_scale)
    scores += _causal_mask(n, scores.dtype)
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    w /= w.sum(axis=2, keepdims=True)
    out_data = (w @ v_h).transpose(1, 0, 2).reshape(n, d)

    def backward_fn(g):
        g_h = np.ascontiguousarray(g.reshape(n, n_heads, hd).transpose(1, 0, 2))
        gw = g_h @ v_h.transpose(0, 2, 1)
        gs = w * (gw - (w * gw).sum(axis=2, keepdims=True))
        if q.requires_grad:
            _accumulate(q, ((gs @ k_h) * inv_scale).transpose(1, 0, 2).reshape(n, d))
        if k.requires_grad:
            _accumulate(k, ((gs.transpose(0, 2, 1) @ q_h) * inv_scale).transpose(1, 0, 2).reshape(n, d))
        if v.requires_grad:
            _accumulate(v, (w.transpose(0, 2, 1) @ g_h).transpose(1, 0, 2).reshape(n, d))

    return _from_op(out_data, (q, k, v), backward_fn)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Masked mean of -log softmax(logits)[target].

    logits (n,V); targets (n,) int ids in [0,V); mask (n,) nonnegative
    position weights. Errors on an all-zero mask (undefined mean).
    """
    tgt = np.asarray(targets, dtype=np.intp)
    m = np.asarray(mask, dtype=logits.data.dtype)
    n, vocab = logits.data.shape
    if tgt.shape != (n,) or m.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.data.shape}, targets {tgt.shape}, mask {m.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise ShapeError(f"cross_entropy targets out of [0,{vocab})")
    msum = m.sum()
    if msum <= 0:
        raise NumericsError("cross_entropy: all-zero mask, mean undefined")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    nll = -logp[np.arange(n), tgt]
    out_data = np.asarray((nll * m).sum() / msum)

    def backward_fn(g):
        probs = np.exp(logp)
        dl = probs
        dl[np.arange(n), tgt] -= 1.0
        dl *= (m / msum)[:, np.newaxis]
        _accumulate(logits, dl * g)

    return _from_op(out_data, (logits,), backward_fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    _check_same_dtype(pred, target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse shapes {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    out_data = np.asarray((diff**2).mean())

    def backward_fn(g):
        if pred.requires_grad:
            _accumulate(pred, (2.0 / n) * diff * g)
        if target.requires_grad:
            _accumulate(target, (-2.0 / n) * diff * g)

    return _from_op(out_data, (pred, target), backward_fn)


# -----------------------------------------------------------------------------
# Backward pass
# -----------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate grads of all requires_grad tensors reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward on non-scalar loss of shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# -----------------------------------------------------------------------------
# Optimizer and schedule
# -----------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float, grad_scale: float = 1.0, allow_missing: bool = False) -> None:
        """One update at the given scheduled learning rate. grad_scale divides
        accumulated gradients (1/accum_count when accumulating). With
        allow_missing, params whose grad is None are skipped this step
        (multi-task training where a head's task was not sampled)."""
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing and not allow_missing:
            raise NumericsError(f"adamw step with missing grads: {missing}")
        self.step_count += 1
        t = self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale if grad_scale != 1.0 else p.grad
            m = self.m[k]
            v = self.v[k]
            m[:] = self.beta1 * m + (1.0 - self.beta1) * g
            v[:] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay != 0.0:
                update = update + self.weight_decay * p.data
            p.data -= p.data.dtype.type(lr) * update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(step: int, total_steps: int, warmup_fraction: float, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not (0 <= step <= total_steps):
        raise ValueError(f"cosine_lr: step {step} outside [0,{total_steps}]")
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1e-12)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

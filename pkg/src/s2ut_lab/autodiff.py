"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Tensors record the operation that produced them together with a backward
closure; a module-level counter assigns each tensor an insertion index, and
`backward` replays the closures in reverse insertion order. Leaf gradients
accumulate (+=) across calls until explicitly cleared, matching the usual
training-loop contract.

Only the primitives the sequence model and its losses need are provided.
All ops accept leading batch dimensions; reductions and normalizations act
on the last axis unless stated otherwise.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array participating in the reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create a graph node; `backward_fn(g)` must += contributions into parent grads."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad tensor from a scalar loss.

    Repeated calls without clearing grads accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: list[Tensor] = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    for t in nodes:
        # leaf grads persist across calls (accumulation contract);
        # interior grads are per-call scratch and must restart at zero.
        if t._backward is not None or t.grad is None:
            t.grad = np.zeros_like(t.data)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    loss.grad += np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None:
            t._backward(t.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return make_node(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        c = float(b)

        def bwd_scalar(g):
            if a.requires_grad:
                a.grad += g * c

        return make_node(a.data * c, (a,), bwd_scalar)

    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return make_node(data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x.grad += g * mask

    return make_node(data, (x,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Smooth gaussian-error activation (tanh form); kink-free, so composite
    losses stay finite-difference checkable at tight tolerances."""
    xd = x.data
    x2 = xd * xd
    inner = x2 * (_GELU_A * _GELU_C)
    inner += _GELU_C
    inner *= xd
    th = np.tanh(inner)
    half_x = 0.5 * xd
    data = half_x * th
    data += half_x

    def bwd(g):
        if x.requires_grad:
            d_inner = x2 * (3 * _GELU_A * _GELU_C)
            d_inner += _GELU_C
            d_inner *= 1.0 - th * th
            d_inner *= half_x
            d_inner += 0.5 * th
            d_inner += 0.5
            d_inner *= g
            x.grad += d_inner

    return make_node(data, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x.grad += g.reshape(old)

    return make_node(data, (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def bwd(g):
        if x.requires_grad:
            x.grad += g.transpose(inv)

    return make_node(data, (x,), bwd)


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.data.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(xs, pieces):
            if t.requires_grad:
                t.grad += piece

    return make_node(data, tuple(xs), bwd)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def bwd(g):
        if x.requires_grad:
            x.grad += np.broadcast_to(g, x.data.shape)

    return make_node(data, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)

    return make_node(data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + bias, the common projection path."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"affine dimension mismatch: {x.shape} @ {w.shape}")
    data = x.data @ w.data
    if b is not None:
        data += b.data

    def bwd(g):
        if x.requires_grad:
            x.grad += g @ w.data.T
        if w.requires_grad:
            gw = x.data.reshape(-1, x.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            w.grad += gw
        if b is not None and b.requires_grad:
            b.grad += g.reshape(-1, g.shape[-1]).sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(data, parents, bwd)


def multi_head_attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int,
                              mask: np.ndarray | None, scale: float) -> Tensor:
    """Fused scaled-dot-product attention over projected (B, T, d) tensors.

    Splits heads, applies the additive mask, softmax-normalizes scores and
    merges head contexts in one graph node; the mask is a constant.
    """
    b, t, d = q.data.shape
    s = k.data.shape[1]
    hd = d // heads

    def split(x, length):
        return x.reshape(b, length, heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data, t), split(k.data, s), split(v.data, s)
    scores = qh @ kh.swapaxes(-1, -2)
    scores *= scale
    if mask is not None:
        scores += mask
    scores -= scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    ctx = att @ vh
    data = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)

    def bwd(g):
        gh = g.reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
        if v.requires_grad:
            v.grad += (att.swapaxes(-1, -2) @ gh).transpose(0, 2, 1, 3).reshape(b, s, d)
        datt = gh @ vh.swapaxes(-1, -2)
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dscores *= scale
        if q.requires_grad:
            q.grad += (dscores @ kh).transpose(0, 2, 1, 3).reshape(b, t, d)
        if k.requires_grad:
            k.grad += (dscores.swapaxes(-1, -2) @ qh).transpose(0, 2, 1, 3).reshape(b, s, d)

    return make_node(data, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# normalization / probability
# ---------------------------------------------------------------------------


def softmax_row(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            x.grad += data * (g - dot)

    return make_node(data, (x,), bwd)


def log_softmax_row(x: Tensor) -> Tensor:
    """Fused log-softmax: x - max - log-sum-exp over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def bwd(g):
        if x.requires_grad:
            x.grad += g - probs * g.sum(axis=-1, keepdims=True)

    return make_node(data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data
    d = x.data.shape[-1]

    def bwd(g):
        gx = g * gain.data
        if x.requires_grad:
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.grad += inv * (gx - m1 - xhat * m2)
        if gain.requires_grad:
            gain.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            bias.grad += g.reshape(-1, d).sum(axis=0)

    return make_node(data, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# lookup / loss primitives
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IndexError(f"embedding id out of range [0, {vocab}) at position {pos}")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return make_node(data, (table,), bwd)


def nll_from_logprobs(logp: Tensor, targets, mask) -> Tensor:
    """Mean of -logp[..., target] over mask-true positions; 0 if all masked."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != mask.shape or targets.shape != logp.data.shape[:-1]:
        raise ValueError(
            f"nll shapes disagree: logp {logp.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    vocab = logp.data.shape[-1]
    safe = np.where(mask, targets, 0)
    if mask.any() and ((targets[mask] < 0) | (targets[mask] >= vocab)).any():
        raise IndexError(f"nll target out of range [0, {vocab})")
    n = int(mask.sum())
    if n == 0:
        return make_node(np.asarray(0.0), (logp,), lambda g: None)
    picked = np.take_along_axis(logp.data, safe[..., None], axis=-1)[..., 0]
    data = np.asarray(-np.where(mask, picked, 0.0).sum() / n)

    def bwd(g):
        if logp.requires_grad:
            contrib = np.zeros_like(logp.data)
            np.put_along_axis(contrib, safe[..., None], (-float(g) / n) * mask[..., None], axis=-1)
            logp.grad += contrib

    return make_node(data, (logp,), bwd)


def cross_entropy_from_logits(logits: Tensor, targets, mask) -> Tensor:
    """Fused log-softmax + masked-mean NLL over the last axis.

    Equivalent to nll_from_logprobs(log_softmax_row(logits), ...) but with a
    single stored intermediate, for the wide output-vocabulary scorings.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != mask.shape or targets.shape != logits.data.shape[:-1]:
        raise ValueError(
            f"cross entropy shapes disagree: logits {logits.shape}, targets {targets.shape}"
        )
    vocab = logits.data.shape[-1]
    safe = np.where(mask, targets, 0)
    if mask.any() and ((targets[mask] < 0) | (targets[mask] >= vocab)).any():
        raise IndexError(f"cross entropy target out of range [0, {vocab})")
    n = int(mask.sum())
    if n == 0:
        return make_node(np.asarray(0.0), (logits,), lambda g: None)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, safe[..., None], axis=-1)[..., 0]
    data = np.asarray(np.where(mask, lse - picked, 0.0).sum() / n)

    def bwd(g):
        if logits.requires_grad:
            scale = float(g) / n
            p = np.exp(shifted - lse[..., None])
            p *= (mask * scale)[..., None]
            sub = np.take_along_axis(p, safe[..., None], axis=-1)
            np.put_along_axis(p, safe[..., None], sub - scale * mask[..., None], axis=-1)
            logits.grad += p

    return make_node(data, (logits,), bwd)


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel convolution over the time axis (axis -2), zero padded, odd kernel."""
    k = w.data.shape[0]
    if k % 2 != 1:
        raise ValueError(f"depthwise_conv1d kernel must be odd, got {k}")
    if w.data.shape[1] != x.data.shape[-1]:
        raise ValueError(f"channel mismatch: x {x.shape}, w {w.shape}")
    t = x.data.shape[-2]
    half = k // 2
    pad = [(0, 0)] * (x.data.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    data = np.zeros_like(x.data)
    for j in range(k):
        data += xp[..., j : j + t, :] * w.data[j]

    def bwd(g):
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[..., j : j + t, :] += g * w.data[j]
            x.grad += gp[..., half : half + t, :]
        if w.requires_grad:
            for j in range(k):
                w.grad[j] += (g * xp[..., j : j + t, :]).reshape(-1, w.data.shape[1]).sum(axis=0)

    return make_node(data, (x, w), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    max_rel_errors: list[float] = field(default_factory=list)
    passed: bool = True

    @property
    def worst(self) -> float:
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0


def grad_check(
    f,
    inputs: list[Tensor],
    eps: float = 1e-3,
    tol: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar f(inputs) with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1); the report
    carries the max per input and passes iff all are <= tol.
    """
    if eps <= 0 or tol <= 0:
        raise ValueError("grad_check eps and tol must be positive")
    for t in inputs:
        t.grad = None
    out = f(inputs)
    if out.data.size != 1:
        raise ValueError("grad_check target function must return a scalar")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    report = GradCheckReport(eps=eps, tol=tol)
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n_coords = flat.size
        coords = np.arange(n_coords)
        if max_coords is not None and n_coords > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n_coords, size=max_coords, replace=False)
        worst = 0.0
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = f(inputs).item()
            flat[i] = orig - eps
            with no_grad():
                f_minus = f(inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1.0)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        report.max_rel_errors.append(worst)
        if worst > tol:
            report.passed = False
    return report

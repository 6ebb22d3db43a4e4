"""Small reverse-mode autodiff core on top of numpy.

Everything is float64. Graphs are built eagerly on every forward call and
torn down after ``backward``; there is no static graph and no caching.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True
_SEQ = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array that records how it was computed."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._retain = False
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep ``.grad`` on this interior node after backward()."""
        self._retain = True
        return self

    # -- graph plumbing -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        parents = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parents)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward)
        return Tensor(data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf
        that requires grad (and of interior nodes marked with retain_grad)."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            order.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        # parents are always created before children, so newest-first is a
        # valid reverse topological order and fixes the summation order of
        # each node's incoming gradients regardless of unrelated branches
        order.sort(key=lambda t: t._seq, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def add(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)

    def backward(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return Tensor._make(ad + bd, (a, b), backward) if _any_tensor(a, b) else Tensor(ad + bd)


def mul(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward) if _any_tensor(a, b) else Tensor(ad * bd)


def neg(a) -> Tensor:
    if not isinstance(a, Tensor):
        return Tensor(-_as_array(a))
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    base = a.data
    out = base**exponent

    def backward(g):
        if exponent == 0.0:
            return (np.zeros_like(base),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * base ** (exponent - 1.0)
        # d/dx x^p at x=0 is 0 for p>1; keep it finite instead of 0*inf
        d = np.where((base == 0.0) & (exponent > 1.0), 0.0, d)
        return (g * d,)

    return Tensor._make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- shape ops ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(a.data[index], (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back with add."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (out,)

    return Tensor._make(weight.data[ids], (weight,), backward)


def scatter_rows(values: Tensor, index: tuple, shape: tuple) -> Tensor:
    """Place rows of ``values`` [n, d] into a zero tensor of ``shape`` at
    ``index`` (a tuple of integer arrays addressing all but the last axis)."""
    out = np.zeros(shape)
    out[index] = values.data
    return Tensor._make(out, (values,), lambda g: (g[index],))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    ad, bd = _as_array(a), _as_array(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out = ad @ bd
    return Tensor._make(out, (a, b), backward) if _any_tensor(a, b) else Tensor(out)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# -- normalisation and probability ops ---------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. ``mask`` (broadcastable bool) drops entries to
    exactly zero probability; every slice must keep at least one entry."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._make(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# -- losses -------------------------------------------------------------


def _pick(logp: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    if logp.ndim == 1:
        return logp[int(targets)]
    rows = np.arange(logp.shape[0])
    return logp[rows, targets.reshape(-1)]


def _check_targets(targets, n_classes: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= n_classes):
        raise IndexError(f"target out of range for {n_classes} classes: {t}")
    return t


def cross_entropy(logits: Tensor, target) -> Tensor:
    """-log softmax(logits)[target]; mean over rows for 2-d logits."""
    t = _check_targets(target, logits.shape[-1])
    picked = _pick(log_softmax(logits, -1), t)
    return -picked if logits.ndim == 1 else -picked.mean()


def focal_loss(logits: Tensor, targets, gamma: float = 2.0, mask: np.ndarray | None = None) -> Tensor:
    """Mean over unmasked positions of -(1 - p_t)^gamma * log p_t.

    ``logits`` is [N, C]; ``mask`` marks positions that count.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    logits2 = logits if logits.ndim == 2 else logits.reshape(-1, logits.shape[-1])
    t = _check_targets(targets, logits2.shape[-1]).reshape(-1)
    keep = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if not keep.any():
        raise ValueError("focal_loss: every position is masked")
    logp_t = _pick(log_softmax(logits2, -1), t)
    if gamma == 0.0:
        per = -logp_t
    else:
        per = -((1.0 - exp(logp_t)) ** gamma) * logp_t
    return (per * keep.astype(np.float64)).sum() * (1.0 / keep.sum())


def kl_divergence(p_logits: Tensor, q_logits: Tensor, reduce: bool = True) -> Tensor:
    """KL(softmax(p) || softmax(q)) over the last axis.

    Summed over leading axes when ``reduce`` is true, otherwise one value per
    row. Fused so identical inputs give exactly zero value and gradient.
    """
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"kl_divergence shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    lp = _log_softmax_np(p_logits.data)
    lq = _log_softmax_np(q_logits.data)
    p = np.exp(lp)
    q = np.exp(lq)
    diff = lp - lq
    rows = (p * diff).sum(axis=-1, keepdims=True)
    value = rows.sum() if reduce else rows[..., 0]

    def backward(g):
        g = np.asarray(g)
        if not reduce:
            g = g[..., None]
        return g * p * (diff - rows), g * (q - p)

    return Tensor._make(np.asarray(value), (p_logits, q_logits), backward)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- optimiser ------------------------------------------------------------


@dataclass
class OptimizerState:
    base_lr: float
    total_steps: int
    weight_decay: float = 0.01
    max_grad_norm: float | None = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")

    def lr(self) -> float:
        """Cosine-decayed rate for the current step (no warmup)."""
        frac = min(self.step, self.total_steps) / self.total_steps
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> float:
    """One AdamW update with global-norm clipping and cosine decay.

    ``params`` maps names to Tensors, ``grads`` maps the same names to arrays
    (missing names are treated as zero gradient). Returns the learning rate
    that was applied.
    """
    grads = {k: np.asarray(grads.get(k, np.zeros_like(p.data)), dtype=np.float64) for k, p in params.items()}
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}; update refused")
    if state.max_grad_norm is not None:
        clip_grad_norm(grads, state.max_grad_norm)

    lr = state.lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step += 1
    return lr

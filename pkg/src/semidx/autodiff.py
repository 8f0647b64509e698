"""Reverse-mode automatic differentiation over numpy arrays.

A small define-by-run engine: every operation returns a node holding the
forward value plus a closure that routes the incoming gradient to its
parents. Everything is stored in float64 so central finite differences are
a meaningful oracle for every gradient this module produces.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A value in the computation graph.

    ``data`` is the forward value; ``grad`` (same shape) is filled in by
    ``backward()``. Interior nodes keep references to their parents and a
    closure that distributes the incoming gradient. Leaves created with
    ``requires_grad=True`` accumulate gradients; everything else is treated
    as a constant.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Array | None = None) -> None:
        """Reverse-mode sweep from this node back to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        # iterative post-order DFS; reversed, it is a topological order in
        # which every node is visited after all of its consumers
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = _as_array(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: Array) -> None:
    # gradients are only ever re-bound, never mutated in place, so passing
    # one array to several parents is safe
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _node(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def pow_(t, p: float) -> Tensor:
    t = as_tensor(t)
    data = t.data ** p

    def backward(g: Array) -> None:
        _accumulate(t, g * p * t.data ** (p - 1))

    return _node(data, (t,), backward)


def log(t) -> Tensor:
    t = as_tensor(t)
    data = np.log(t.data)

    def backward(g: Array) -> None:
        _accumulate(t, g / t.data)

    return _node(data, (t,), backward)


def exp(t) -> Tensor:
    t = as_tensor(t)
    data = np.exp(t.data)

    def backward(g: Array) -> None:
        _accumulate(t, g * data)

    return _node(data, (t,), backward)


def maximum_scalar(t, floor: float) -> Tensor:
    """Elementwise max(t, floor); gradient passes only where t > floor."""
    t = as_tensor(t)
    data = np.maximum(t.data, floor)

    def backward(g: Array) -> None:
        _accumulate(t, g * (t.data > floor))

    return _node(data, (t,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(t) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences stay clean."""
    t = as_tensor(t)
    x = t.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def backward(g: Array) -> None:
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        _accumulate(t, g * d)

    return _node(data, (t,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    data = a.data @ b.data

    def backward(g: Array) -> None:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.data.shape
    data = t.data.reshape(shape)

    def backward(g: Array) -> None:
        _accumulate(t, g.reshape(old))

    return _node(data, (t,), backward)


def transpose(t, axes: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    data = t.data.transpose(axes)

    def backward(g: Array) -> None:
        _accumulate(t, g.transpose(inv))

    return _node(data, (t,), backward)


def take(t, idx) -> Tensor:
    """Generic indexing/slicing; backward scatter-adds into the source."""
    t = as_tensor(t)
    data = np.array(t.data[idx])

    def backward(g: Array) -> None:
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        _accumulate(t, full)

    return _node(data, (t,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of a 2-D table gathered by integer index (any index shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding index out of range")
    data = table.data[ids]

    def backward(g: Array) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _node(data, (table,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            _accumulate(p, g[tuple(sl)])

    return _node(data, tuple(parts), backward)


def sum_(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(t, np.broadcast_to(gg, t.data.shape))

    return _node(data, (t,), backward)


def mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    if axis is None:
        count = t.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([t.data.shape[a] for a in axes]))
    return mul(sum_(t, axis=axis, keepdims=keepdims), 1.0 / count)


def stop_gradient(t: Tensor) -> Tensor:
    """A constant view of ``t``: forward value shared, no gradient path."""
    return Tensor(t.data)


def dropout(t: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return t
    mask = (rng.random(t.data.shape) >= p) / (1.0 - p)
    return mul(t, mask)


def take_along_last(t: Tensor, idx) -> Tensor:
    """Pick one entry per row along the last axis (e.g. target log-probs)."""
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64)
    data = np.take_along_axis(t.data, idx[..., None], axis=-1)[..., 0]

    def backward(g: Array) -> None:
        full = np.zeros_like(t.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accumulate(t, full)

    return _node(data, (t,), backward)


# ---------------------------------------------------------------------------
# softmax family and losses
# ---------------------------------------------------------------------------

def softmax(t, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Numerically stable softmax (max subtraction) with a temperature."""
    t = as_tensor(t)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(t.data).all():
        raise ValueError("softmax input must be finite")
    z = t.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(t, (g - dot) * y / temperature)

    return _node(y, (t,), backward)


def log_softmax(t, axis: int = -1, temperature: float = 1.0) -> Tensor:
    t = as_tensor(t)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(t.data).all():
        raise ValueError("log_softmax input must be finite")
    z = t.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(g: Array) -> None:
        _accumulate(t, (g - y * g.sum(axis=axis, keepdims=True)) / temperature)

    return _node(out, (t,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g: Array) -> None:
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        gx = g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, gx)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), backward)


def nll_loss(log_probs: Tensor, targets, mask: Array | None = None) -> Tensor:
    """Summed negative log-likelihood of the targets under ``log_probs``.

    ``log_probs`` has vocabulary on the last axis; ``targets`` holds one
    index per remaining position. ``mask`` (same shape as targets) zeroes
    the contribution of padded positions.
    """
    log_probs = as_tensor(log_probs)
    targets = np.asarray(targets, dtype=np.int64)
    vocab = log_probs.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("nll_loss target index out of vocabulary range")
    picked = take_along_last(log_probs, targets)
    if mask is not None:
        picked = mul(picked, np.asarray(mask, dtype=np.float64))
    return mul(sum_(picked), -1.0)


def kl_divergence(p, q, floor: float = 1e-9) -> Tensor:
    """KL(p || q), reduced over the last axis.

    ``q`` is clamped at ``floor`` before the log to keep near-one-hot
    distributions from blowing up the ratio; ``p`` is clamped only inside
    its own log so that p=0 entries contribute exactly zero.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    sums_p = p.data.sum(axis=-1)
    sums_q = q.data.sum(axis=-1)
    if not (np.allclose(sums_p, 1.0, atol=1e-6) and np.allclose(sums_q, 1.0, atol=1e-6)):
        raise ValueError("kl_divergence inputs must sum to 1 along the last axis")
    logp = log(maximum_scalar(p, floor))
    logq = log(maximum_scalar(q, floor))
    return sum_(mul(p, sub(logp, logq)), axis=-1)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Optimizer:
    """Adaptive-moment updates with bias correction (default) or plain SGD.

    Non-finite gradients cause the whole update to be skipped, with a
    counter recording how often that happened; the step counter only
    advances on applied updates.
    """

    def __init__(self, params: Mapping[str, Tensor] | Iterable[Tensor],
                 lr: float = 1e-3, mode: str = "adam",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, Mapping):
            self.params: dict[str, Tensor] = dict(params)
        else:
            self.params = {str(i): p for i, p in enumerate(params)}
        if mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.lr = float(lr)
        self.mode = mode
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.skipped_updates = 0
        if mode == "adam":
            self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
            self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        else:
            self._m = {}
            self._v = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False if skipped on non-finite grads."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        for g in grads.values():
            if not np.isfinite(g).all():
                self.skipped_updates += 1
                warnings.warn("non-finite gradient encountered; optimizer update skipped")
                return False
        self.step_count += 1
        if self.mode == "sgd":
            for k, p in self.params.items():
                p.data = p.data - self.lr * grads[k]
            return True
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = grads[k]
            self._m[k] = self.beta1 * self._m[k] + (1.0 - self.beta1) * g
            self._v[k] = self.beta2 * self._v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self._m[k] / c1
            vhat = self._v[k] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {
            "mode": self.mode,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "skipped_updates": self.skipped_updates,
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if state["mode"] != self.mode:
            raise ValueError("optimizer mode mismatch")
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.step_count = int(state["step_count"])
        self.skipped_updates = int(state["skipped_updates"])
        if self.mode == "adam":
            for k in self.params:
                if k in state["m"]:
                    self._m[k] = np.asarray(state["m"][k], dtype=np.float64)
                    self._v[k] = np.asarray(state["v"][k], dtype=np.float64)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckError(RuntimeError):
    """The check could not run (e.g. the loss is not deterministic)."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    coords_checked: int
    per_param: dict[str, float]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn: Callable[[], Tensor],
               params: Mapping[str, Tensor] | Iterable[Tensor],
               eps: float = 1e-5,
               sample_per_param: int | None = None,
               rng: np.random.Generator | None = None,
               zero_floor: float = 1e-7) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` is a zero-argument callable that rebuilds the forward graph
    from the current parameter values and returns a scalar Tensor. With
    ``sample_per_param`` set, only that many randomly chosen coordinates of
    each parameter are probed (full elementwise check otherwise).

    The relative error of a coordinate is |a − fd| / max(|a|, |fd|), taken
    as 0 when both magnitudes fall below ``zero_floor``.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    if isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {str(i): p for i, p in enumerate(params)}

    v1 = float(loss_fn().data)
    v2 = float(loss_fn().data)
    if v1 != v2:
        raise GradCheckError(
            f"loss_fn is not deterministic under fixed parameters: {v1!r} != {v2!r}")

    for p in named.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in named.items()}

    rng = rng if rng is not None else np.random.default_rng(0)
    max_rel = 0.0
    max_abs = 0.0
    checked = 0
    per_param: dict[str, float] = {}
    for name, p in named.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if sample_per_param is None or n <= sample_per_param:
            coords = range(n)
        else:
            coords = sorted(int(c) for c in rng.choice(n, size=sample_per_param, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(loss_fn().data)
            flat[c] = orig - eps
            f_minus = float(loss_fn().data)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[c])
            abs_err = abs(a - fd)
            denom = max(abs(a), abs(fd))
            rel = 0.0 if denom < zero_floor else abs_err / denom
            worst = max(worst, rel)
            max_abs = max(max_abs, abs_err)
            checked += 1
        per_param[name] = worst
        max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel_error=max_rel, max_abs_error=max_abs,
                           coords_checked=checked, per_param=per_param)

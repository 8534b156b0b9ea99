"""Small reverse-mode autodiff over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded; calling
:func:`backward` replays the tape in reverse.  Outside a tape the same
functions run as plain inference code.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DisconnectedLoss, NonFiniteValue, ShapeMismatch

DEBUG = bool(os.environ.get("LTLM_DEBUG"))
_TAPES: list["Tape"] = []


def set_debug(flag: bool) -> None:
    global DEBUG
    DEBUG = flag


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_t(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Tape:
    """Record of one forward pass: ``(output, inputs, backward_fn)`` per op."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()


def _record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out)):
        raise NonFiniteValue("non-finite value produced")
    t = Tensor(out)
    if _TAPES and any(p.requires_grad for p in parents):
        t.requires_grad = True
        _TAPES[-1].nodes.append((t, tuple(parents), backward_fn))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` for every leaf tensor that requires them.

    Sets ``.grad`` on those leaves and returns ``{tensor: grad}``.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n[0]) for n in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise DisconnectedLoss("loss was not computed on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    owners = {id(loss): loss}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                owners[key] = p
    result = {}
    for key, g in grads.items():
        t = owners[key]
        if key not in produced:
            t.grad = g
            result[t] = g
    return result


# operations


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data * b.data
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def scale(a: Tensor, k: float) -> Tensor:
    return _record(a.data * k, (a,), lambda g: (g * k,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), fn)


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"index out of range for table with {table.shape[0]} rows")

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(table.data[ids], (table,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis.  Rows with variance < 1e-12 normalise to 0."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    flat = var < 1e-12
    inv = np.where(flat, 0.0, 1.0 / np.sqrt(var + eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _record(out, (x, gamma, beta), fn)


def softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax whose masked positions (mask == 0) get exactly zero weight."""
    xd = x.data
    if mask is None:
        m = xd.max(axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        masked = np.where(mask, xd, -np.inf)
        m = masked.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd, 0.0) - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), fn)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def dropout(x: Tensor, rate: float, seed: Sequence[int], training: bool) -> Tensor:
    """Inverted dropout with a mask drawn from ``np.random.default_rng(seed)``.

    ``seed`` is a tuple such as (global seed, layer id, step) so each call has
    its own reproducible stream.
    """
    if not training or rate <= 0.0:
        return x
    keep = np.random.default_rng(list(seed)).random(x.shape) >= rate
    k = keep / (1.0 - rate)
    return _record(x.data * k, (x,), lambda g: (g * k,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_t(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=True)

    def fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    res = _record(out, (x,), fn)
    if axis is None:
        return reshape(res, ())
    return res


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy over unmasked entries; 0 when everything is masked."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(z) if mask is None else np.asarray(mask, dtype=np.float64)
    n = w.sum()
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.array((per * w).sum() / n if n > 0 else 0.0)
    coef = w / n if n > 0 else np.zeros_like(z)
    return _record(out, (logits,), lambda g: (g * (_sigmoid(z) - t) * coef,))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits) on the last axis."""
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    w = np.ones(t.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    n = w.sum()
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    out = np.array(-(picked * w).sum() / n if n > 0 else 0.0)

    def fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        coef = (w / n if n > 0 else np.zeros_like(w))[..., None]
        return (g * (p - onehot) * coef,)

    return _record(out, (logits,), fn)


# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    stencil: int = 2,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` recomputes the scalar objective from the current parameter values.
    Tensors with more than ``max_coords`` entries are checked on a random
    subset of that size.  The error is ``|ga - gn| / max(|ga| + |gn|, floor)``;
    the floor keeps coordinates whose true gradient is zero from reporting
    finite-difference roundoff as a large relative error.  ``stencil=4`` uses
    the fourth-order central difference, which tolerates a larger ``eps`` and
    so loses less to roundoff.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    worst = 0.0
    for p in params:
        ga_all = grads.get(p)
        size = p.data.size
        idx = np.arange(size) if size <= max_coords else np.sort(rng.choice(size, max_coords, replace=False))
        flat = p.data.reshape(-1)
        for i in idx:
            orig = flat[i]

            def at(h):
                flat[i] = orig + h
                return f().item()

            if stencil == 2:
                gn = (at(eps) - at(-eps)) / (2 * eps)
            else:
                gn = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
            flat[i] = orig
            ga = 0.0 if ga_all is None else float(ga_all.reshape(-1)[i])
            err = abs(ga - gn) / max(floor, abs(ga) + abs(gn))
            worst = max(worst, err)
    return worst


# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self, step: int | None = None) -> float:
        step = self.step if step is None else step
        if self.warmup > 0 and step < self.warmup:
            return self.lr * step / self.warmup
        return self.lr


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place.  Linear warmup, then constant lr."""
    state.step += 1
    t = state.step
    lr = state.current_lr(t)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def xavier(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)

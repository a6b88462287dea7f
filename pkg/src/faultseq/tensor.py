"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape engine: every operation builds a node holding its parents and
a closure that routes the upstream gradient to them. ``Tensor.backward()``
walks the graph once in reverse topological order. Everything is numpy
under the hood and stays in 64-bit floats so finite-difference checks are
meaningful.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A numpy array plus an optional backward record.

    ``grad`` is filled in (or accumulated into) during ``backward()``.
    Graphs are acyclic by construction: ops only reference already-built
    tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autograd ------------------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.shape}")
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
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, rng: np.random.Generator | None = None, scale_: float | None = None) -> Tensor:
    """Learnable leaf tensor. If ``rng`` given, fill with N(0, scale) noise."""
    if rng is not None:
        data = rng.normal(0.0, scale_ if scale_ is not None else 0.02, size=data)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * c)

    return _node(a.data * c, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(out_data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _node(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(out_data, tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx]

    def backward(g: Array) -> None:
        if a.requires_grad:
            gfull = np.zeros_like(a.data)
            gfull[idx] = g
            a._accumulate(gfull)

    return _node(out_data, (a,), backward)


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row gather ``table[ids]``; backward scatter-adds over repeated ids."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g: Array) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return _node(out_data, (table,), backward)


# -- nonlinearities and normalizations ------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g: Array) -> None:
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            a._accumulate(g * da)

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * s * (1.0 - s))

    return _node(s, (a,), backward)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> None:
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - dot))

    return _node(y, (a,), backward)


def entmax15_rows(a: Tensor) -> Tensor:
    """Exact 1.5-entmax over the last axis.

    Sort-based threshold computation; entries below the per-row threshold
    come out exactly zero, the rest sum to one.
    """
    a = as_tensor(a)
    y = _entmax15(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            gppr = np.sqrt(y)
            dx = g * gppr
            q = dx.sum(axis=-1, keepdims=True) / np.maximum(gppr.sum(axis=-1, keepdims=True), 1e-300)
            a._accumulate(dx - q * gppr)

    return _node(y, (a,), backward)


def _entmax15(x: Array) -> Array:
    x = (x - x.max(axis=-1, keepdims=True)) / 2.0
    xs = -np.sort(-x, axis=-1)
    k = x.shape[-1]
    rho = np.arange(1, k + 1, dtype=np.float64)
    mean = np.cumsum(xs, axis=-1) / rho
    mean_sq = np.cumsum(xs**2, axis=-1) / rho
    ss = rho * (mean_sq - mean**2)
    delta = np.maximum((1.0 - ss) / rho, 0.0)
    tau = mean - np.sqrt(delta)
    support = (tau <= xs).sum(axis=-1, keepdims=True)
    tau_star = np.take_along_axis(tau, support - 1, axis=-1)
    return np.maximum(x - tau_star, 0.0) ** 2


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, no centering."""
    a, gain = as_tensor(a), as_tensor(gain)
    x = a.data
    d = x.shape[-1]
    r = np.sqrt((x**2).mean(axis=-1, keepdims=True) + eps)
    xhat = x / r
    out_data = gain.data * xhat

    def backward(g: Array) -> None:
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if a.requires_grad:
            gg = g * gain.data
            dot = (gg * x).sum(axis=-1, keepdims=True)
            a._accumulate(gg / r - x * dot / (d * r**3))

    return _node(out_data, (a, gain), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Mean-variance normalization over the last axis with affine parameters."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    sd = np.sqrt(var + eps)
    xhat = xc / sd
    out_data = gain.data * xhat + bias.data

    def backward(g: Array) -> None:
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if a.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            a._accumulate((gg - m1 - xhat * m2) / sd)

    return _node(out_data, (a, gain, bias), backward)


def rotate_pairs(a: Tensor, cos: Array, sin: Array) -> Tensor:
    """Rotate consecutive coordinate pairs of the last axis by given angles.

    ``cos``/``sin`` broadcast against ``a[..., ::2]``. The backward pass is
    the inverse rotation, so norms are preserved both ways.
    """
    a = as_tensor(a)
    x = a.data
    xe, xo = x[..., 0::2], x[..., 1::2]
    out_data = np.empty_like(x)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def backward(g: Array) -> None:
        if a.requires_grad:
            ge, go = g[..., 0::2], g[..., 1::2]
            ga = np.empty_like(g)
            ga[..., 0::2] = ge * cos + go * sin
            ga[..., 1::2] = -ge * sin + go * cos
            a._accumulate(ga)

    return _node(out_data, (a,), backward)


# -- losses ----------------------------------------------------------------------


def cross_entropy_masked(logits: Tensor, targets: Array, mask: Array) -> Tensor:
    """Mean negative log-likelihood over masked positions only.

    ``logits`` has vocabulary on the last axis; ``targets``/``mask`` cover
    the leading axes. An empty mask yields a constant 0 with zero gradient.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    flat_logits = logits.data.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    flat_mask = mask.reshape(-1)
    idx = np.nonzero(flat_mask)[0]
    if idx.size == 0:
        return Tensor(0.0)
    z = flat_logits[idx]
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    nll = lse - z[np.arange(idx.size), flat_targets[idx]]
    out_data = nll.mean()

    def backward(g: Array) -> None:
        if logits.requires_grad:
            p = np.exp(z - zmax)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(idx.size), flat_targets[idx]] -= 1.0
            gflat = np.zeros_like(flat_logits)
            gflat[idx] = p * (float(g) / idx.size)
            logits._accumulate(gflat.reshape(logits.shape))

    return _node(np.asarray(out_data), (logits,), backward)


def bce_multilabel(logits: Tensor, labels: Array) -> Tensor:
    """Mean binary cross-entropy from logits, log-sum-exp stabilized."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    z = logits.data
    out_data = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))

    def backward(g: Array) -> None:
        if logits.requires_grad:
            logits._accumulate((_sigmoid(z) - y) * (float(g) / z.size))

    return _node(np.asarray(out_data), (logits,), backward)


# -- gradient verification --------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    refine_factors: tuple[float, ...] = (10.0, 100.0),
    refine_below: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a scalar-valued closure over ``inputs``; relative error per
    coordinate uses denominator max(|analytic|, |numeric|, 1e-8). With
    ``max_coords`` set, a random subsample of coordinates per input is
    checked (seeded via ``rng``).

    Coordinates whose difference quotient disagrees worse than
    ``refine_below`` are re-probed at larger steps and keep their best
    estimate: for gradients near the cancellation noise floor eps*|f|/2h
    the quotient is noise, and noise shrinks with the step while a wrong
    adjoint disagrees at every step size.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f()
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def probe(flat: Array, i: int, step: float) -> float:
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            ref = a.reshape(-1)[i]

            def rel(numeric: float) -> float:
                denom = max(abs(ref), abs(numeric), 1e-8)
                return abs(ref - numeric) / denom

            err = rel(probe(flat, i, h))
            if err > refine_below:
                for factor in refine_factors:
                    err = min(err, rel(probe(flat, i, h * factor)))
                    if err <= refine_below:
                        break
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst

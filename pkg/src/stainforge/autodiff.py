"""A small reverse-mode autodiff engine over numpy arrays.

Each op returns a :class:`Tensor` holding its parents and a closure that
pushes the upstream gradient to them. ``Tensor.backward`` walks the graph
in reverse topological order. Images use NHWC layout; convolution kernels
are ``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NonFiniteValue, ShapeMismatch

__all__ = [
    "Tensor",
    "dense",
    "conv2d",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "softmax",
    "log_softmax",
    "grad_reverse",
    "add",
    "scale",
    "cross_entropy_loss",
    "squared_l2_loss",
    "GradCheck",
    "finite_diff_check",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=()):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Backpropagate from this tensor; leaf gradients accumulate into ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate gradients are not needed once pushed upstream
                    node.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else ())
    if needs:
        out._backward = backward
    return out


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite values entering {where}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def scale(x, k: float) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        x._accumulate(g * k)

    return _result(x.data * k, (x,), backward)


def dense(x, w, b=None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(N, D_in)`` and ``w`` of ``(D_in, D_out)``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense: input {x.shape} incompatible with weight {w.shape}")
    _check_finite(x.data, "dense")
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"dense: bias {b.shape} vs output width {w.shape[1]}")
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _result(out, parents, backward)


def _windows(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with zero padding."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    _check_finite(x.data, "conv2d")
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * c)
    wm = w.data.reshape(kh * kw * c, co)
    out = cols @ wm
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (co,):
            raise ShapeMismatch(f"conv2d: bias {b.shape} vs {co} output channels")
        out += b.data
    out = out.reshape(n, ho, wo, co)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(n * ho * wo, co)
        if w.requires_grad:
            w._accumulate((cols.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + wd]
            x._accumulate(dxp)

    return _result(out, parents, backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: ``(N, H, W, C) -> (N, C)``."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects NHWC, got {x.shape}")
    n, h, w, c = x.shape

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy())

    return _result(x.data.mean(axis=(1, 2)), (x,), backward)


def grad_reverse(x, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""
    if lam < 0:
        raise ValueError("grad_reverse needs lam >= 0")
    x = _as_tensor(x)

    def backward(g):
        x._accumulate(-lam * g)

    return _result(x.data, (x,), backward)


def log_softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def cross_entropy_loss(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeMismatch(f"cross_entropy_loss expects (N, K>=2) logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeMismatch("label outside [0, K)")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        logits._accumulate(d * (g / n))

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def squared_l2_loss(pred, target) -> Tensor:
    """``(1/N) * sum_i ||pred_i - target_i||^2``."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape or pred.data.ndim != 2:
        raise ShapeMismatch(f"squared_l2_loss: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred.data - target
    loss = (diff * diff).sum() / n

    def backward(g):
        pred._accumulate(diff * (2.0 * g / n))

    return _result(np.asarray(loss), (pred,), backward)


class GradCheck(NamedTuple):
    max_rel_error: float
    n_checked: int
    n_excluded: int


def finite_diff_check(fn, params, h: float = 1e-4, coords=None) -> GradCheck:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn(params)`` must build and return a scalar :class:`Tensor` from the
    list of leaf tensors ``params``. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    A coordinate that disagrees is re-probed with step ``h / 100``. If the
    jump between the one-sided differences does not shrink with the step,
    the point sits on a kink (e.g. relu at 0) and is excluded.
    ``coords`` optionally caps how many coordinates per tensor are probed.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    fn(params).backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def probe(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(params).data)
        flat[i] = orig - step
        fm = float(fn(params).data)
        flat[i] = orig
        f0 = float(fn(params).data)
        return (fp - fm) / (2 * step), abs((fp - f0) - (f0 - fm)) / step

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst, checked, excluded = 0.0, 0, 0
    rng = np.random.default_rng(0)
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            ai = a.reshape(-1)[i]
            num, jump = probe(flat, i, h)
            err = rel(ai, num)
            if err > 1e-6:
                num2, jump2 = probe(flat, i, h / 100)
                if jump2 > 0.5 * jump and jump2 > 1e-6 * max(1.0, abs(num2)):
                    excluded += 1
                    continue
                err = min(err, rel(ai, num2))
            worst = max(worst, err)
            checked += 1
    return GradCheck(worst, checked, excluded)

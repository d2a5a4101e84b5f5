"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that produces a tensor from inputs requiring gradients is
appended to the tape; its position on the tape is the tensor's ``node_id``.
``backward`` walks the reachable part of the tape in exact reverse append
order, so a node's gradient is complete before it is propagated further.
The tape is rebuilt on every forward pass.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from dbf.errors import (
    ContractError,
    DegenerateInputError,
    MaskError,
    NonFiniteError,
    ShapeError,
)

LAYER_NORM_EPS = 1e-5
NORMALIZE_EPS = 1e-12

_node_ids = itertools.count()
# Direct ufunc reductions skip the np.sum/np.mean wrapper layers; the engine
# calls them hundreds of times per forward pass.
_add_reduce = np.add.reduce
_max_reduce = np.maximum.reduce


class _State(threading.local):
    enabled = True
    # Per-op finiteness checks; switched off only while finite differences
    # re-evaluate a loss whose own value is then checked instead.
    check_finite = True


_state = _State()


def grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array, an optional gradient buffer and its place on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(_as_array(data))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1 or self.data.ndim > 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        # Collect the reachable subgraph, then replay it in reverse tape order.
        seen = {self.node_id: self}
        stack = [self]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    seen[parent.node_id] = parent
                    stack.append(parent)
        order = sorted(seen.values(), key=lambda t: t.node_id, reverse=True)

        pending: dict[int, np.ndarray] = {self.node_id: _as_array(grad)}
        for node in order:
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    # A single reduction is NaN/inf exactly when some entry is (barring overflow).
    if _state.check_finite and not math.isfinite(_add_reduce(data, None)):
        inputs = ", ".join(str(p.node_id) for p in parents)
        raise NonFiniteError(f"non-finite values produced by '{op}' from nodes [{inputs}]")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    if _state.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(
        ad ** exponent, "pow", (a,),
        lambda g: (g * exponent * ad ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), "abs", (a,), lambda g: (g * np.sign(ad),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, "gelu", (a,), backward)


# reductions and shape -----------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(_add_reduce(a.data, axis=axes, keepdims=keepdims), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= shape[ax]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    out = _add_reduce(a.data, axis=axes, keepdims=keepdims) * (1.0 / count)
    return _result(out, "mean", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _result(
        a.data.transpose(axes), "transpose", (a,),
        lambda g: (g.transpose(inverse),),
    )


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index], copy=True), "getitem", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, backward
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(
        np.array(np.broadcast_to(a.data, shape)), "broadcast", (a,),
        lambda g: (_unbroadcast(g, old),),
    )


# linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # Activations against a weight matrix: fold leading axes into rows.
        flat = ad.reshape(-1, ad.shape[-1])
        out = (flat @ bd).reshape(*ad.shape[:-1], bd.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _result(out, "matmul", (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, "matmul", (a, b), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` as one tape node; ``x`` may have any leading axes."""
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine shape mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(*xd.shape[:-1], wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = ((g2 @ wd.T).reshape(xd.shape), flat.T @ g2)
        return grads if bias is None else grads + (_add_reduce(g2, axis=0),)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "affine", parents, backward)


# fused neural-net primitives ----------------------------------------------


def softmax_masked(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where a position may be attended.

    Blocked positions get probability exactly 0. A row with no open position
    is an error rather than a silent uniform distribution.
    """
    x = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise MaskError("softmax row has every position masked")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - _max_reduce(x, axis=-1, keepdims=True))
    out = e / _add_reduce(e, axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - _add_reduce(g * out, axis=-1, keepdims=True)),)

    return _result(out, "softmax", (logits,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _result(out, "logsumexp", (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last extent {d}"
        )
    if not eps > 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    inv_d = 1.0 / d
    centered = xd - _add_reduce(xd, axis=-1, keepdims=True) * inv_d
    var = _add_reduce(centered * centered, axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - _add_reduce(dxhat, axis=-1, keepdims=True) * inv_d
            - xhat * (_add_reduce(dxhat * xhat, axis=-1, keepdims=True) * inv_d)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, "layer_norm", (x, gain, bias), backward)


def l2_normalize(x: Tensor, eps: float = NORMALIZE_EPS) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        raise DegenerateInputError(f"cannot normalize a vector with norm <= {eps}")
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _result(out, "l2_normalize", (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter relative errors between analytic and central-difference gradients."""

    h: float
    per_param: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def max_rel_error(self) -> float:
        return max((mx for mx, _ in self.per_param.values()), default=0.0)

    @property
    def mean_rel_error(self) -> float:
        means = [mn for _, mn in self.per_param.values()]
        return float(np.mean(means)) if means else 0.0

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        ranked = sorted(self.per_param.items(), key=lambda kv: kv[1][0], reverse=True)
        return [(name, mx) for name, (mx, _) in ranked[:k]]


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central finite differences.

    ``loss_fn`` must be a deterministic closure over the given parameters.
    With ``max_elements`` set, at most that many entries per parameter are
    probed (chosen with ``seed``); otherwise every entry is.
    """
    if not (0.0 < h <= 1e-3):
        raise ContractError(f"finite-difference step must lie in (0, 1e-3], got {h}")
    params = dict(params)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }
    rng = np.random.default_rng(seed)
    report = GradCheckReport(h=h)
    # The probes re-run the same graph thousands of times; checking each
    # probed loss for finiteness replaces the per-op checks, which already
    # ran on the analytic pass above.
    prev_check = _state.check_finite
    _state.check_finite = False
    try:
        with no_grad():
            for name, p in params.items():
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
                numeric = np.empty(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = loss_fn().item()
                    flat[i] = orig - h
                    down = loss_fn().item()
                    flat[i] = orig
                    if not (math.isfinite(up) and math.isfinite(down)):
                        raise NonFiniteError(f"loss became non-finite while probing {name}[{i}]")
                    numeric[j] = (up - down) / (2 * h)
                err = relative_error(analytic[name].reshape(-1)[idx], numeric)
                report.per_param[name] = (float(err.max()), float(err.mean()))
                report.n_checked += idx.size
    finally:
        _state.check_finite = prev_check
    return report

"""Small dense tensor engine with reverse-mode autodiff.

Every primitive takes and returns :class:`Tensor` objects wrapping numpy
arrays. When grad mode is on and any input requires a gradient, the result
remembers its parents and a closure mapping the output gradient to one
gradient per parent. :func:`backward` walks that graph once in reverse
topological order.

Spatial primitives accept a single ``[C, H, W]`` map or a batch
``[N, C, H, W]``. Elementwise ops require equal shapes; the only broadcast
allowed is a tensor missing the leading batch axis (used for the shallow
noise, which is shared across a batch).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError, NonFiniteError

BCE_CLIP = 1e-7

_grad_enabled = True
_default_dtype = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def default_dtype(dtype):
    """Set the dtype used for freshly created float tensors (e.g. float64 reference mode)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def get_default_dtype():
    return _default_dtype


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _as4d(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name}: expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


# -- elementwise ---------------------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> int:
    # 0: equal shapes, 1: b lacks the batch axis, 2: a lacks it
    if a.shape == b.shape:
        return 0
    if a.data.ndim == b.data.ndim + 1 and a.shape[1:] == b.shape:
        return 1
    if b.data.ndim == a.data.ndim + 1 and b.shape[1:] == a.shape:
        return 2
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, kind: int, which: str) -> np.ndarray:
    if (kind == 1 and which == "b") or (kind == 2 and which == "a"):
        return g.sum(axis=0)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "add")

    def backward(g):
        return _unbroadcast(g, kind, "a"), _unbroadcast(g, kind, "b")

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, kind, "a"), _unbroadcast(g * ad, kind, "b")

    return _result(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.exp(-np.logaddexp(0, -d)).astype(d.dtype)
    # keep the result strictly inside (0, 1) even when float32 saturates
    eps = np.finfo(d.dtype).eps
    out = np.clip(out, eps, 1 - eps)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice channels ``start:stop`` (channel axis is third from last)."""
    shape = x.shape
    sl = (Ellipsis, slice(start, stop), slice(None), slice(None))

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), backward)


def place(x: Tensor, height: int, width: int, top: int, left: int) -> Tensor:
    """Zero-pad ``x`` into a ``height x width`` canvas with its corner at (top, left)."""
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise DimensionError(f"place: {h}x{w} block at ({top},{left}) exceeds {height}x{width}")
    out = np.zeros(x.shape[:-2] + (height, width), dtype=x.dtype)
    sl = (Ellipsis, slice(top, top + h), slice(left, left + w))
    out[sl] = x.data
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g[sl]),))


def mean_channels(x: Tensor) -> Tensor:
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"mean_channels: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    c = x.shape[-3]
    shape = x.shape
    out = x.data.mean(axis=-3, keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / c, shape).copy(),))


# -- spatial -------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    xd, single = _as4d(x.data, "conv2d")
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3] or wd.shape[2] % 2 == 0:
        raise DimensionError(f"conv2d: weight must be [C_out,C_in,k,k] with odd k, got {wd.shape}")
    n, c, h, w = xd.shape
    o, ci, k, _ = wd.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: stride must be 1 or 2, got {stride}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d: {h}x{w} input with pad {pad} smaller than kernel {k}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wm = wd.reshape(o, c * k * k)
    out = (cols @ wm.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gm = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(wd.shape)
        if bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            gx = np.ascontiguousarray(gx[0] if single else gx)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first row-major position."""
    xd, single = _as4d(x.data, "maxpool2")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    r = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)[..., None]
    out = np.take_along_axis(r, idx, axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gr = np.zeros(r.shape, dtype=g.dtype)
        np.put_along_axis(gr, idx, g4[..., None], axis=-1)
        gx = gr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if single else gx,)

    return _result(out, (x,), backward)


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic 1-D bilinear resampling matrix, half-pixel centers (corner-aligned=false)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    a = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - lam)
    np.add.at(a, (rows, i1), lam)
    return a.astype(dtype)


def upsample_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"upsample_bilinear: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (height, width):
        return x
    ah = interp_matrix(height, h, x.dtype)
    aw = interp_matrix(width, w, x.dtype)
    out = ah @ x.data @ aw.T
    return _result(out, (x,), lambda g: (ah.T @ g @ aw,))


# -- losses --------------------------------------------------------------------

def _check_same(pred: Tensor, target: Tensor, op: str):
    if pred.shape != target.shape:
        raise DimensionError(f"{op}: shapes {pred.shape} and {target.shape} differ")


def bce(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` before the logs. The
    backward pass evaluates the derivative at the clamped value instead of
    zeroing it, so saturated sigmoids still pass a gradient.
    """
    _check_same(pred, target, "bce")
    t = target.data
    if t.min() < 0 or t.max() > 1:
        raise DomainError("bce: target values must lie in [0, 1]")
    p = np.clip(pred.data, BCE_CLIP, 1 - BCE_CLIP)
    n = p.size
    val = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))

    def backward(g):
        gp = g * (p - t) / (p * (1 - p)) / n
        gt = g * (np.log1p(-p) - np.log(p)) / n if target.requires_grad else None
        return gp, gt

    return _result(np.asarray(val, dtype=pred.dtype), (pred, target), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _check_same(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = g * 2.0 * diff / n
        return gd, -gd

    return _result(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), backward)


# -- graph traversal -----------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf needing it.

    The recorded graph is released afterwards.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgs = node._backward(g)
        for p, pg in zip(node._parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, grads: Sequence | None = None) -> None:
    """In-place ``p <- p - lr * g``. Tensors without a gradient are left untouched."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ContractError("sgd_step: params and grads differ in length")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise DimensionError(f"sgd_step: grad shape {np.shape(g)} != param shape {p.shape}")
        p.data -= p.data.dtype.type(lr) * np.asarray(g, dtype=p.dtype)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    probes: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` is reduced to a scalar with a fixed random projection when
    it is not one already. ``probes`` limits the number of elements checked per
    input (chosen with ``seed``); ``None`` checks every element. The error per
    element is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    rng = np.random.default_rng(seed)
    proj = {}

    def scalar():
        out = fn(*inputs)
        if out.data.size == 1:
            return out
        if "w" not in proj:
            proj["w"] = Tensor(rng.standard_normal(out.shape), dtype=out.dtype)
        return sum_all(mul(out, proj["w"]))

    for t in inputs:
        t.grad = None
        t.requires_grad = True
    backward(scalar())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if probes is not None and probes < flat.size:
                idx = rng.choice(flat.size, size=probes, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(scalar().data)
                flat[i] = orig - h
                fm = float(scalar().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst

"""Minimal reverse-mode autodiff over dense numpy arrays.

Everything the evolution pipeline needs and nothing more: elementwise
arithmetic, matmul with batch broadcasting, softmax, layer norm, relu,
reductions, cosine similarity, nuclear norm, plus a central-difference
gradient verifier. Two precision modes: 64-bit for gradient checks,
32-bit for training runs.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "Array",
    "GradTape",
    "ShapeError",
    "set_precision",
    "precision_bits",
    "set_finite_checks",
    "array",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "concat",
    "stack",
    "getitem",
    "gather_rows",
    "relu",
    "exp",
    "log",
    "sigmoid",
    "power",
    "clamp",
    "sum_",
    "mean",
    "max_detached",
    "softmax",
    "layer_norm",
    "cosine_similarity",
    "nuclear_norm",
    "cross_entropy",
    "detach",
    "backward",
    "grad_check",
    "grad_check_detailed",
    "GradCheckResult",
]

_DTYPE = np.float64
_CHECK_FINITE = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_precision(bits: int) -> None:
    """Select the global float width (32 or 64) for new Arrays."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def precision_bits() -> int:
    return 64 if _DTYPE is np.float64 else 32


def set_finite_checks(enabled: bool) -> None:
    """Toggle the post-op finiteness assertion (debug mode)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


# honor the documented environment override at import time
_env = os.environ.get("RBWP_PRECISION")
if _env in ("32", "64"):
    set_precision(int(_env))


class Array:
    """A dense real tensor node in the computation graph.

    Leaf nodes hold data (parameters or constants); interior nodes
    remember their parents and a closure that routes the incoming
    gradient back to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(
                f"non-finite values in array {name or '<unnamed>'} with shape {self.data.shape}"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Array":
        return Array(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Array(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; non-Array operands are treated as constants
    def __add__(self, other):
        return add(self, _as_array(other))

    def __radd__(self, other):
        return add(_as_array(other), self)

    def __sub__(self, other):
        return sub(self, _as_array(other))

    def __rsub__(self, other):
        return sub(_as_array(other), self)

    def __mul__(self, other):
        return mul(self, _as_array(other))

    def __rmul__(self, other):
        return mul(_as_array(other), self)

    def __truediv__(self, other):
        return div(self, _as_array(other))

    def __rtruediv__(self, other):
        return div(_as_array(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_array(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def _as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def array(data, requires_grad=False, name=None) -> Array:
    return Array(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Array:
    return Array(data, requires_grad=True, name=name)


def constant(data, name=None) -> Array:
    return Array(data, requires_grad=False, name=name)


def detach(a: Array) -> Array:
    return a.detach()


def _needs_grad(*parents: Array) -> bool:
    return any(p.requires_grad or p._backward is not None for p in parents)


def _make(data, parents, backward_fn, name=None) -> Array:
    if _needs_grad(*parents):
        return Array(data, _parents=parents, _backward=backward_fn, name=name)
    return Array(data, name=name)


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Array, b: Array, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Array, b: Array) -> Array:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def back(g, grads):
        grads[0] = _sum_to_shape(g, a.shape)
        grads[1] = _sum_to_shape(g, b.shape)

    return _make(out, (a, b), back)


def sub(a: Array, b: Array) -> Array:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def back(g, grads):
        grads[0] = _sum_to_shape(g, a.shape)
        grads[1] = _sum_to_shape(-g, b.shape)

    return _make(out, (a, b), back)


def mul(a: Array, b: Array) -> Array:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def back(g, grads):
        grads[0] = _sum_to_shape(g * b.data, a.shape)
        grads[1] = _sum_to_shape(g * a.data, b.shape)

    return _make(out, (a, b), back)


def div(a: Array, b: Array) -> Array:
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def back(g, grads):
        grads[0] = _sum_to_shape(g / b.data, a.shape)
        grads[1] = _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)

    return _make(out, (a, b), back)


def neg(a: Array) -> Array:
    def back(g, grads):
        grads[0] = -g

    return _make(-a.data, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Array, b: Array) -> Array:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    out = np.matmul(a.data, b.data)

    def back(g, grads):
        grads[0] = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        grads[1] = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _make(out, (a, b), back)


def transpose(a: Array, axes=None) -> Array:
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2-D, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g, grads):
        grads[0] = np.transpose(g, inverse)

    return _make(np.transpose(a.data, axes), (a,), back)


def reshape(a: Array, shape) -> Array:
    shape = tuple(shape)
    old = a.shape

    def back(g, grads):
        grads[0] = g.reshape(old)

    return _make(a.data.reshape(shape), (a,), back)


def broadcast_to(a: Array, shape) -> Array:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def back(g, grads):
        grads[0] = _sum_to_shape(g, a.shape)

    return _make(np.ascontiguousarray(out), (a,), back)


def concat(arrays, axis=0) -> Array:
    arrays = [_as_array(a) for a in arrays]
    sizes = [a.shape[axis] for a in arrays]
    out = np.concatenate([a.data for a in arrays], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def back(g, grads):
        for i in range(len(arrays)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads[i] = g[tuple(sl)]

    return _make(out, tuple(arrays), back)


def stack(arrays, axis=0) -> Array:
    arrays = [_as_array(a) for a in arrays]
    first = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != first:
            raise ShapeError(f"stack: mismatched shapes {first} and {a.shape}")
    out = np.stack([a.data for a in arrays], axis=axis)

    def back(g, grads):
        for i in range(len(arrays)):
            grads[i] = np.take(g, i, axis=axis)

    return _make(out, tuple(arrays), back)


def getitem(a: Array, idx) -> Array:
    out = a.data[idx]

    def back(g, grads):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        grads[0] = buf

    return _make(np.array(out, dtype=_DTYPE), (a,), back)


def gather_rows(a: Array, idx) -> Array:
    """Pick a[i, idx[i]] for each row i of a 2-D array."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: need a 2-D array, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def back(g, grads):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, idx), g)
        grads[0] = buf

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Array) -> Array:
    out = np.maximum(a.data, 0.0)

    def back(g, grads):
        # subgradient at exactly 0 is taken as 0
        grads[0] = g * (a.data > 0)

    return _make(out, (a,), back)


def exp(a: Array) -> Array:
    out = np.exp(a.data)

    def back(g, grads):
        grads[0] = g * out

    return _make(out, (a,), back)


def log(a: Array) -> Array:
    out = np.log(a.data)

    def back(g, grads):
        grads[0] = g / a.data

    return _make(out, (a,), back)


def sigmoid(a: Array) -> Array:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def back(g, grads):
        grads[0] = g * out * (1.0 - out)

    return _make(out, (a,), back)


def power(a: Array, p: float) -> Array:
    out = np.power(a.data, p)

    def back(g, grads):
        grads[0] = g * p * np.power(a.data, p - 1.0)

    return _make(out, (a,), back)


def clamp(a: Array, lo: float, hi: float) -> Array:
    out = np.clip(a.data, lo, hi)

    def back(g, grads):
        grads[0] = g * ((a.data > lo) & (a.data < hi))

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Array, axis=None, keepdims=False) -> Array:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g, grads):
        if axis is None:
            grads[0] = np.full_like(a.data, 1.0) * g
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            grads[0] = np.broadcast_to(g, a.shape).copy()

    return _make(out, (a,), back)


def mean(a: Array, axis=None, keepdims=False) -> Array:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def max_detached(a: Array, axis=None, keepdims=False) -> Array:
    """Max with no gradient; used for numerically stable shifts."""
    return constant(a.data.max(axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# composite neural ops


def softmax(a: Array, axis: int) -> Array:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g, grads):
        dot = (g * out).sum(axis=axis, keepdims=True)
        grads[0] = out * (g - dot)

    return _make(out, (a,), back)


def layer_norm(x: Array, scale: Array, shift: Array, eps: float = 1e-6) -> Array:
    """Normalize over the last axis, then apply learnable scale and shift."""
    if scale.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: scale/shift shapes {scale.shape}/{shift.shape} "
            f"do not match last axis of {x.shape}"
        )
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return mul(centered, inv) * scale + shift


def cosine_similarity(a: Array, b: Array) -> Array:
    """Cosine of the angle between two 1-D arrays."""
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_similarity: need equal 1-D shapes, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm vector")
    num = sum_(mul(a, b))
    den = mul(power(sum_(mul(a, a)), 0.5), power(sum_(mul(b, b)), 0.5))
    return div(num, den)


def nuclear_norm(a: Array) -> Array:
    """Sum of singular values of a 2-D array."""
    if a.ndim != 2:
        raise ShapeError(f"nuclear_norm: need a 2-D array, got shape {a.shape}")
    u, s, vt = np.linalg.svd(a.data, full_matrices=False)
    out = s.sum()

    def back(g, grads):
        grads[0] = g * (u @ vt)

    return _make(out, (a,), back)


def cross_entropy(logits: Array, labels) -> Array:
    """Mean cross-entropy of integer labels against rows of logits."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    shifted = logits - max_detached(logits, axis=1, keepdims=True)
    lse = log(sum_(exp(shifted), axis=1, keepdims=True))
    logp = shifted - lse
    picked = gather_rows(logp, labels)
    return neg(mean(picked))


# ---------------------------------------------------------------------------
# backward pass


class GradTape:
    """Record of one backward pass: nodes in reverse execution order and
    the gradient accumulated for each parameter identity."""

    def __init__(self, order, grads_by_id):
        self.order = order
        self.grads_by_id = grads_by_id

    def grad(self, param: Array) -> np.ndarray:
        return self.grads_by_id[id(param)]


def _topo_order(root: Array):
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Array, params=None) -> GradTape:
    """Populate .grad on every requires_grad Array reachable from loss.

    Parameters listed in `params` but unreachable from the loss get zero
    gradients of matching shape.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    acc = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        grads = [None] * len(node._parents)
        node._backward(g, grads)
        for p, pg in zip(node._parents, grads):
            if pg is None:
                continue
            if id(p) in acc:
                acc[id(p)] = acc[id(p)] + pg
            else:
                acc[id(p)] = pg
    grads_by_id = {}
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            grads_by_id[id(p)] = p.grad
    else:
        for node in order:
            if node.requires_grad and node.grad is not None:
                grads_by_id[id(node)] = node.grad
    return GradTape(list(reversed(order)), grads_by_id)


# ---------------------------------------------------------------------------
# finite-difference verification


class GradCheckResult:
    def __init__(self, max_rel_error, worst_param, skipped):
        self.max_rel_error = max_rel_error
        self.worst_param = worst_param
        self.skipped = skipped  # list of (param_name, flat_index)

    def __float__(self):
        return self.max_rel_error

    def __repr__(self):
        return (
            f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
            f"worst_param={self.worst_param!r}, skipped={len(self.skipped)})"
        )


def grad_check_detailed(loss_fn, params, step: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients of loss_fn(params) to central differences.

    Entries where the two one-sided difference quotients disagree (a kink,
    e.g. relu at 0) are flagged as skipped rather than failed. loss_fn must
    be deterministic; this is verified by evaluating it twice.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    v1 = float(loss_fn().data)
    v2 = float(loss_fn().data)
    if v1 != v2:
        raise ValueError(f"grad_check: loss_fn is not deterministic ({v1!r} != {v2!r})")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss, params=params)
    analytic = [p.grad.copy() for p in params]

    max_err = 0.0
    worst = None
    skipped = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(loss_fn().data)
            flat[j] = orig - step
            f_minus = float(loss_fn().data)
            flat[j] = orig
            central = (f_plus - f_minus) / (2.0 * step)
            d_plus = (f_plus - v1) / step
            d_minus = (v1 - f_minus) / step
            if abs(d_plus - d_minus) > 1e-2 * max(1.0, abs(d_plus), abs(d_minus)):
                skipped.append((p.name or f"param{pi}", j))
                continue
            a = float(analytic[pi].reshape(-1)[j])
            err = abs(a - central) / max(1.0, abs(central))
            if err > max_err:
                max_err = err
                worst = (p.name or f"param{pi}", j)
    return GradCheckResult(max_err, worst, skipped)


def grad_check(loss_fn, params, step: float = 1e-5) -> float:
    return grad_check_detailed(loss_fn, params, step).max_rel_error

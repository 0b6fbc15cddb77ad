"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (adapter, fusion, decoder, training) is built from the
ops here. All scalars are double precision; the finite-difference checks in
the test suite rely on that headroom. Ops validate their outputs: a NaN/Inf
produced from finite inputs raises instead of propagating.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class MaskError(ValueError):
    """An attention mask leaves some query row with no permitted key."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf values."""


class TapeError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, untracked loss, or replay without reset."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer steps, FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional float64 array plus its place in the autodiff graph.

    Leaf tensors are created directly; op outputs carry references to their
    parents and a gradient closure. Gradients accumulate additively into
    ``.grad``; the caller zeroes them between optimizer steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None
        self._op = "leaf"
        self._backward_done = False

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
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r})"

    # arithmetic sugar; every path goes through the module-level ops
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the differentiable ops reachable from a root tensor.

    The order is topological (parents before consumers), so iterating it in
    reverse is a valid reverse-pass order.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad ancestor of a scalar loss.

    Gradients accumulate additively across fan-out. Running backward twice on
    the same result without rebuilding the graph raises: re-run the forward
    pass to differentiate again.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise TapeError("backward already ran for this result; rebuild the graph before replaying")
    if not loss.requires_grad:
        raise TapeError("loss was not produced by taped operations (no tracked ancestors)")
    tape = Tape.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._grad_fn is None or node.grad is None:
            continue
        parent_grads = node._grad_fn(node.grad)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += pg
    loss._backward_done = True


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str,
            check_finite: bool = True) -> Tensor:
    if check_finite and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._backward_done = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_data(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a.data, b.data


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = _broadcast_data(a, b, "add")
    data = ad + bd

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = _broadcast_data(a, b, "sub")
    data = ad - bd

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = _broadcast_data(a, b, "mul")
    data = ad * bd

    def grad_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = _broadcast_data(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _result(data, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _coerce(a)

    def grad_fn(g):
        return (-g,)

    return _result(-a.data, (a,), grad_fn, "neg")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), grad_fn, "matmul")


def transpose(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def grad_fn(g):
        return (g.T,)

    return _result(a.data.T.copy(), (a,), grad_fn, "transpose")


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), grad_fn, "reshape")


def tsum(a) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = _coerce(a)

    def grad_fn(g):
        return (np.full(a.shape, float(g)),)

    return _result(np.asarray(a.data.sum()), (a,), grad_fn, "tsum")


def tmean(a) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    a = _coerce(a)
    n = a.size

    def grad_fn(g):
        return (np.full(a.shape, float(g) / n),)

    return _result(np.asarray(a.data.mean()), (a,), grad_fn, "tmean")


def gelu(a) -> Tensor:
    """Gaussian-error linear unit (tanh form); the backward differentiates the same form."""
    a = _coerce(a)
    c = math.sqrt(2.0 / math.pi)
    k = 0.044715
    x = a.data
    inner = c * (x + k * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = c * (1.0 + 3.0 * k * x ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        return (g * dx,)

    return _result(data, (a,), grad_fn, "gelu")


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction. Each output row sums to 1."""
    a = _coerce(a)
    if a.ndim != 2 or a.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects a matrix with at least one column, got {a.shape}")
    with np.errstate(invalid="ignore"):
        z = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (a,), grad_fn, "softmax_rows")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (which may be -inf).

    Gradient is blocked at filled positions. Unfilled entries are still
    finite-checked.
    """
    a = _coerce(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} != data shape {a.shape}")
    data = np.where(mask, value, a.data)
    if not np.isfinite(data[~mask]).all():
        raise NumericError("masked_fill produced non-finite values outside the mask")

    def grad_fn(g):
        return (np.where(mask, 0.0, g),)

    return _result(data, (a,), grad_fn, "masked_fill", check_finite=False)


def scaled_dot_attention(q, k, val, mask: Optional[np.ndarray] = None,
                         return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d)) · val, with an optional boolean permission mask.

    ``mask[i, j]`` True means query row i may attend key j. A query row with
    no permitted key is a degenerate mask and raises. With ``return_weights``
    the row-stochastic attention matrix comes back alongside the output.
    """
    q, k, val = _coerce(q), _coerce(k), _coerce(val)
    if q.ndim != 2 or k.ndim != 2 or val.ndim != 2:
        raise ShapeError("scaled_dot_attention expects matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"scaled_dot_attention: query width {q.shape} vs key width {k.shape}")
    if k.shape[0] != val.shape[0]:
        raise ShapeError(f"scaled_dot_attention: {k.shape[0]} keys vs {val.shape[0]} values")
    d = q.shape[1]
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(f"attention mask shape {mask.shape} != {(q.shape[0], k.shape[0])}")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise MaskError(f"attention mask permits no key for query row {bad}")
        scores = masked_fill(scores, ~mask, -np.inf)
    weights = softmax_rows(scores)
    out = matmul(weights, val)
    if return_weights:
        return out, weights
    return out


def conv2d_nonoverlap(image, kernel, bias) -> Tensor:
    """Stride-p patchwise convolution (patch embedding).

    image: H x W x Cin with H, W multiples of p; kernel: p x p x Cin x Cout;
    bias: Cout. Output: (H/p) x (W/p) x Cout.
    """
    image, kernel, bias = _coerce(image), _coerce(kernel), _coerce(bias)
    if image.ndim != 3:
        raise ShapeError(f"conv2d_nonoverlap expects an H x W x C image, got {image.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d_nonoverlap expects a p x p x Cin x Cout kernel, got {kernel.shape}")
    p = kernel.shape[0]
    h, w, cin = image.shape
    if kernel.shape[2] != cin:
        raise ShapeError(f"kernel input channels {kernel.shape[2]} != image channels {cin}")
    if h % p or w % p:
        raise ShapeError(
            f"image extents {h}x{w} are not multiples of patch size {p}; "
            "pad the image first (pad_to_patch_grid)")
    cout = kernel.shape[3]
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    patches = extract_patches(image, p)
    out = matmul(patches, reshape(kernel, (p * p * cin, cout))) + bias
    return reshape(out, (h // p, w // p, cout))


def extract_patches(image, p: int) -> Tensor:
    """Rearrange an aligned H x W x C image into (H/p · W/p) rows of p·p·C patch values."""
    image = _coerce(image)
    h, w, c = image.shape
    gh, gw = h // p, w // p
    data = image.data.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)

    def grad_fn(g):
        gi = g.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
        return (gi,)

    return _result(np.ascontiguousarray(data), (image,), grad_fn, "extract_patches")


def pad_bottom_right(image, new_h: int, new_w: int) -> Tensor:
    """Zero-pad an H x W x C image on the bottom/right edges."""
    image = _coerce(image)
    h, w, c = image.shape
    if new_h < h or new_w < w:
        raise ShapeError(f"pad target {new_h}x{new_w} smaller than image {h}x{w}")
    if new_h == h and new_w == w:
        return image
    data = np.zeros((new_h, new_w, c), dtype=np.float64)
    data[:h, :w] = image.data

    def grad_fn(g):
        return (g[:h, :w].copy(),)

    return _result(data, (image,), grad_fn, "pad_bottom_right")


def layer_norm(a, gain, shift, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (epsilon-stabilized), then affine."""
    a, gain, shift = _coerce(a), _coerce(gain), _coerce(shift)
    d = a.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: gain/shift must be ({d},), got {gain.shape}/{shift.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = gain.data * xhat + shift.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else (g * xhat)
        dshift = g.sum(axis=lead) if lead else g
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, np.asarray(dgain), np.asarray(dshift)

    return _result(data, (a, gain, shift), grad_fn, "layer_norm")


def cross_entropy_next_token(logits, targets) -> Tensor:
    """Mean over positions of -log softmax(logits)[target].

    logits: L x V; targets: L integer ids, each < V.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects L x V logits, got {logits.shape}")
    ids = np.asarray(targets, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {logits.shape[0]} logit rows vs {ids.shape} targets")
    n, v = logits.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = int(ids[(ids < 0) | (ids >= v)][0])
        raise IndexError(f"target id {bad} outside vocabulary of size {v}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    data = np.asarray(-logp[rows, ids].mean())

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, ids] -= 1.0
        return (float(g) * p / n,)

    return _result(data, (logits,), grad_fn, "cross_entropy_next_token")


def take_rows(weights, ids) -> Tensor:
    """Gather rows of a matrix by integer id (embedding lookup)."""
    weights = _coerce(weights)
    ids = np.asarray(ids, dtype=np.int64)
    if weights.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got {weights.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.shape[0]):
        bad = int(ids[(ids < 0) | (ids >= weights.shape[0])][0])
        raise IndexError(f"row id {bad} outside table of {weights.shape[0]} rows")

    def grad_fn(g):
        gw = np.zeros_like(weights.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _result(weights.data[ids].copy(), (weights,), grad_fn, "take_rows")


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows[{start}:{stop}] invalid for shape {a.shape}")

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _result(a.data[start:stop].copy(), (a,), grad_fn, "slice_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols[{start}:{stop}] invalid for shape {a.shape}")

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _result(a.data[:, start:stop].copy(), (a,), grad_fn, "slice_cols")


def _concat(parts: Iterable, axis: int, op: str) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError(f"{op} needs at least one part")
    other = 1 - axis
    widths = {p.shape[other] for p in parts if p.ndim == 2}
    if any(p.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError(f"{op}: incompatible part shapes {[p.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1]].copy() for i in range(len(parts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(parts)))

    return _result(data, tuple(parts), grad_fn, op)


def concat_rows(parts) -> Tensor:
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts) -> Tensor:
    return _concat(parts, 1, "concat_cols")

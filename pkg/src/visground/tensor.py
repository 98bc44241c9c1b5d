"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the grounding model needs are provided. Every op accepts
arrays with arbitrary leading (batch) dimensions and broadcasts the way numpy
does; adjoints undo broadcasting by summing over the expanded axes.

Recording is explicit: operations are appended to the innermost active
:class:`Tape`. Outside of a tape nothing is recorded and ops are plain numpy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "finite_difference_check",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "exp",
    "absolute",
    "maximum",
    "minimum",
    "clamp_min",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "index",
    "concat",
    "embedding",
    "gather_last",
]

_TAPES: list["Tape"] = []

# Test hook used by the gradient-check CLI to prove the checker is sensitive:
# maps op name -> multiplier applied to that op's input adjoints.
ADJOINT_FAULTS: dict[str, float] = {}


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered log of executed differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._tape = tape
        if op in ADJOINT_FAULTS:
            vjp = _faulty(vjp, ADJOINT_FAULTS[op])
        tape.record(_Node(op, tuple(inputs), out, vjp))
    return out


def _faulty(vjp: Callable, k: float) -> Callable:
    def scaled(g):
        return tuple(None if a is None else a * k for a in vjp(g))

    return scaled


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# -- elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sgn,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the whole adjoint to ``a``."""
    a, b = _coerce_pair(a, b)
    pick = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _emit(
        "maximum",
        np.where(pick, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick, sa), _unbroadcast(g * ~pick, sb)),
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the whole adjoint to ``a``."""
    a, b = _coerce_pair(a, b)
    pick = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _emit(
        "minimum",
        np.where(pick, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick, sa), _unbroadcast(g * ~pick, sb)),
    )


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    out = np.where(keep, x.data, x.dtype.type(lo))
    return _emit("clamp_min", out, (x,), lambda g: (g * keep,))


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", out, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects last dim {weight.shape[1]}, got input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", out, inputs, vjp)


# -- normalisation -----------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (broadcastable bool) marks entries kept."""
    d = x.data
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine params {gamma.shape}/{beta.shape} vs input {x.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        n = d.shape[-1]
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        ggamma = (g2 * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        return gx, ggamma, gbeta

    return _emit("layer_norm", out.astype(d.dtype), (x, gamma, beta), vjp)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    d = x.data
    norm = np.sqrt((d * d).sum(axis=axis, keepdims=True))
    active = norm >= eps
    den = np.where(active, norm, eps)
    out = d / den

    def vjp(g):
        # below eps the map is x/eps, linear
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * proj) / den, g / eps),)

    return _emit("l2_normalize", out, (x,), vjp)


# -- shape ------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def index(x: Tensor, key) -> Tensor:
    shape = x.shape
    out = x.data[key]

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("index", np.array(out), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    return _emit("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate in the adjoint."""
    ids = np.asarray(ids, dtype=np.intp)
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _emit("embedding", table.data[ids], (table,), vjp)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., i, j] = x[..., i, idx[i, j]]``.

    Within each row ``idx[i]`` must be injective; the adjoint is then a plain
    scatter with no collisions.
    """
    rows = np.arange(idx.shape[0])[:, None]
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., rows, idx] = g
        return (gx,)

    return _emit("gather_last", x.data[..., rows, idx], (x,), vjp)


# -- differentiation --------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf recorded on the tape.

    Leaf gradients from one pass are summed privately and then added to the
    existing ``.grad`` in a single step, so repeated passes accumulate exactly.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape")

    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._tape is None:
                leaves.setdefault(id(t), t)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            target = leaf_grads if t._tape is None else grads
            key = id(t)
            prev = target.get(key)
            target[key] = gi if prev is None else prev + gi

    for key, t in leaves.items():
        g = leaf_grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def finite_difference_check(
    f: Callable[[], Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    kink_safe: bool = False,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument closure that rebuilds the scalar from the current
    contents of ``x``. ``x`` may be one tensor or several; all must be 64-bit.
    With ``max_entries`` only that many randomly chosen components per tensor
    are probed.

    With ``kink_safe`` each stencil is checked for a flipped branch in a
    piecewise op (relu, abs, max/min, clamp). A stencil that straddles a kink
    is not measuring the derivative, so the step is cut by 10x (at most three
    times) for that component.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ContractError(f"finite differences need float64, got {t.dtype} for {t.name or 'tensor'}")
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f()
    _check_finite(out)
    backward(out, tape)
    analytic = [t.grad.copy() for t in xs]
    base_sig = _branches(tape) if kink_safe else None
    tape.clear()

    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        gflat = ga.reshape(-1)
        for i in picks:
            orig = flat[i]
            step = h
            for _ in range(4):
                flat[i] = orig + step
                fp, sig_p = _probe(f, kink_safe)
                flat[i] = orig - step
                fm, sig_m = _probe(f, kink_safe)
                flat[i] = orig
                if not kink_safe or _same_branches(base_sig, sig_p, sig_m):
                    break
                step /= 10
            num = (fp - fm) / (2 * step)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    for t, (rg, g) in zip(xs, saved):
        t.requires_grad, t.grad = rg, g
    return worst


_PIECEWISE = ("relu", "abs", "maximum", "minimum", "clamp_min")


def _branches(tape: Tape) -> list[np.ndarray]:
    sig = []
    for node in tape.nodes:
        if node.op not in _PIECEWISE:
            continue
        a = node.inputs[0].data
        if node.op in ("maximum", "minimum"):
            sig.append(np.sign(a - node.inputs[1].data))
        elif node.op == "clamp_min":
            sig.append(node.out.data == a)
        else:
            sig.append(np.sign(a))
    return sig


def _probe(f: Callable[[], Tensor], record: bool):
    if not record:
        return _check_finite(f()).item(), None
    with Tape() as tape:
        value = _check_finite(f()).item()
    sig = _branches(tape)
    tape.clear()
    return value, sig


def _same_branches(base, *others) -> bool:
    return all(len(o) == len(base) and all(np.array_equal(a, b) for a, b in zip(base, o)) for o in others)


def _check_finite(t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError("non-finite value in function under check")
    if t.size != 1:
        raise ContractError(f"checked function must return a scalar, got {t.shape}")
    return t

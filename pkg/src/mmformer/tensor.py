"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every op records its inputs and a closure mapping the output gradient to
input gradients. ``backward`` walks the graph in reverse topological order.
Storage is a numpy array; all arithmetic is float64.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count(1)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer steps)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "op", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id = next(_ids)
        self.op = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), bw, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def dropout(a, mask: np.ndarray | None, keep_prob: float) -> Tensor:
    """Inverted dropout driven by an externally drawn 0/1 mask.

    ``mask=None`` is the inference path and returns ``a`` untouched.
    """
    a = as_tensor(a)
    if mask is None:
        return a
    m = np.asarray(mask, dtype=np.float64) / keep_prob
    return _node(a.data * m, (a,), lambda g: (g * m,), "dropout")


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the last axis of ``x``; leading axes are batch."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    y = reshape(y, lead + (y.shape[-1],))
    return y if b is None else add(y, b)


def _einsum2(spec: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-operand einsum (no repeated letters) as one batched matmul."""
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    # letters appearing in only one operand and not the output are summed first
    ra = "".join(ch for ch in sa if ch in sb or ch in out)
    rb = "".join(ch for ch in sb if ch in sa or ch in out)
    if ra != sa:
        a = a.sum(axis=tuple(k for k, ch in enumerate(sa) if ch not in ra))
    if rb != sb:
        b = b.sum(axis=tuple(k for k, ch in enumerate(sb) if ch not in rb))
    batch = [ch for ch in ra if ch in rb and ch in out]
    contr = [ch for ch in ra if ch in rb and ch not in out]
    a_only = [ch for ch in ra if ch not in rb]
    b_only = [ch for ch in rb if ch not in ra]
    size = dict(zip(ra, a.shape)) | dict(zip(rb, b.shape))
    prod = lambda letters: math.prod(size[ch] for ch in letters)
    am = np.transpose(a, [ra.index(ch) for ch in batch + a_only + contr]).reshape(
        prod(batch), prod(a_only), prod(contr))
    bm = np.transpose(b, [rb.index(ch) for ch in batch + contr + b_only]).reshape(
        prod(batch), prod(contr), prod(b_only))
    res = np.matmul(am, bm).reshape([size[ch] for ch in batch + a_only + b_only])
    order = batch + a_only + b_only
    return np.transpose(res, [order.index(ch) for ch in out])


def _einsum(spec: str, *arrays) -> np.ndarray:
    if len(arrays) == 2:
        return _einsum2(spec, *arrays)
    return np.einsum(spec, *arrays, optimize=len(arrays) > 2)


def einsum(spec: str, *operands) -> Tensor:
    """einsum without repeated subscripts inside one operand.

    Diagonals are handled by ``contract``/``expand``; this keeps the
    backward rule a plain einsum with the operands rotated.
    """
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != len(ops):
        raise ValueError(f"einsum spec {spec!r} expects {len(subs)} operands")
    sizes: dict[str, int] = {}
    for s, t in zip(subs, ops):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated subscript in {s!r}; use contract() for diagonals")
        if len(s) != t.ndim:
            raise ValueError(f"einsum operand {s!r} does not match shape {t.shape}")
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise ValueError(f"einsum size mismatch on {ch!r}: {sizes[ch]} vs {n}")
    spec = spec.replace(" ", "")
    out = _einsum(spec, *[t.data for t in ops])

    def bw(g):
        grads = []
        for k, (s, t) in enumerate(zip(subs, ops)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(subs[q], ops[q].data) for q in range(len(ops)) if q != k]
            avail = set(out_sub).union(*[set(q) for q, _ in others])
            kept = "".join(ch for ch in s if ch in avail)
            in_spec = ",".join([out_sub] + [q for q, _ in others]) + "->" + kept
            gk = _einsum(in_spec, g, *[d for _, d in others])
            if kept != s:
                shape = [sizes[ch] if ch in kept else 1 for ch in s]
                src = [kept.index(ch) for ch in s if ch in kept]
                gk = np.transpose(gk, src) if src else gk
                gk = np.broadcast_to(gk.reshape(shape), t.shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _node(out, ops, bw, "einsum")


def contract(x, src: str, dst: str) -> Tensor:
    """Sum/diagonal-extract: ``np.einsum(src->dst)`` where ``src`` may repeat letters."""
    x = as_tensor(x)
    out = np.einsum(f"{src}->{dst}", x.data)
    shape = x.shape
    return _node(out, (x,), lambda g: (_expand_array(g, dst, src, shape),), "contract")


def expand(x, src: str, dst: str, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``contract``: broadcast ``x`` over letters missing from ``src``
    and embed it on the diagonals implied by repeated letters of ``dst``."""
    x = as_tensor(x)
    out = _expand_array(x.data, src, dst, tuple(shape))
    return _node(out, (x,), lambda g: (np.einsum(f"{dst}->{src}", g),), "expand")


def scatter_sum(parts: Sequence[tuple], shape: tuple[int, ...]) -> Tensor:
    """Fused sum of ``expand(contract(t[..., sl], src, kept), kept, dst)`` terms.

    Each part is ``(tensor, src, dst, sl)``; ``sl`` optionally slices the last
    axis of ``tensor`` (``None`` = whole tensor). Letters of ``src`` missing
    from ``dst`` are summed, letters of ``dst`` missing from ``src`` are
    broadcast, repeated letters are diagonals. Parts landing on the same
    output pattern are summed at their reduced size before one broadcast.
    """
    inputs: list[Tensor] = []
    index: dict[int, int] = {}
    groups: dict[tuple[str, str], list] = {}
    for t, src, dst, sl in parts:
        t = as_tensor(t)
        if t.tape_id not in index:
            index[t.tape_id] = len(inputs)
            inputs.append(t)
        uniq = "".join(dict.fromkeys(dst))
        kept = "".join(ch for ch in uniq if ch in src)
        groups.setdefault((dst, kept), []).append((index[t.tape_id], src, sl))

    def piece(k, sl):
        return inputs[k].data if sl is None else inputs[k].data[..., sl]

    out = np.zeros(shape)
    for (dst, kept), members in groups.items():
        acc = None
        for k, src, sl in members:
            small = np.einsum(f"{src}->{kept}", piece(k, sl)) if src != kept else piece(k, sl)
            acc = small.copy() if acc is None else acc.__iadd__(small)
        _accumulate(out, acc, kept, dst)

    def bw(g):
        grads = [None] * len(inputs)
        for (dst, kept), members in groups.items():
            gs = np.einsum(f"{dst}->{kept}", g)
            for k, src, sl in members:
                t = inputs[k]
                gk = gs if kept == src else _expand_array(gs, kept, src, piece(k, sl).shape)
                if grads[k] is None:
                    grads[k] = np.zeros(t.shape)
                if sl is None:
                    grads[k] += gk
                else:
                    grads[k][..., sl] += gk
        return tuple(grads)

    return _node(out, inputs, bw, "scatter_sum")


def _accumulate(out: np.ndarray, small: np.ndarray, src: str, dst: str) -> None:
    uniq = "".join(dict.fromkeys(dst))
    view = np.einsum(f"{dst}->{uniq}", out) if uniq != dst else out
    perm = [src.index(ch) for ch in uniq if ch in src]
    arranged = np.transpose(small, perm) if perm != list(range(small.ndim)) else small
    bshape = [view.shape[k] if ch in src else 1 for k, ch in enumerate(uniq)]
    view += arranged.reshape(bshape)


def _expand_array(small: np.ndarray, src: str, dst: str, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    _accumulate(out, small, src, dst)
    return out


# ---------------------------------------------------------------------------
# shape algebra


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    gather = _gather_axes(idx, shape)

    def bw(g):
        full = np.zeros(shape)
        if gather is None:
            np.add.at(full, idx, g)
            return (full,)
        lead, axes, flat = gather
        # (lead..., E, rest...) -> sum rows sharing a flat index via one sparse-free matmul
        n_idx = math.prod(shape[a] for a in axes)
        onehot = np.zeros((n_idx, flat.size))
        onehot[flat, np.arange(flat.size)] = 1.0
        rest = shape[lead + len(axes):]
        gm = np.moveaxis(g.reshape(shape[:lead] + (flat.size, -1)), lead, -2)
        summed = np.moveaxis(onehot @ gm, -2, lead)
        return (summed.reshape(shape[:lead] + tuple(shape[a] for a in axes) + rest),)

    return _node(x.data[idx], (x,), bw, "getitem")


def _gather_axes(idx, shape):
    """Recognise ``(slice(None),)*k + (int arrays...)`` indexing; return (k, axes, flat index)."""
    if not isinstance(idx, tuple):
        return None
    lead = 0
    while lead < len(idx) and isinstance(idx[lead], slice) and idx[lead] == slice(None):
        lead += 1
    arrs = idx[lead:]
    if not arrs or not all(isinstance(a, np.ndarray) and a.ndim == 1 and a.dtype.kind == "i" for a in arrs):
        return None
    if len({a.shape for a in arrs}) != 1:
        return None
    axes = tuple(range(lead, lead + len(arrs)))
    flat = np.ravel_multi_index(arrs, tuple(shape[a] for a in axes))
    if math.prod(shape[a] for a in axes) * flat.size > 4_000_000:
        return None
    return lead, axes, flat


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            a != b for k, (a, b) in enumerate(zip(t.shape, ts[0].shape)) if k != ax
        ):
            raise ValueError(f"concat shape mismatch: {ts[0].shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        lead = (slice(None),) * ax
        return tuple(g[lead + (slice(bounds[k], bounds[k + 1]),)] for k in range(len(ts)))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _node(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, k, axis=axis) for k in range(len(ts))),
        "stack",
    )


def reduce(x, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = tuple(range(x.ndim)) if axis is None else tuple(np.atleast_1d(axis) % max(x.ndim, 1))
    count = math.prod(shape[a] for a in axes) if axes else 1
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
    elif kind == "max":
        out = x.data.max(axis=axes, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        if kind == "sum":
            return (np.broadcast_to(gk, shape).copy(),)
        if kind == "mean":
            return (np.broadcast_to(gk / count, shape).copy(),)
        ok = out if keepdims else np.expand_dims(out, axes)
        hit = x.data == ok
        # ties share the gradient evenly
        return (hit * gk / hit.sum(axis=axes, keepdims=True),)

    return _node(np.asarray(out), (x,), bw, f"reduce_{kind}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        gs = g * out
        gs -= out * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return _node(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance over the last axis (composed from tape ops)."""
    x = as_tensor(x)
    xc = sub(x, reduce(x, axis=-1, kind="mean", keepdims=True))
    var = reduce(mul(xc, xc), axis=-1, kind="mean", keepdims=True)
    return div(xc, sqrt(add(var, eps)))


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix (max-subtracted)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


# ---------------------------------------------------------------------------
# mode algebra (1-based modes, as in tensor notation)


def matricize(t, m: int) -> Tensor:
    """Mode-m unfolding: rows index mode m, columns run row-major over the
    remaining modes in ascending order."""
    t = as_tensor(t)
    if not 1 <= m <= t.ndim:
        raise ValueError(f"mode {m} out of range for a rank-{t.ndim} tensor")
    moved = transpose(t, [m - 1] + [k for k in range(t.ndim) if k != m - 1])
    return reshape(moved, (t.shape[m - 1], -1))


def dematricize(mat, m: int, shape: Sequence[int]) -> Tensor:
    mat = as_tensor(mat)
    shape = tuple(shape)
    if not 1 <= m <= len(shape):
        raise ValueError(f"mode {m} out of range for a rank-{len(shape)} tensor")
    rest = [shape[k] for k in range(len(shape)) if k != m - 1]
    t = reshape(mat, (shape[m - 1], *rest))
    inv = list(range(1, m)) + [0] + list(range(m, len(shape)))
    return transpose(t, inv)


def permute_modes(t, perm: Sequence[int]) -> Tensor:
    """Output mode k is input mode perm[k] (1-based)."""
    t = as_tensor(t)
    if sorted(perm) != list(range(1, t.ndim + 1)):
        raise ValueError(f"{tuple(perm)} is not a permutation of 1..{t.ndim}")
    return transpose(t, [p - 1 for p in perm])


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Sets ``.grad`` on every requires_grad leaf reachable from ``loss``
    (overwriting previous values) and returns ``{tape_id: grad}`` for them.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the tape (no input requires grad)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.tape_id in seen:
            continue
        seen.add(node.tape_id)
        stack_.append((node, True))
        for inp in node._inputs:
            if inp.requires_grad and inp.tape_id not in seen:
                stack_.append((inp, False))

    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(node.tape_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node.tape_id] = g
            continue
        for inp, gi in zip(node._inputs, node._backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape_id in grads:
                grads[inp.tape_id] = grads[inp.tape_id] + gi
            else:
                grads[inp.tape_id] = gi
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |central difference|)."""
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    backward(f(x))
    auto = x.grad if x.grad is not None else np.zeros_like(x0)
    worst = 0.0
    flat = x0.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            hi, lo = flat.copy(), flat.copy()
            hi[k] += eps
            lo[k] -= eps
            fd = (f(Tensor(hi.reshape(x0.shape))).item() - f(Tensor(lo.reshape(x0.shape))).item()) / (2 * eps)
            worst = max(worst, abs(auto.reshape(-1)[k] - fd) / max(1.0, abs(fd)))
    return worst

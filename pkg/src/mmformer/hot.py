"""Per-block encoder: MLP unit and higher-order transformer (HoT) branches.

Attention classes are set partitions of the m+n index positions (inputs
first). A pair (i, j) lies on the support of class ``rgs`` when indices
sharing a block are equal. For a fixed output index j the support is
parameterised by the "free" blocks (input-only blocks); coefficients are
normalised over exactly those.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .equivariant import EquivariantLinear, bell, enumerate_partitions
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, parameter

_J_LETTERS = "ABCDEF"
_FREE_LETTERS = "PQRSTU"

SUPPORTED_ORDERS = {(1, 1), (1, 2), (1, 3), (2, 2), (3, 3), (2, 1), (2, 3), (3, 1), (3, 2), (1, 4)}
EXACT_MAX_J = 8


@dataclass(frozen=True)
class ClassPlan:
    rgs: tuple[int, ...]
    i_letters: str  # one letter per input mode (repeats = ties)
    j_letters: str  # one letter per output mode
    uj: str  # distinct output letters in order
    ui: str  # distinct input letters in order
    free: str  # input-only letters, normalised over

    @property
    def linked(self) -> str:
        return "".join(c for c in self.ui if c in self.uj)


def class_plan(rgs, m: int) -> ClassPlan:
    ins, outs = rgs[:m], rgs[m:]
    names: dict[int, str] = {}
    for b in outs:
        names.setdefault(b, _J_LETTERS[len(names)])
    n_free = 0
    for b in ins:
        if b not in names:
            names[b] = _FREE_LETTERS[n_free]
            n_free += 1
    i_l = "".join(names[b] for b in ins)
    j_l = "".join(names[b] for b in outs)
    uj = "".join(dict.fromkeys(j_l))
    ui = "".join(dict.fromkeys(i_l))
    free = "".join(c for c in ui if c not in uj)
    return ClassPlan(tuple(rgs), i_l, j_l, uj, ui, free)


def performer_features(x, omega) -> Tensor:
    """Positive random features: exp(omega_i . x - |x|^2 / 2) / sqrt(d_K) along the last axis."""
    x = T.as_tensor(x)
    omega = np.asarray(omega, dtype=np.float64)
    d_k = omega.shape[0]
    proj = T.linear(x, Tensor(omega.T))
    sq = T.scale(T.reduce(T.mul(x, x), axis=-1, keepdims=True), 0.5)
    return T.scale(T.exp(T.sub(proj, sq)), 1.0 / np.sqrt(d_k))


class HoTLayer(Module):
    """f_{m->n}(X) = a_{m->n}(X) + L2(ReLU(L1(a_{m->n}(X)))).

    With ``norm`` each sub-layer output is layer-normalized over channels
    (post-norm), which keeps stacked attention stages at unit scale.

    ``qk`` chooses query/key layers per class ("per_class") or one pair per
    layer shared by every class ("shared"); "auto" is per-class when
    Bell(m+n) <= 15. Classes without free blocks have a single-element
    support, so their coefficient is identically 1 and they need no
    query/key layers.
    """

    def __init__(self, m: int, n: int, d: int, rng: np.random.Generator, heads: int = 4,
                 d_head: int | None = None, d_ff: int | None = None, d_k: int = 64,
                 classes=None, qk: str = "auto", ff_basis: str = "full", mode: str = "auto",
                 norm: bool = False):
        if (m, n) not in SUPPORTED_ORDERS:
            raise ValueError(f"unsupported attention orders (m, n) = ({m}, {n})")
        self.m, self.n, self.d, self.heads = m, n, d, heads
        self.d_head = d_head or max(1, d // heads)
        self.d_ff = d_ff or d
        self.d_k = d_k
        self.mode = mode
        self.classes = [tuple(c) for c in (classes or enumerate_partitions(m + n))]
        self.plans = [class_plan(c, m) for c in self.classes]
        if qk == "auto":
            qk = "per_class" if bell(m + n) <= 15 else "shared"
        if qk not in ("per_class", "shared"):
            raise ValueError(f"qk must be 'per_class', 'shared' or 'auto', got {qk!r}")
        self.qk = qk
        hd = heads * self.d_head
        needs_qk = [bool(p.free) for p in self.plans]
        if qk == "per_class":
            self.q_layers = [EquivariantLinear(m, n, d, hd, rng) if need else None for need in needs_qk]
            self.k_layers = [EquivariantLinear(m, m, d, hd, rng) if need else None for need in needs_qk]
        else:
            any_free = any(needs_qk)
            self.q_layers = [EquivariantLinear(m, n, d, hd, rng)] if any_free else [None]
            self.k_layers = [EquivariantLinear(m, m, d, hd, rng)] if any_free else [None]
        nc = len(self.classes)
        self.wv = parameter(rng.normal(0, 1 / np.sqrt(d), size=(nc, heads, d, self.d_head)))
        self.wo = parameter(rng.normal(0, 1 / np.sqrt(self.d_head * heads * nc), size=(nc, heads, self.d_head, d)))
        if ff_basis not in ("full", "pointwise"):
            raise ValueError(f"ff_basis must be 'full' or 'pointwise', got {ff_basis!r}")
        self.ff_basis = ff_basis
        if ff_basis == "full":
            self.l1 = EquivariantLinear(n, n, d, self.d_ff, rng, gain=np.sqrt(2.0))
            self.l2 = EquivariantLinear(n, n, self.d_ff, d, rng)
        else:
            self.l1 = _Pointwise(d, self.d_ff, rng, gain=np.sqrt(2.0))
            self.l2 = _Pointwise(self.d_ff, d, rng)
        self.omega = rng.normal(size=(d_k, self.d_head))
        self.norms = [LayerNorm(d), LayerNorm(d)] if norm else None

    # -- attention ---------------------------------------------------------
    def resolve_mode(self, J: int) -> str:
        if self.mode != "auto":
            return self.mode
        return "exact" if (self.m == 1 or J <= EXACT_MAX_J) else "performer"

    def _qk(self, c: int, x: Tensor, cache: dict):
        idx = c if self.qk == "per_class" else 0
        if idx not in cache:
            B, J = x.shape[0], x.shape[1]
            q = self.q_layers[idx](x)
            k = self.k_layers[idx](x)
            q = T.reshape(q, (B,) + (J,) * self.n + (self.heads, self.d_head))
            k = T.reshape(k, (B,) + (J,) * self.m + (self.heads, self.d_head))
            cache[idx] = (q, k)
        return cache[idx]

    def attention(self, x, mode: str | None = None) -> Tensor:
        x = T.as_tensor(x)
        B, J = x.shape[0], x.shape[1]
        mode = mode or self.resolve_mode(J)
        if mode not in ("exact", "performer"):
            raise ValueError(f"unknown attention mode {mode!r}")
        qk_cache: dict = {}
        xd_cache: dict = {}
        parts = []
        for c, p in enumerate(self.plans):
            if p.i_letters not in xd_cache:
                xd_cache[p.i_letters] = (x if p.ui == p.i_letters else
                                         T.contract(x, "z" + p.i_letters + "e", "z" + p.ui + "e"))
            xd = xd_cache[p.i_letters]
            vd = T.einsum(f"z{p.ui}e,hec->z{p.ui}hc", xd, self.wv[c])
            if not p.free:
                out = T.einsum(f"z{p.ui}hc,hcd->z{p.ui}d", vd, self.wo[c])
                parts.append((out, f"z{p.ui}d", f"z{p.j_letters}d", None))
                continue
            q, k = self._qk(c, x, qk_cache)
            qd = q if p.uj == p.j_letters else T.contract(q, f"z{p.j_letters}hc", f"z{p.uj}hc")
            kd = k if p.ui == p.i_letters else T.contract(k, f"z{p.i_letters}hc", f"z{p.ui}hc")
            if mode == "exact":
                alpha = self._exact_alpha(qd, kd, p)
                small = T.einsum(f"z{p.uj}h{p.free},z{p.ui}hc->z{p.uj}hc", alpha, vd)
            else:
                small = self._performer_mix(qd, kd, vd, p)
            out = T.einsum(f"z{p.uj}hc,hcd->z{p.uj}d", small, self.wo[c])
            parts.append((out, f"z{p.uj}d", f"z{p.j_letters}d", None))
        return T.scatter_sum(parts, (B,) + (J,) * self.n + (self.d,))

    @staticmethod
    def _exact_alpha(qd: Tensor, kd: Tensor, p: ClassPlan) -> Tensor:
        logits = T.einsum(f"z{p.uj}hc,z{p.ui}hc->z{p.uj}h{p.free}", qd, kd)
        lead = logits.shape[: logits.ndim - len(p.free)]
        flat = T.reshape(logits, lead + (-1,))
        return T.reshape(T.softmax(flat, axis=-1), logits.shape)

    def _performer_mix(self, qd: Tensor, kd: Tensor, vd: Tensor, p: ClassPlan) -> Tensor:
        fq = performer_features(qd, self.omega)
        fk = performer_features(kd, self.omega)
        lk = p.linked
        kv = T.einsum(f"z{p.ui}hk,z{p.ui}hc->z{lk}hkc", fk, vd)
        ksum = T.einsum(f"z{p.ui}hk->z{lk}hk", fk)
        num = T.einsum(f"z{p.uj}hk,z{lk}hkc->z{p.uj}hc", fq, kv)
        den = T.einsum(f"z{p.uj}hk,z{lk}hk->z{p.uj}h", fq, ksum)
        return T.div(num, T.reshape(den, den.shape + (1,)))

    def attention_at(self, x, tuples, mode: str | None = None) -> Tensor:
        """a_{m->n}(X) at output tuples with pairwise-distinct entries, shape (B, E, d).

        Classes tying two output indices vanish there, and the remaining
        classes are evaluated only at the requested rows.
        """
        x = T.as_tensor(x)
        tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, self.n)
        B, J = x.shape[0], x.shape[1]
        mode = mode or self.resolve_mode(J)
        if mode not in ("exact", "performer"):
            raise ValueError(f"unknown attention mode {mode!r}")
        q_cache: dict = {}
        k_cache: dict = {}
        total = None
        for c, p in enumerate(self.plans):
            if len(p.uj) != self.n:
                continue
            lk = p.linked
            order = lk + p.free
            # edge axis "n" replaces the linked joint axes; without linked axes
            # keys and values stay shared by every edge
            e = "n" if lk else ""
            xd = T.contract(x, "z" + p.i_letters + "e", "z" + order + "e")
            vd = T.einsum(f"z{order}e,hec->z{order}hc", xd, self.wv[c])
            if lk:
                vd = _gather(vd, lk, p.j_letters, tuples)
            if not p.free:
                out = vd
            else:
                idx = c if self.qk == "per_class" else 0
                if idx not in q_cache:
                    q = self.q_layers[idx].at(x, tuples)
                    q_cache[idx] = T.reshape(q, q.shape[:2] + (self.heads, self.d_head))
                    k = self.k_layers[idx](x)
                    k_cache[idx] = T.reshape(k, (B,) + (J,) * self.m + (self.heads, self.d_head))
                qd = q_cache[idx]
                kd = T.contract(k_cache[idx], f"z{p.i_letters}hc", f"z{order}hc")
                if lk:
                    kd = _gather(kd, lk, p.j_letters, tuples)
                f = p.free
                if mode == "exact":
                    logits = T.einsum(f"znhc,z{e}{f}hc->znh{f}", qd, kd)
                    lead = logits.shape[:3]
                    alpha = T.reshape(T.softmax(T.reshape(logits, lead + (-1,)), axis=-1), logits.shape)
                    out = T.einsum(f"znh{f},z{e}{f}hc->znhc", alpha, vd)
                else:
                    fq = performer_features(qd, self.omega)
                    fk = performer_features(kd, self.omega)
                    kv = T.einsum(f"z{e}{f}hk,z{e}{f}hc->z{e}hkc", fk, vd)
                    ksum = T.einsum(f"z{e}{f}hk->z{e}hk", fk)
                    num = T.einsum(f"znhk,z{e}hkc->znhc", fq, kv)
                    den = T.einsum(f"znhk,z{e}hk->znh", fq, ksum)
                    out = T.div(num, T.reshape(den, den.shape + (1,)))
            out = T.einsum("znhc,hcd->znd", out, self.wo[c])
            total = out if total is None else T.add(total, out)
        return total

    def coefficients(self, x) -> list[np.ndarray]:
        """Dense exact-mode attention tensors, one per class, shape (B, H, J^m, J^n)."""
        x = T.as_tensor(x)
        B, J = x.shape[0], x.shape[1]
        out = []
        with T.no_grad():
            cache: dict = {}
            for c, p in enumerate(self.plans):
                shape = (B, self.heads) + (J,) * (self.m + self.n)
                dst = "zh" + p.i_letters + p.j_letters
                if not p.free:
                    ones = np.ones((B, self.heads) + (J,) * len(p.uj))
                    out.append(T._expand_array(ones, "zh" + p.uj, dst, shape))
                    continue
                q, k = self._qk(c, x, cache)
                qd = T.contract(q, f"z{p.j_letters}hc", f"z{p.uj}hc")
                kd = T.contract(k, f"z{p.i_letters}hc", f"z{p.ui}hc")
                alpha = self._exact_alpha(qd, kd, p).data
                out.append(T._expand_array(alpha, f"z{p.uj}h{p.free}", dst, shape))
        return out

    def _feed_forward(self, a: Tensor) -> Tensor:
        if self.norms is not None:
            a = self.norms[0](a)
        out = T.add(a, self.l2(T.relu(self.l1(a))))
        return self.norms[1](out) if self.norms is not None else out

    def __call__(self, x, mode: str | None = None) -> Tensor:
        return self._feed_forward(self.attention(x, mode))

    def at(self, x, tuples, mode: str | None = None) -> Tensor:
        """Layer output at distinct-entry tuples; the feed-forward part is gathered
        from the full map unless it is pointwise, in which case nothing else is needed."""
        if self.ff_basis != "pointwise":
            full = self(x, mode)
            tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, self.n)
            return T.getitem(full, (slice(None),) + tuple(tuples.T))
        return self._feed_forward(self.attention_at(x, tuples, mode))


def _gather(t: Tensor, linked: str, j_letters: str, tuples: np.ndarray) -> Tensor:
    """Index the leading linked joint axes of ``t`` (after batch) at the tuple rows.

    Result has one edge axis in place of the linked axes; with no linked
    axes the tensor is repeated along a new edge axis.
    """
    if not linked:
        t = T.reshape(t, t.shape[:1] + (1,) + t.shape[1:])
        return T.getitem(t, (slice(None), np.zeros(len(tuples), dtype=np.int64)))
    cols = tuple(tuples[:, j_letters.index(ch)] for ch in linked)
    return T.getitem(t, (slice(None),) + cols)


class _Pointwise(Module):
    """Identity-pattern equivariant map: the same affine map at every position."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.lin = Linear(d_in, d_out, rng, gain=gain)

    def __call__(self, x) -> Tensor:
        return self.lin(x)


def transformer_attention_reference(x: np.ndarray, wq, wk, wv, wo) -> np.ndarray:
    """Standard multi-head self-attention with identity residual, per node.

    a(x_i) = x_i + sum_h sum_j alpha^h_ij x_j W^V_h W^O_h,
    alpha^h = rowsoftmax(X W^Q_h (X W^K_h)^T). Weights are stacked per head.
    """
    out = x.copy()
    for h in range(len(wq)):
        logits = (x @ wq[h]) @ (x @ wk[h]).T
        logits -= logits.max(axis=1, keepdims=True)
        alpha = np.exp(logits)
        alpha /= alpha.sum(axis=1, keepdims=True)
        out += alpha @ x @ wv[h] @ wo[h]
    return out


class MlpUnit(Module):
    """Per-joint block encoder: FC(CT->2CT), ReLU, FC(2CT->3CT), ReLU, Dropout, FC(3CT->d)."""

    def __init__(self, block_width: int, d: int, rng: np.random.Generator, drop: float = 0.1):
        self.fc1 = Linear(block_width, 2 * block_width, rng, gain=np.sqrt(2.0))
        self.fc2 = Linear(2 * block_width, 3 * block_width, rng, gain=np.sqrt(2.0))
        self.fc3 = Linear(3 * block_width, d, rng)
        self.drop = drop
        self.block_width = block_width

    @property
    def hidden_width(self) -> int:
        return 3 * self.block_width

    def __call__(self, blocks, mask: np.ndarray | None = None) -> Tensor:
        blocks = T.as_tensor(blocks)
        if blocks.shape[-1] != self.block_width:
            raise ValueError(f"block width {blocks.shape[-1]} != expected {self.block_width}")
        h = T.relu(self.fc1(blocks))
        h = T.relu(self.fc2(h))
        h = T.dropout(h, mask, 1.0 - self.drop)
        return self.fc3(h)


class HoTBranch(Module):
    """Order-m branch: one lifting layer f_{1->m}, then depth-1 layers f_{m->m}.

    Blocks are stacked on the batch axis, so every block is encoded
    independently. A pointwise projection maps width d to d_out when they
    differ.
    """

    def __init__(self, order: int, depth: int, d: int, rng: np.random.Generator, d_out: int | None = None,
                 **layer_kw):
        if depth < 1:
            raise ValueError("branch depth must be >= 1")
        self.order = order
        self.layers = [HoTLayer(1, order, d, rng, **layer_kw)]
        self.layers += [HoTLayer(order, order, d, rng, **layer_kw) for _ in range(depth - 1)]
        self.proj = Linear(d, d_out, rng, bias=False) if d_out and d_out != d else None

    def __call__(self, x, mode: str | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mode)
        return self.proj(x) if self.proj is not None else x

    def at(self, x, tuples, mode: str | None = None) -> Tensor:
        """Branch output at distinct-entry tuples only, shape (B, E, d_out)."""
        for layer in self.layers[:-1]:
            x = layer(x, mode)
        y = self.layers[-1].at(x, tuples, mode)
        return self.proj(y) if self.proj is not None else y

"""Set partitions and permutation-equivariant linear maps J^m x d -> J^n x d'.

A partition of the m+n index positions (inputs first, then outputs) is
stored as a restricted-growth string: ``rgs[k]`` is the block of position k.
Each partition contributes one basis map: input positions in a common block
are tied (diagonal), input-only blocks are pooled, output positions in a
common block are tied, and output-only blocks are broadcast.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor, parameter

MAX_PARTITION_SIZE = 6

_LINKED = "ABCDEF"
_FREE = "pqrstu"


@functools.lru_cache(maxsize=None)
def enumerate_partitions(k: int) -> tuple[tuple[int, ...], ...]:
    """All set partitions of k elements as restricted-growth strings, lexicographic."""
    if not 1 <= k <= MAX_PARTITION_SIZE:
        raise ValueError(f"partition size must be in 1..{MAX_PARTITION_SIZE}, got {k}")
    out = []

    def grow(prefix, top):
        if len(prefix) == k:
            out.append(tuple(prefix))
            return
        for b in range(top + 2):
            grow(prefix + [b], max(top, b))

    grow([0], 0)
    return tuple(out)


def bell(k: int) -> int:
    return len(enumerate_partitions(k))


def partition_blocks(rgs) -> list[tuple[int, ...]]:
    blocks: dict[int, list[int]] = {}
    for pos, b in enumerate(rgs):
        blocks.setdefault(b, []).append(pos)
    return [tuple(v) for _, v in sorted(blocks.items())]


@dataclass(frozen=True)
class BasisTerm:
    """Canonical einsum plumbing for one basis partition."""

    rgs: tuple[int, ...]
    in_key: str  # canonical input letters (linked upper, pooled lower)
    out_key: str  # canonical output letters (linked upper, broadcast lower)
    n_linked: int
    n_pooled: int


def _canonical(rgs, m: int) -> BasisTerm:
    ins, outs = rgs[:m], rgs[m:]
    linked = [b for b in dict.fromkeys(outs) if b in ins]
    rank = {b: _LINKED[k] for k, b in enumerate(linked)}
    free_in = {b: _FREE[k] for k, b in enumerate(b for b in dict.fromkeys(ins) if b not in rank)}
    free_out = {b: _FREE[k] for k, b in enumerate(b for b in dict.fromkeys(outs) if b not in rank)}
    in_key = "".join(rank.get(b, free_in.get(b, "")) for b in ins)
    out_key = "".join(rank.get(b, free_out.get(b, "")) for b in outs)
    return BasisTerm(tuple(rgs), in_key, out_key, len(linked), len(free_in))


@functools.lru_cache(maxsize=None)
def basis_plan(m: int, n: int) -> tuple[BasisTerm, ...]:
    return tuple(_canonical(p, m) for p in enumerate_partitions(m + n))


@functools.lru_cache(maxsize=None)
def _grouped_plan(m: int, n: int):
    """Split basis indices into direct terms and pooled/tied terms grouped by input pattern."""
    plan = basis_plan(m, n)
    groups: dict[str, list[int]] = {}
    direct = []
    for idx, term in enumerate(plan):
        if term.n_pooled == 0 and len(set(term.in_key)) == m:
            direct.append(idx)
        else:
            groups.setdefault(term.in_key, []).append(idx)
    return plan, tuple((k, tuple(v)) for k, v in groups.items()), tuple(direct)


class EquivariantLinear(Module):
    """Linear map R^{J^m x d_in} -> R^{J^n x d_out} commuting with joint relabelling.

    Inputs carry a leading batch axis: ``(B, J, ..., J, d_in)``. ``pool``
    selects whether pooled index blocks are summed or averaged; averaging
    keeps activations J-independent and is what the model uses.
    """

    def __init__(self, m: int, n: int, d_in: int, d_out: int, rng: np.random.Generator,
                 pool: str = "mean", bias: bool = True, gain: float = 1.0):
        if pool not in ("sum", "mean"):
            raise ValueError(f"pool must be 'sum' or 'mean', got {pool!r}")
        self.m, self.n, self.d_in, self.d_out, self.pool = m, n, d_in, d_out, pool
        self.basis = enumerate_partitions(m + n)
        plan = basis_plan(m, n)
        # terms reaching a generic (all-distinct) output position
        generic = sum(1 for t in plan if len(set(t.out_key)) == n)
        std = gain / np.sqrt(d_in * max(generic, 1))
        self.coeffs = parameter(rng.normal(0.0, std, size=(len(self.basis), d_in, d_out)))
        self.bias = parameter(np.zeros((bell(n), d_out))) if bias else None

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        m, n = self.m, self.n
        if x.ndim != m + 2 or x.shape[-1] != self.d_in:
            raise ValueError(
                f"expected input (B,{'J,' * m} {self.d_in}), got shape {x.shape}")
        J = x.shape[1]
        if any(s != J for s in x.shape[1:m + 1]):
            raise ValueError(f"joint modes must agree, got shape {x.shape}")
        B = x.shape[0]
        plan, groups, direct = _grouped_plan(m, n)
        out_shape = (B,) + (J,) * n + (self.d_out,)
        parts = []

        # terms with no pooled or tied input modes: one matmul on the raw input,
        # the scatter does the joint-axis transposition/broadcast
        if direct:
            w = T.getitem(self.coeffs, list(direct))
            w = T.reshape(T.transpose(w, (1, 0, 2)), (self.d_in, len(direct) * self.d_out))
            yd = T.linear(x, w)
            for k, idx in enumerate(direct):
                t = plan[idx]
                sl = slice(k * self.d_out, (k + 1) * self.d_out)
                parts.append((yd, "z" + t.in_key + "x", "z" + t.out_key + "x", sl))

        for in_key, members in groups:
            r = T.contract(x, "z" + in_key + "y", "z" + _linked(in_key) + "y")
            if self.pool == "mean" and plan[members[0]].n_pooled:
                r = T.scale(r, 1.0 / J ** plan[members[0]].n_pooled)
            w = T.getitem(self.coeffs, list(members))
            w = T.reshape(T.transpose(w, (1, 0, 2)), (self.d_in, len(members) * self.d_out))
            y = T.linear(r, w)
            src = "z" + _linked(in_key) + "x"
            for k, idx in enumerate(members):
                sl = slice(k * self.d_out, (k + 1) * self.d_out)
                parts.append((y, src, "z" + plan[idx].out_key + "x", sl))

        if self.bias is not None:
            for q, rgs in enumerate(enumerate_partitions(n)):
                key = "".join(_FREE[b] for b in rgs)
                parts.append((T.getitem(self.bias, q), "x", "z" + key + "x", None))
        return T.scatter_sum(parts, out_shape)


    def at(self, x, tuples) -> Tensor:
        """Output rows at output index tuples with pairwise-distinct entries, shape (B, E, d_out).

        Only basis terms whose output pattern has no ties reach such
        positions, so this equals gathering the full output there.
        """
        x = T.as_tensor(x)
        tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, self.n)
        J = x.shape[1]
        plan = basis_plan(self.m, self.n)
        total = None
        for idx, term in enumerate(plan):
            if len(set(term.out_key)) != self.n:
                continue
            linked = _linked(term.in_key)
            r = T.contract(x, "z" + term.in_key + "y", "z" + linked + "y")
            if self.pool == "mean" and term.n_pooled:
                r = T.scale(r, 1.0 / J ** term.n_pooled)
            y = T.linear(r, self.coeffs[idx])
            if linked:
                cols = tuple(tuples[:, term.out_key.index(ch)] for ch in linked)
                y = T.getitem(y, (slice(None),) + cols)
            else:
                y = T.reshape(y, (y.shape[0], 1, self.d_out))
            total = y if total is None else T.add(total, y)
        if self.bias is not None:
            total = T.add(total, self.bias[len(enumerate_partitions(self.n)) - 1])
        return total


def _linked(key: str) -> str:
    return "".join(sorted(set(c for c in key if c.isupper())))


def reference_apply(layer: EquivariantLinear, x: np.ndarray) -> np.ndarray:
    """Slow per-partition evaluation with explicit index loops; used as a test oracle."""
    import itertools

    m, n = layer.m, layer.n
    B, J = x.shape[0], x.shape[1]
    out = np.zeros((B,) + (J,) * n + (layer.d_out,))
    coeffs = layer.coeffs.data
    for p, rgs in enumerate(layer.basis):
        for j in itertools.product(range(J), repeat=n):
            # output ties
            ok = True
            fixed: dict[int, int] = {}
            for pos, b in enumerate(rgs[m:]):
                if fixed.setdefault(b, j[pos]) != j[pos]:
                    ok = False
                    break
            if not ok:
                continue
            acc = np.zeros((B, layer.d_in))
            count = 0
            for i in itertools.product(range(J), repeat=m):
                vals = dict(fixed)
                good = True
                for pos, b in enumerate(rgs[:m]):
                    if vals.setdefault(b, i[pos]) != i[pos]:
                        good = False
                        break
                if good:
                    acc += x[(slice(None),) + i]
                    count += 1
            pooled = len(set(rgs[:m]) - set(rgs[m:]))
            if layer.pool == "mean" and pooled:
                acc /= J ** pooled
            out[(slice(None),) + j] += acc @ coeffs[p]
    if layer.bias is not None:
        for q, rgs in enumerate(enumerate_partitions(n)):
            for j in itertools.product(range(J), repeat=n):
                if all(j[a] == j[b] for a in range(n) for b in range(n) if rgs[a] == rgs[b]):
                    out[(slice(None),) + j] += layer.bias.data[q]
    return out

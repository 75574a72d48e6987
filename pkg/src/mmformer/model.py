"""Multi-order assembly, coupled-mode attention, MP/TP modules, temporal pooling and variants.

Shapes carry a leading batch axis ``z``. The multi-order tensor is
``(B, d', N, tau)``; its joint-mode matricizations are plain reshapes:

* ``(B, d' tau, N)`` channel-temporal block tokens (row ``c * tau + t``),
* ``(B, d' N, tau)`` channel-hyper-edge tokens (row ``c * N + e``),
* ``(B, d', N)`` channel-only tokens after temporal pooling,
* ``(B, r d' J, tau)`` order-channel-joint tokens (row ``(m * d' + c) * J + j``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from . import tensor as T
from .hot import HoTBranch, MlpUnit
from .hypergraph import enumerate_hyperedges, incidence
from .nn import Linear, Module
from .tensor import Tensor, parameter

VARIANTS = ("baseline", "tp_only", "mp_only", "mp_tp", "tp_mp", "two_branch")
POOLS = ("avg", "max", "sum", "attn", "tri", "rank")
TOKENS = ("channel_block", "order_channel_joint", "channel_edge", "channel_only")


@dataclass
class ModelConfig:
    J: int = 10
    C: int = 3
    T: int = 10
    S: int = 5
    tau: int = 7
    r: int = 3
    orders: tuple[int, ...] = ()  # empty: every order 1..r
    d: int = 16
    d_out: int = 0  # d'; 0 means d' = d
    depth: int = 2
    heads: int = 4
    d_k: int = 64
    d_ff: int = 0  # 0 means d_F = d
    ff_basis: str = "full"
    norm: bool = True  # post-norm inside HoT layers
    qk: str = "auto"
    attn_mode: str = "auto"
    drop: float = 0.1
    num_classes: int = 4
    variant: str = "two_branch"
    pool: str = "rank"
    seed: int = 0

    def __post_init__(self):
        self.orders = tuple(sorted(set(self.orders))) or tuple(range(1, self.r + 1))
        if any(not 1 <= m <= self.r for m in self.orders):
            raise ValueError(f"orders {self.orders} must lie in 1..{self.r}")
        if self.r > self.J:
            raise ValueError(f"r={self.r} exceeds J={self.J}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pooling {self.pool!r}; choose from {POOLS}")
        for name in ("J", "C", "T", "S", "tau", "d", "depth", "heads", "d_k", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def width(self) -> int:
        return self.d_out or self.d

    @property
    def n_edges(self) -> int:
        return sum(comb(self.J, m) for m in self.orders)

    @property
    def branch_width(self) -> int:
        """r d' J: width of either branch output (r counts the orders in use)."""
        return len(self.orders) * self.width * self.J


# --------------------------------------------------------------------------
# assembly


def upper_entries(phi, m: int) -> Tensor:
    """Rows of an order-m tensor ``(..., J^m, d')`` at strictly increasing index tuples."""
    phi = T.as_tensor(phi)
    J = phi.shape[-2]
    lead = phi.ndim - m - 1
    edges = enumerate_hyperedges(J, m)
    return T.getitem(phi, (slice(None),) * lead + tuple(edges.T))


def assemble_multi_order(edge_feats) -> Tensor:
    """Stack per-order edge features ``(tau, N_m, d')`` into ``(d', N, tau)``.

    Orders are concatenated along the edge mode in the order given; pass the
    full order-m tensors through :func:`upper_entries` first.
    """
    cat = T.concat([T.as_tensor(e) for e in edge_feats], axis=-2)  # (..., tau, N, d')
    nd = cat.ndim
    perm = tuple(range(nd - 3)) + (nd - 1, nd - 2, nd - 3)
    return T.transpose(cat, perm)


# --------------------------------------------------------------------------
# attention and pooling


def coupled_mode_attention(M, wq, wk, wv):
    """SoftMax(Q K^T / sqrt(width)) V with Q = Wq M, K = Wk M, V = Wv M.

    ``M`` is ``(..., rows, width)``; tokens are the rows. Returns the output
    and the ``(..., rows, rows)`` attention matrix.
    """
    M = T.as_tensor(M)
    lead = "zyx"[: M.ndim - 2]
    # the 1/sqrt(width) factor is applied to the (narrow) query rather than the logits
    q = T.scale(T.einsum(f"pq,{lead}qn->{lead}pn", wq, M), 1.0 / np.sqrt(M.shape[-1]))
    k = T.einsum(f"pq,{lead}qn->{lead}pn", wk, M)
    v = T.einsum(f"pq,{lead}qn->{lead}pn", wv, M)
    logits = T.einsum(f"{lead}pn,{lead}qn->{lead}pq", q, k)
    attn = T.softmax(logits, axis=-1)
    return T.einsum(f"{lead}pq,{lead}qn->{lead}pn", attn, v), attn


def _attn_weights(n: int, rng: np.random.Generator):
    std = 1.0 / np.sqrt(n)
    return [parameter(rng.normal(0.0, std, size=(n, n))) for _ in range(3)]


def normalized_incidence(J: int, m: int) -> np.ndarray:
    """(N_m, J): column j spreads unit mass uniformly over the edges containing joint j."""
    H = incidence(J, enumerate_hyperedges(J, m)).T
    return H / H.sum(axis=0, keepdims=True)


class MultiOrderPooling(Module):
    """JmSA over edge-mode columns, then per-order weighted pooling O^(m) H^(m)."""

    def __init__(self, rows: int, J: int, orders, rng: np.random.Generator):
        self.rows, self.J, self.orders = rows, J, tuple(orders)
        self.wq, self.wk, self.wv = _attn_weights(rows, rng)
        self.pool = [parameter(normalized_incidence(J, m)) for m in self.orders]
        self.offsets = np.cumsum([0] + [comb(J, m) for m in self.orders])

    def __call__(self, x, capture: dict | None = None, name: str = "") -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-2:] != (self.rows, int(self.offsets[-1])):
            raise ValueError(f"MP expects (..., {self.rows}, {int(self.offsets[-1])}), got {x.shape}")
        o, attn = coupled_mode_attention(x, self.wq, self.wk, self.wv)
        if capture is not None:
            capture[name] = attn.data
        lead = (slice(None),) * (x.ndim - 2)
        parts = []
        for k, h in enumerate(self.pool):
            span = T.getitem(o, lead + (slice(None), slice(int(self.offsets[k]), int(self.offsets[k + 1]))))
            parts.append(T.einsum("zpe,ej->zpj" if x.ndim == 3 else "pe,ej->pj", span, h))
        return T.concat(parts, axis=-2)


class TemporalAttention(Module):
    def __init__(self, rows: int, rng: np.random.Generator):
        self.rows = rows
        self.wq, self.wk, self.wv = _attn_weights(rows, rng)

    def __call__(self, x, capture: dict | None = None, name: str = "") -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-2] != self.rows:
            raise ValueError(f"TP expects {self.rows} token rows, got {x.shape}")
        o, attn = coupled_mode_attention(x, self.wq, self.wk, self.wv)
        if capture is not None:
            capture[name] = attn.data
        return o


def rank_coefficients(tau: int) -> np.ndarray:
    """rho(t) = 2(tau - t + 1) - (tau + 1)(H_tau - H_{t-1}), t = 1..tau."""
    harm = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, tau + 1))])
    t = np.arange(1, tau + 1)
    return 2.0 * (tau - t + 1) - (tau + 1) * (harm[tau] - harm[t - 1])


class TemporalPool(Module):
    """Reduce ``(..., rows, tau)`` over tau with one of avg/max/sum/attn/tri/rank."""

    def __init__(self, method: str, rows: int, rng: np.random.Generator):
        if method not in POOLS:
            raise ValueError(f"unknown pooling {method!r}; choose from {POOLS}")
        self.method, self.rows = method, rows
        if method == "attn":
            self.w = parameter(rng.normal(0.0, 1.0, size=rows))
        elif method == "tri":
            self.u = parameter(rng.normal(0.0, 1.0 / np.sqrt(rows), size=rows))
            self.v = parameter(rng.normal(0.0, 1.0 / np.sqrt(rows), size=rows))

    def __call__(self, o) -> Tensor:
        o = T.as_tensor(o)
        m = self.method
        if m == "avg":
            return T.reduce(o, axis=-1, kind="mean")
        if m == "max":
            return T.reduce(o, axis=-1, kind="max")
        if m == "sum":
            return T.reduce(o, axis=-1, kind="sum")
        if m == "rank":
            return T.linear(o, Tensor(rank_coefficients(o.shape[-1])[:, None])).reshape(o.shape[:-1])
        lead = "zy"[: o.ndim - 2]
        if m == "attn":
            norms = T.sqrt(T.add(T.reduce(T.mul(o, o), axis=-2, keepdims=True), 1e-12))
            scores = T.einsum(f"{lead}pt,p->{lead}t", T.div(o, norms), self.w)
            s = T.softmax(scores, axis=-1)
            return T.einsum(f"{lead}pt,{lead}t->{lead}p", o, s)
        # tri: out_i = sum_t s_t O_it (u . O_t), s = softmax_t(v . O_t)
        s = T.softmax(T.einsum(f"{lead}pt,p->{lead}t", o, self.v), axis=-1)
        g = T.einsum(f"{lead}pt,p->{lead}t", o, self.u)
        return T.einsum(f"{lead}pt,{lead}t->{lead}p", o, T.mul(s, g))


# --------------------------------------------------------------------------
# full model


@dataclass
class ForwardCache:
    """Intermediate tensors of one forward pass, for inspection."""

    M: Tensor | None = None
    attention: dict = field(default_factory=dict)


class ThreeMformer(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dp, J, tau, N = cfg.width, cfg.J, cfg.tau, cfg.n_edges
        r = len(cfg.orders)
        self.mlp = MlpUnit(cfg.C * cfg.T, cfg.d, rng, drop=cfg.drop)
        self.branches = {
            m: HoTBranch(m, cfg.depth, cfg.d, rng, d_out=dp, heads=cfg.heads, d_k=cfg.d_k,
                         d_ff=cfg.d_ff or None, qk=cfg.qk, ff_basis=cfg.ff_basis, mode=cfg.attn_mode,
                         norm=cfg.norm)
            for m in cfg.orders
        }
        self.edges = {m: enumerate_hyperedges(J, m) for m in cfg.orders}
        v = cfg.variant
        if v in ("mp_tp", "two_branch", "mp_only"):
            self.mp1 = MultiOrderPooling(dp * tau, J, cfg.orders, rng)
        if v in ("mp_tp", "two_branch"):
            self.tp1 = TemporalAttention(cfg.branch_width, rng)
            self.pool1 = TemporalPool(cfg.pool, cfg.branch_width, rng)
        if v in ("tp_mp", "two_branch", "tp_only"):
            self.tp2 = TemporalAttention(dp * N, rng)
            self.pool2 = TemporalPool(cfg.pool, dp * N, rng)
        if v in ("tp_mp", "two_branch"):
            self.mp2 = MultiOrderPooling(dp, J, cfg.orders, rng)
        if v == "tp_only":
            self.fc = Linear(dp * N, cfg.branch_width, rng)
        in_width = {"baseline": r * dp, "two_branch": 2 * cfg.branch_width}.get(v, cfg.branch_width)
        self.classifier = Linear(in_width, cfg.num_classes, rng)

    # -- encoder -------------------------------------------------------------
    def encode(self, blocks, owners=None, masks=None) -> Tensor:
        """Blocks ``(K, tau, J, C*T)`` of K skeletons -> multi-order tensors ``(B, d', N, tau)``.

        ``owners[k]`` names the sample skeleton k belongs to; skeletons of one
        sample (two-subject records) are averaged after encoding.
        """
        blocks = np.asarray(blocks, dtype=np.float64)
        K, tau = blocks.shape[:2]
        J = self.cfg.J
        if blocks.shape[2:] != (J, self.cfg.C * self.cfg.T) or tau != self.cfg.tau:
            raise ValueError(f"blocks must be (K, {self.cfg.tau}, {J}, {self.cfg.C * self.cfg.T}), got {blocks.shape}")
        x = self.mlp(blocks.reshape(K * tau, J, -1), masks)
        feats = []
        for m in self.cfg.orders:
            e = self.branches[m].at(x, self.edges[m])  # (K tau, N_m, d')
            feats.append(T.reshape(e, (K, tau) + e.shape[1:]))
        M = assemble_multi_order(feats)  # (K, d', N, tau)
        if owners is None:
            return M
        owners = np.asarray(owners)
        B = int(owners.max()) + 1
        avg = np.zeros((B, K))
        avg[owners, np.arange(K)] = 1.0
        avg /= avg.sum(axis=1, keepdims=True)
        return T.einsum("bk,kcnt->bcnt", Tensor(avg), M)

    # -- 3Mformer head -------------------------------------------------------
    def mp_tp(self, M: Tensor, capture: dict | None = None) -> Tensor:
        B, dp, N, tau = M.shape
        x = T.reshape(T.transpose(M, (0, 1, 3, 2)), (B, dp * tau, N))
        o = self.mp1(x, capture, "channel_block")  # (B, r d' tau, J)
        r = len(self.cfg.orders)
        o = T.reshape(o, (B, r, dp, tau, self.cfg.J))
        o = T.reshape(T.transpose(o, (0, 1, 2, 4, 3)), (B, r * dp * self.cfg.J, tau))
        return self.pool1(self.tp1(o, capture, "order_channel_joint"))

    def tp_mp(self, M: Tensor, capture: dict | None = None) -> Tensor:
        B, dp, N, tau = M.shape
        o = self.pool2(self.tp2(T.reshape(M, (B, dp * N, tau)), capture, "channel_edge"))
        o = self.mp2(T.reshape(o, (B, dp, N)), capture, "channel_only")
        return T.reshape(o, (B, -1))

    def head(self, M: Tensor, capture: dict | None = None) -> Tensor:
        v = self.cfg.variant
        B, dp, N, tau = M.shape
        if v == "two_branch":
            feat = T.concat([self.mp_tp(M, capture), self.tp_mp(M, capture)], axis=1)
        elif v == "mp_tp":
            feat = self.mp_tp(M, capture)
        elif v == "tp_mp":
            feat = self.tp_mp(M, capture)
        elif v == "mp_only":
            x = T.reshape(T.transpose(M, (0, 1, 3, 2)), (B, dp * tau, N))
            o = self.mp1(x, capture, "channel_block")
            o = T.reshape(o, (B, len(self.cfg.orders), dp, tau, self.cfg.J))
            feat = T.reshape(T.reduce(o, axis=3, kind="mean"), (B, -1))
        elif v == "tp_only":
            o = self.pool2(self.tp2(T.reshape(M, (B, dp * N, tau)), capture, "channel_edge"))
            feat = self.fc(o)
        else:  # baseline: per-order mean over edges and blocks
            parts = []
            offsets = np.cumsum([0] + [comb(self.cfg.J, m) for m in self.cfg.orders])
            for k in range(len(self.cfg.orders)):
                span = T.getitem(M, (slice(None), slice(None), slice(int(offsets[k]), int(offsets[k + 1]))))
                parts.append(T.reduce(T.reduce(span, axis=-1, kind="mean"), axis=-1, kind="mean"))
            feat = T.concat(parts, axis=1)
        return self.classifier(feat)

    def __call__(self, blocks, owners=None, masks=None, cache: ForwardCache | None = None) -> Tensor:
        M = self.encode(blocks, owners, masks)
        if cache is not None:
            cache.M = M
        return self.head(M, cache.attention if cache is not None else None)

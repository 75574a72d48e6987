"""Hyper-edge combinatorics and the GCN / hypergraph-GCN propagation rules.

Joints are 0-based internally. Edges of order m are the strictly
increasing m-tuples, in lexicographic order; that order is used
everywhere hyper-edges are laid out.
"""
from __future__ import annotations

import functools
import itertools
from math import comb

import numpy as np


@functools.lru_cache(maxsize=None)
def _edges(J: int, m: int) -> np.ndarray:
    out = np.array(list(itertools.combinations(range(J), m)), dtype=np.int64).reshape(-1, m)
    out.setflags(write=False)
    return out


def enumerate_hyperedges(J: int, m: int) -> np.ndarray:
    """All m-subsets of range(J) as rows of a (binom(J, m), m) array, lexicographic."""
    if not 1 <= m <= J:
        raise ValueError(f"need 1 <= m <= J, got m={m}, J={J}")
    return _edges(J, m)


def total_hyperedges(J: int, r: int) -> int:
    if not 1 <= r <= J:
        raise ValueError(f"need 1 <= r <= J, got r={r}, J={J}")
    return sum(comb(J, m) for m in range(1, r + 1))


def order_offsets(J: int, r: int) -> list[int]:
    """Start column of each order's span in the concatenated edge axis, plus the end."""
    out = [0]
    for m in range(1, r + 1):
        out.append(out[-1] + comb(J, m))
    return out


def incidence(J: int, edges) -> np.ndarray:
    """Joint-by-edge 0/1 matrix."""
    edges = np.asarray(edges, dtype=np.int64)
    H = np.zeros((J, len(edges)))
    for e, members in enumerate(edges):
        H[members, e] = 1.0
    return H


def adjacency_from_incidence(H) -> np.ndarray:
    """Joint adjacency H H^T with the diagonal cleared, for ordinary (2-joint) edges.

    Subtracting 2I only clears the diagonal when every joint has degree 2,
    so the diagonal is zeroed directly.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise ValueError("incidence must be a matrix")
    if H.shape[1] and not np.all(H.sum(axis=0) == 2):
        raise ValueError("every column of a pairwise incidence must contain exactly two ones")
    if not np.all((H == 0) | (H == 1)):
        raise ValueError("incidence must be binary")
    # H H^T counts edges per joint pair; its diagonal holds the joint degrees
    A = H @ H.T
    np.fill_diagonal(A, 0.0)
    return A


def node_degree(H, weights=None) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    w = np.ones(H.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    return H @ w


def edge_degree(H) -> np.ndarray:
    return np.asarray(H, dtype=np.float64).sum(axis=0)


def gcn_update(X, A, theta) -> np.ndarray:
    """ReLU(D^-1/2 (A+I) D^-1/2 X Theta) with D the row sums of A+I."""
    X, A, theta = (np.asarray(v, dtype=np.float64) for v in (X, A, theta))
    At = A + np.eye(len(A))
    deg = At.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("nonpositive degree after adding self-loops")
    s = 1.0 / np.sqrt(deg)
    return np.maximum(0.0, (s[:, None] * At * s[None, :]) @ X @ theta)


def hgcn_update(X, H, W, theta) -> np.ndarray:
    """ReLU(Dv^{1/2} H W De^{-1} H^T Dv^{1/2} X Theta).

    The node-degree exponent is +1/2, not the more common -1/2.
    """
    X, H, theta = (np.asarray(v, dtype=np.float64) for v in (X, H, theta))
    W = np.asarray(W, dtype=np.float64)
    w = np.diag(W) if W.ndim == 2 else W
    dv = node_degree(H, w)
    de = edge_degree(H)
    if np.any(dv <= 0) or np.any(de <= 0):
        raise ValueError("hypergraph has a zero node or edge degree")
    sv = np.sqrt(dv)
    P = (sv[:, None] * H) @ np.diag(w / de) @ (H.T * sv[None, :])
    return np.maximum(0.0, P @ X @ theta)

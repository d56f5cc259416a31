"""Adjacency construction for the graph-aware encoders.

Two families: data-driven Pearson top-k over training target histories, and
adaptive adjacencies computed from trainable node embeddings inside each
forward pass (so they participate in the gradient tape).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROVENANCES = ("pearson-topk", "adaptive", "adaptive-directed", "identity")


def adaptive_adjacency(embeddings: Tensor) -> Tensor:
    """Row-softmax of ReLU(E Eᵀ); differentiable w.r.t. the embeddings."""
    scores = ad.relu(ad.matmul(embeddings, ad.transpose(embeddings)))
    return ad.softmax(scores, axis=1)


def adaptive_adjacency_directed(src: Tensor, dst: Tensor) -> Tensor:
    """Directed variant with separate source and target embeddings."""
    scores = ad.relu(ad.matmul(src, ad.transpose(dst)))
    return ad.softmax(scores, axis=1)


def pearson_correlation(series: np.ndarray) -> np.ndarray:
    """Pairwise Pearson coefficients; constant series correlate 0 with everything."""
    if series.ndim != 2 or series.shape[1] < 2:
        raise ValueError("series must be (N, T) with T >= 2")
    centered = series - series.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    corr = (centered / safe[:, None]) @ (centered / safe[:, None]).T
    corr[norms == 0, :] = 0.0
    corr[:, norms == 0] = 0.0
    return corr


def pearson_topk_adjacency(series: np.ndarray, k: int = 8) -> np.ndarray:
    """Keep each node's k largest off-diagonal correlations, signed.

    Ties break toward the lower node index so builds are reproducible.
    """
    n = series.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the node count {n}")
    corr = pearson_correlation(series)
    adj = np.zeros((n, n))
    for i in range(n):
        candidates = [j for j in range(n) if j != i]
        # stable sort on descending value keeps lower indices first on ties
        order = sorted(candidates, key=lambda j: (-corr[i, j], j))
        for j in order[:k]:
            adj[i, j] = corr[i, j]
    return adj


def with_self_loops(adj: np.ndarray) -> np.ndarray:
    out = adj.copy()
    np.fill_diagonal(out, out.diagonal() + 1.0)
    return out


def row_normalize(adj: np.ndarray) -> np.ndarray:
    """Scale rows to unit L1 mass, preserving sign of the entries."""
    denom = np.abs(adj).sum(axis=1, keepdims=True)
    denom = np.where(denom > 0, denom, 1.0)
    return adj / denom


@dataclass
class Graph:
    """N x N adjacency with construction provenance.

    Adaptive kinds hold trainable embeddings and re-evaluate the matrix on
    every call so it stays inside the active differentiation tape.
    """

    provenance: str
    n_nodes: int
    adjacency: Optional[np.ndarray] = None
    embeddings: Optional[Tensor] = None
    src_embeddings: Optional[Tensor] = None
    dst_embeddings: Optional[Tensor] = None

    def matrix(self) -> Tensor:
        if self.provenance == "identity":
            return Tensor(np.eye(self.n_nodes))
        if self.provenance == "pearson-topk":
            return Tensor(self.adjacency)
        if self.provenance == "adaptive":
            return adaptive_adjacency(self.embeddings)
        if self.provenance == "adaptive-directed":
            return adaptive_adjacency_directed(self.src_embeddings, self.dst_embeddings)
        raise ValueError(f"unknown provenance {self.provenance!r}")

    def parameters(self) -> dict[str, Tensor]:
        if self.provenance == "adaptive":
            return {"graph.embeddings": self.embeddings}
        if self.provenance == "adaptive-directed":
            return {"graph.src_embeddings": self.src_embeddings,
                    "graph.dst_embeddings": self.dst_embeddings}
        return {}


def build_graph(kind: str, n_nodes: int, target_series: Optional[np.ndarray] = None,
                k: int = 8, embed_dim: int = 8,
                rng: Optional[np.random.Generator] = None) -> Graph:
    """Construct a graph of the requested provenance.

    ``target_series`` (N, T_train) is required for pearson-topk; adaptive
    kinds initialize trainable embeddings from ``rng``.
    """
    if kind == "identity":
        return Graph("identity", n_nodes)
    if kind == "pearson":
        if target_series is None:
            raise ValueError("pearson graph needs the training target series")
        k_eff = min(k, n_nodes - 1)
        adj = pearson_topk_adjacency(target_series, k_eff)
        return Graph("pearson-topk", n_nodes, adjacency=adj)
    if rng is None:
        rng = np.random.default_rng(0)
    scale = 1.0 / np.sqrt(embed_dim)
    if kind == "adaptive":
        emb = Tensor(rng.uniform(-scale, scale, size=(n_nodes, embed_dim)),
                     requires_grad=True)
        return Graph("adaptive", n_nodes, embeddings=emb)
    if kind == "adaptive-directed":
        src = Tensor(rng.uniform(-scale, scale, size=(n_nodes, embed_dim)),
                     requires_grad=True)
        dst = Tensor(rng.uniform(-scale, scale, size=(n_nodes, embed_dim)),
                     requires_grad=True)
        return Graph("adaptive-directed", n_nodes, src_embeddings=src,
                     dst_embeddings=dst)
    raise ValueError(f"unknown graph kind {kind!r}")

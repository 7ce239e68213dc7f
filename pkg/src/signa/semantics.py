"""Label co-occurrence graph and the GNN encoder that turns it into L_s."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_Q = 0.4
GNN_KINDS = ("gcn", "sage", "gat")
GAT_SLOPE = 0.2


class MissingTokenError(KeyError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"tokens missing from embedding file: {', '.join(self.missing)}")


class EmbeddingFormatError(ValueError):
    pass


# ------------------------------------------------------------------ graph


def count_cooccurrence(label_sets: Iterable[Iterable[int]], C: int) -> np.ndarray:
    """N[i, i] = images containing i; N[i, j] = images containing both i and j."""
    if C < 1:
        raise ValueError("need at least one label")
    rows = []
    for k, labels in enumerate(label_sets):
        idx = sorted(set(int(i) for i in labels))
        if idx and (idx[0] < 0 or idx[-1] >= C):
            raise ValueError(f"image {k}: label index out of range [0, {C})")
        v = np.zeros(C, dtype=np.int64)
        v[idx] = 1
        rows.append(v)
    if not rows:
        raise ValueError("empty corpus: no co-occurrence statistics possible")
    Y = np.stack(rows)
    return Y.T @ Y


def counts_from_matrix(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise ValueError("empty corpus: no co-occurrence statistics possible")
    Y = (Y != 0).astype(np.int64)
    return Y.T @ Y


def cooccurrence_probability(N: np.ndarray) -> np.ndarray:
    """P[i, j] = N[i, j] / N[i, i]; rows of absent labels are zero."""
    N = np.asarray(N, dtype=np.float64)
    diag = np.diag(N)
    P = np.zeros_like(N)
    present = diag > 0
    P[present] = N[present] / diag[present, None]
    return P


def threshold_graph(P: np.ndarray, Q: float = DEFAULT_Q) -> np.ndarray:
    if not 0.0 <= Q <= 1.0:
        raise ValueError(f"threshold Q must lie in [0, 1], got {Q}")
    P = np.asarray(P, dtype=np.float64)
    return np.where(P < Q, 0.0, P)


def normalize_adjacency(G: np.ndarray) -> np.ndarray:
    """D^-1/2 (G + I) D^-1/2 with D the row sums of G + I."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ShapeError(f"adjacency must be square, got {G.shape}")
    if np.any(G < 0):
        raise ValueError("adjacency has negative entries")
    Gt = G + np.eye(G.shape[0])
    d = 1.0 / np.sqrt(Gt.sum(axis=1))
    return d[:, None] * Gt * d[None, :]


def neighbor_mask(G: np.ndarray) -> np.ndarray:
    """Directed neighbor relation j in N(i) iff G[i, j] > 0, self excluded."""
    M = np.asarray(G) > 0
    np.fill_diagonal(M, False)
    return M


@dataclass(frozen=True)
class LabelGraph:
    labels: tuple[str, ...]
    N: np.ndarray
    P: np.ndarray
    G: np.ndarray
    G_hat: np.ndarray
    Q: float

    @classmethod
    def from_counts(cls, labels: Sequence[str], N: np.ndarray, Q: float = DEFAULT_Q) -> "LabelGraph":
        N = np.asarray(N)
        if N.shape != (len(labels), len(labels)):
            raise ShapeError(f"counts {N.shape} do not match {len(labels)} labels")
        P = cooccurrence_probability(N)
        G = threshold_graph(P, Q)
        return cls(tuple(labels), N, P, G, normalize_adjacency(G), float(Q))

    @classmethod
    def from_label_matrix(cls, labels: Sequence[str], Y: np.ndarray, Q: float = DEFAULT_Q) -> "LabelGraph":
        return cls.from_counts(labels, counts_from_matrix(Y), Q)

    @property
    def C(self) -> int:
        return len(self.labels)

    @property
    def directed_edge_count(self) -> int:
        return int(neighbor_mask(self.G).sum())

    def summary(self) -> dict:
        return {"C": self.C, "Q": self.Q, "directed_edge_count": self.directed_edge_count}


# ------------------------------------------------------------- embeddings


@dataclass(frozen=True)
class EmbeddingMatrix:
    matrix: np.ndarray
    vocabulary: tuple[str, ...]
    source: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def load_word_embeddings(path, vocabulary: Sequence[str]) -> EmbeddingMatrix:
    """Pick the vocabulary rows out of a GloVe-format text file."""
    wanted = set(vocabulary)
    found: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected {dim} values, found {len(vals)}")
            if token in wanted and token not in found:
                try:
                    found[token] = np.array([float(v) for v in vals])
                except ValueError as exc:
                    raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from exc
    missing = [t for t in vocabulary if t not in found]
    if missing:
        raise MissingTokenError(missing)
    return EmbeddingMatrix(np.stack([found[t] for t in vocabulary]), tuple(vocabulary), f"glove_file:{Path(path).name}")


def synthetic_embeddings(vocabulary: Sequence[str], dim: int = 300, seed: int = 0) -> EmbeddingMatrix:
    """Standard-normal rows, reproducible per seed."""
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(rng.standard_normal((len(vocabulary), dim)), tuple(vocabulary), f"synthetic({seed})")


# ------------------------------------------------------------- GNN layers


def _delta(x: Tensor, final: bool, slope: float) -> Tensor:
    return x if final else T.leaky_relu(x, slope)


def gcn_layer(H: Tensor, G_hat: np.ndarray, W: Tensor, final: bool = False, slope: float = T.DEFAULT_SLOPE) -> Tensor:
    H, W = T.as_tensor(H), T.as_tensor(W)
    G_hat = np.asarray(G_hat, dtype=np.float64)
    if G_hat.shape != (H.shape[0], H.shape[0]):
        raise ShapeError(f"adjacency {G_hat.shape} does not match {H.shape[0]} nodes")
    return _delta(T.matmul(Tensor(G_hat), T.matmul(H, W)), final, slope)


def mean_aggregator(G: np.ndarray) -> np.ndarray:
    """Row-normalized neighbor matrix; nodes without neighbors get a zero row."""
    M = neighbor_mask(G).astype(np.float64)
    deg = M.sum(axis=1, keepdims=True)
    return np.divide(M, deg, out=np.zeros_like(M), where=deg > 0)


def sage_layer(
    H: Tensor, G: np.ndarray, W_self: Tensor, W_neigh: Tensor, final: bool = False, slope: float = T.DEFAULT_SLOPE
) -> Tensor:
    H = T.as_tensor(H)
    agg = mean_aggregator(G)
    if agg.shape != (H.shape[0], H.shape[0]):
        raise ShapeError(f"adjacency {agg.shape} does not match {H.shape[0]} nodes")
    z = T.add(T.matmul(H, W_self), T.matmul(T.matmul(Tensor(agg), H), W_neigh))
    return _delta(z, final, slope)


def gat_layer(
    H: Tensor,
    G: np.ndarray,
    W: Tensor,
    a_src: Tensor,
    a_dst: Tensor,
    final: bool = False,
    slope: float = T.DEFAULT_SLOPE,
    attn_slope: float = GAT_SLOPE,
) -> Tensor:
    """Single-head attention over N(i) plus the node itself.

    The score vector a = [a_src || a_dst] is split so that
    e[i, j] = LeakyReLU(a_src . Wh_i + a_dst . Wh_j).
    """
    H = T.as_tensor(H)
    n = H.shape[0]
    mask = neighbor_mask(G)
    if mask.shape != (n, n):
        raise ShapeError(f"adjacency {mask.shape} does not match {n} nodes")
    mask = mask | np.eye(n, dtype=bool)
    Z = T.matmul(H, W)
    s = T.reshape(T.matmul(Z, T.reshape(a_src, (-1, 1))), (n,))
    d = T.reshape(T.matmul(Z, T.reshape(a_dst, (-1, 1))), (n,))
    e = T.leaky_relu(T.outer_sum(s, d), attn_slope)
    alpha = T.masked_softmax_rows(e, mask)
    return _delta(T.matmul(alpha, Z), final, slope)


def gat_attention(H, G, W, a_src, a_dst, attn_slope: float = GAT_SLOPE) -> np.ndarray:
    """Attention coefficients of gat_layer, for inspection."""
    with T.no_grad():
        n = T.as_tensor(H).shape[0]
        Z = T.matmul(H, W)
        s = T.reshape(T.matmul(Z, T.reshape(a_src, (-1, 1))), (n,))
        d = T.reshape(T.matmul(Z, T.reshape(a_dst, (-1, 1))), (n,))
        e = T.leaky_relu(T.outer_sum(s, d), attn_slope)
        return T.masked_softmax_rows(e, neighbor_mask(G) | np.eye(n, dtype=bool)).data


# ---------------------------------------------------------------- encoder


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class SemanticEncoder:
    """Two stacked GNN layers: d_in -> D // 2 -> D."""

    kind: str
    d_in: int
    D: int
    params: dict[str, Tensor] = field(default_factory=dict)
    slope: float = T.DEFAULT_SLOPE

    @classmethod
    def init(cls, kind: str, d_in: int, D: int, rng: np.random.Generator, slope: float = T.DEFAULT_SLOPE):
        if kind not in GNN_KINDS:
            raise ValueError(f"unknown GNN kind {kind!r}; expected one of {GNN_KINDS}")
        if D < 2:
            raise ValueError(f"semantic width D must be at least 2, got {D}")
        dims = [d_in, D // 2, D]
        params: dict[str, Tensor] = {}
        for layer, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            pre = f"layer{layer}."
            if kind == "gcn":
                params[pre + "W"] = Tensor(_uniform(rng, (a, b), a), requires_grad=True)
            elif kind == "sage":
                params[pre + "W_self"] = Tensor(_uniform(rng, (a, b), a), requires_grad=True)
                params[pre + "W_neigh"] = Tensor(_uniform(rng, (a, b), a), requires_grad=True)
            else:
                params[pre + "W"] = Tensor(_uniform(rng, (a, b), a), requires_grad=True)
                params[pre + "a_src"] = Tensor(_uniform(rng, (b,), b), requires_grad=True)
                params[pre + "a_dst"] = Tensor(_uniform(rng, (b,), b), requires_grad=True)
        return cls(kind, d_in, D, params, slope)

    def __call__(self, emb: np.ndarray | Tensor, graph: LabelGraph) -> Tensor:
        H = T.as_tensor(emb)
        if H.shape != (graph.C, self.d_in):
            raise ShapeError(f"embeddings {H.shape} do not match ({graph.C}, {self.d_in})")
        p = self.params
        for layer in range(2):
            pre = f"layer{layer}."
            final = layer == 1
            if self.kind == "gcn":
                H = gcn_layer(H, graph.G_hat, p[pre + "W"], final, self.slope)
            elif self.kind == "sage":
                H = sage_layer(H, graph.G, p[pre + "W_self"], p[pre + "W_neigh"], final, self.slope)
            else:
                H = gat_layer(H, graph.G, p[pre + "W"], p[pre + "a_src"], p[pre + "a_dst"], final, self.slope)
        return H


def encode_semantics(
    emb: EmbeddingMatrix, graph: LabelGraph, kind: str, D: int, rng: np.random.Generator | None = None
) -> tuple[Tensor, SemanticEncoder]:
    """Build a fresh encoder and return (L_s, encoder)."""
    if tuple(emb.vocabulary) != tuple(graph.labels):
        raise ValueError("embedding vocabulary order differs from the graph's labels")
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = SemanticEncoder.init(kind, emb.dim, D, rng)
    return enc(emb.matrix, graph), enc

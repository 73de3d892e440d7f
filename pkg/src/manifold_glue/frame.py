"""Local geometry per graph: sparse perturbation, tangent frame, metric.

The construction mirrors a directional derivative probe: M learnable
perturbation nodes are wired into the graph (top-k targets by attention
score, per-node weights renormalized to sum to one), the encoder embeds the
perturbed graph, and the displacement of each perturbation node's embedding
from the pooled graph coordinate yields one raw tangent vector. Modified
Gram-Schmidt with length recovery turns those into an orthogonal frame whose
Gram matrix (plus jitter) is the local metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from manifold_glue import diff as D
from manifold_glue import encoder as enc
from manifold_glue.data import GraphRecord

__all__ = [
    "PerturbationBank",
    "PerturbedGraph",
    "FramedEmbedding",
    "perturb_graph",
    "tangent_vectors",
    "orthogonal_frame",
    "local_metric",
    "build_frame",
]

DEGENERATE_TOL = 1e-8
METRIC_JITTER = 1e-8
_FALLBACK_SEED = 0x5EED


@dataclass
class PerturbationBank:
    """Shared learnable perturbation-node features (M x F_in)."""

    p: D.DiffTensor
    k: int

    @property
    def m(self) -> int:
        return self.p.shape[0]


@dataclass
class PerturbedGraph:
    """A record with M perturbation nodes appended and weighted edges.

    ``adjacency`` holds original edges at weight 1 plus the differentiable
    attachment block; self-loops are left to the encoder normalization.
    """

    record: GraphRecord
    features: D.DiffTensor
    adjacency: D.DiffTensor
    num_original: int
    num_perturb: int
    mask: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.num_original + self.num_perturb

    @property
    def num_edges(self) -> int:
        return len(self.record.edges) + int(self.mask.sum())


@dataclass
class FramedEmbedding:
    """Graph coordinate z (1 x d), frame W (d x M), metric G (M x M SPD)."""

    z: D.DiffTensor
    w: D.DiffTensor
    g: D.DiffTensor
    degenerate_columns: int = 0
    record: GraphRecord | None = field(default=None, repr=False)


def attachment_weights(scores: D.DiffTensor, k: int) -> tuple[D.DiffTensor, np.ndarray]:
    """Top-k selection per perturbation node, then per-original-node softmax.

    ``scores`` is N x M. Selection is a hard argsort on values (ties broken
    by node index); the returned weight matrix is differentiable and each
    nonzero row sums to exactly one.
    """
    n, m = scores.shape
    kk = min(k, n)
    vals = scores.values
    mask = np.zeros((n, m))
    for col in range(m):
        top = np.argsort(-vals[:, col], kind="stable")[:kk]
        mask[top, col] = 1.0
    # softmax over each node's selected entries; the row-max shift is a
    # constant and cancels, so gradients stay exact
    shift = vals.max(axis=1, keepdims=True)
    e = D.mul(D.exp(D.sub(scores, D.DiffTensor(np.broadcast_to(shift, (n, m)).copy()))),
              D.DiffTensor(mask))
    rowsum = D.matmul(e, D.DiffTensor(np.ones((m, 1))))
    empty = (mask.sum(axis=1, keepdims=True) == 0).astype(float)
    safe = D.add(rowsum, D.DiffTensor(empty))
    weights = D.div(e, D.matmul(safe, D.DiffTensor(np.ones((1, m)))))
    return weights, mask


def perturb_graph(record: GraphRecord, projected: D.DiffTensor,
                  bank: PerturbationBank) -> PerturbedGraph:
    """Attach the bank's M nodes to ``record`` with attentive edge weights.

    Scores are scaled dot products between projected node features and bank
    rows; each perturbation node keeps its top-k originals (k clamped to N).
    """
    n = record.num_nodes
    f_in = projected.shape[1]
    if bank.p.shape[1] != f_in:
        raise D.ShapeError(
            f"perturb_graph: bank dim {bank.p.shape[1]} vs features {f_in}")
    scores = D.div(D.matmul(projected, D.transpose(bank.p)),
                   D.DiffTensor([[np.sqrt(f_in)]]))
    weights, mask = attachment_weights(scores, bank.k)

    base = enc.dense_adjacency(n, record.edges)
    top = D.concat([D.DiffTensor(base), weights], axis=1)
    bottom = D.concat([D.transpose(weights), D.DiffTensor(np.zeros((bank.m, bank.m)))], axis=1)
    adjacency = D.concat([top, bottom], axis=0)
    features = D.concat([projected, bank.p], axis=0)
    return PerturbedGraph(record, features, adjacency, n, bank.m, mask)


def tangent_vectors(embeddings: D.DiffTensor, num_original: int) -> tuple[D.DiffTensor, D.DiffTensor]:
    """Raw tangent matrix V (d x M) and the pooled coordinate z (1 x d).

    Column m is the perturbation node's embedding minus z, with z pooled
    over original nodes only.
    """
    total = embeddings.shape[0]
    m = total - num_original
    z = enc.mean_pool(embeddings, num_original)
    pert = D.slice2d(embeddings, (num_original, total), (0, embeddings.shape[1]))
    rows = D.sub(pert, D.broadcast_rows(z, m))
    return D.transpose(rows), z


def _fallback_direction(d: int, col: int, predecessors: list[np.ndarray]) -> np.ndarray:
    rng = np.random.default_rng([_FALLBACK_SEED, col])
    v = rng.normal(size=(d, 1))
    for q in predecessors:
        v = v - q * float((q.T @ v)[0, 0])
    return v / np.linalg.norm(v)


def orthogonal_frame(v: D.DiffTensor, length_mode: str = "tangent-norm",
                     ) -> tuple[D.DiffTensor, int]:
    """Modified Gram-Schmidt with length recovery, on the tape.

    Each orthonormal direction is rescaled to the raw column norm
    (``tangent-norm``) or to the residual norm |R_mm| (``qr-diagonal``).
    A column whose residual collapses below ``DEGENERATE_TOL`` relative to
    its own norm is replaced by a fixed seeded direction orthogonalized
    against its predecessors, with length ||v_m|| + tol; such events carry no
    gradient and are counted in the returned diagnostic.
    """
    if length_mode not in ("tangent-norm", "qr-diagonal"):
        raise ValueError(f"orthogonal_frame: unknown length_mode {length_mode!r}")
    d, m = v.shape
    qs: list[D.DiffTensor] = []
    ws: list[D.DiffTensor] = []
    degenerate = 0
    for col in range(m):
        raw = D.slice2d(v, (0, d), (col, col + 1))
        u = raw
        for q in qs:
            u = D.sub(u, D.mul(q, D.dot(q, u)))
        raw_norm = float(np.linalg.norm(raw.values))
        res_norm = float(np.linalg.norm(u.values))
        if res_norm <= DEGENERATE_TOL * raw_norm or raw_norm == 0.0:
            degenerate += 1
            direction = _fallback_direction(d, col, [q.values for q in qs])
            q = D.DiffTensor(direction)
            w = D.DiffTensor(direction * (raw_norm + DEGENERATE_TOL))
        else:
            q = D.div(u, D.sqrt(D.frobenius_sq(u)))
            if length_mode == "tangent-norm":
                w = D.mul(q, D.sqrt(D.frobenius_sq(raw)))
            else:
                w = D.mul(q, D.sqrt(D.frobenius_sq(u)))
        qs.append(q)
        ws.append(w)
    return D.concat(ws, axis=1), degenerate


def local_metric(w: D.DiffTensor, jitter: float = METRIC_JITTER) -> D.DiffTensor:
    """Full Gram metric G = W^T W + jitter * I (SPD by construction)."""
    m = w.shape[1]
    return D.add(D.matmul(D.transpose(w), w), D.DiffTensor(jitter * np.eye(m)))


def build_frame(record: GraphRecord, params: enc.EncoderParams,
                bank: PerturbationBank,
                projection: np.ndarray | D.DiffTensor | None,
                train_mode: bool = False,
                rng: np.random.Generator | None = None,
                length_mode: str = "tangent-norm") -> FramedEmbedding:
    """Full local-geometry forward for one record."""
    feats = D.DiffTensor(record.features)
    if projection is not None:
        feats = D.matmul(feats, D.constant(projection))
    pg = perturb_graph(record, feats, bank)
    emb = enc.gcn_forward(params, pg.features, pg.adjacency,
                          train_mode=train_mode, rng=rng)
    v, z = tangent_vectors(emb, pg.num_original)
    w, degenerate = orthogonal_frame(v, length_mode=length_mode)
    g = local_metric(w)
    return FramedEmbedding(z=z, w=w, g=g, degenerate_columns=degenerate, record=record)

"""Two-layer graph convolution with symmetric normalization and mean pooling.

The encoder runs on dense adjacency tensors so that learned perturbation-edge
weights stay differentiable through the normalization. All forward math is
tape ops; nothing here touches global state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from manifold_glue import diff as D

__all__ = [
    "EncoderParams",
    "init_encoder_values",
    "make_projection",
    "normalized_adjacency",
    "gcn_forward",
    "mean_pool",
    "dense_adjacency",
]


@dataclass
class EncoderParams:
    """Layer weights as tensors (tape leaves during training)."""

    w1: D.DiffTensor
    b1: D.DiffTensor
    w2: D.DiffTensor
    b2: D.DiffTensor
    dropout: float = 0.1

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


def init_encoder_values(f_in: int, d_hidden: int, d_out: int,
                        rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform layer weights, zero biases."""
    def glorot(fan_in, fan_out):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_in, fan_out))

    return {
        "encoder.w1": glorot(f_in, d_hidden),
        "encoder.b1": np.zeros((1, d_hidden)),
        "encoder.w2": glorot(d_hidden, d_out),
        "encoder.b2": np.zeros((1, d_out)),
    }


def make_projection(f_raw: int, f_in: int, seed_material) -> np.ndarray:
    """Seeded Gaussian projection unifying a raw feature dim onto ``f_in``."""
    rng = np.random.default_rng(seed_material)
    return rng.normal(0.0, 1.0 / np.sqrt(f_raw), size=(f_raw, f_in))


def dense_adjacency(num_nodes: int, edges, weight: float = 1.0) -> np.ndarray:
    a = np.zeros((num_nodes, num_nodes))
    for u, v in edges:
        a[u, v] = weight
        a[v, u] = weight
    return a


def normalized_adjacency(adj: D.DiffTensor) -> D.DiffTensor:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}."""
    n = adj.shape[0]
    if adj.shape[0] != adj.shape[1]:
        raise D.ShapeError(f"adjacency must be square, got {adj.shape}")
    a_hat = D.add(adj, D.DiffTensor(np.eye(n)))
    deg = D.matmul(a_hat, D.DiffTensor(np.ones((n, 1))))
    dinv = D.power(deg, -0.5)
    left = D.matmul(dinv, D.DiffTensor(np.ones((1, n))))
    right = D.matmul(D.DiffTensor(np.ones((n, 1))), D.transpose(dinv))
    return D.mul(D.mul(left, a_hat), right)


def gcn_forward(params: EncoderParams, features: D.DiffTensor, adj: D.DiffTensor,
                train_mode: bool = False,
                rng: np.random.Generator | None = None) -> D.DiffTensor:
    """Node embeddings for one graph: H = Â ReLU(Â X W1 + b1) W2 + b2.

    Dropout is applied between the layers only in train mode, with a mask
    drawn from ``rng`` (inverted scaling, so eval needs no correction).
    """
    n = features.shape[0]
    a_hat = normalized_adjacency(adj)
    h = D.relu(D.add(D.matmul(D.matmul(a_hat, features), params.w1),
                     D.broadcast_rows(params.b1, n)))
    if train_mode and params.dropout > 0.0:
        if rng is None:
            raise ValueError("gcn_forward: train_mode dropout needs an rng")
        keep = (rng.random(h.shape) >= params.dropout) / (1.0 - params.dropout)
        h = D.mul(h, D.DiffTensor(keep))
    return D.add(D.matmul(D.matmul(a_hat, h), params.w2),
                 D.broadcast_rows(params.b2, n))


def mean_pool(node_embeddings: D.DiffTensor, num_original: int) -> D.DiffTensor:
    """Mean over the first ``num_original`` rows; returns a 1 x d row."""
    if num_original < 1:
        raise D.ShapeError("mean_pool: empty record")
    sliced = D.slice2d(node_embeddings, (0, num_original), (0, node_embeddings.shape[1]))
    pooler = D.DiffTensor(np.full((1, num_original), 1.0 / num_original))
    return D.matmul(pooler, sliced)

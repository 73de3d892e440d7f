"""Per-domain Riemannian prototypes: EMA anchors and the contrastive pull.

A prototype is the pair (z, log G) for one source domain, updated between
steps by exponential moving average. Log-space averaging keeps the implied
metric SPD: the exponential of any symmetric mean is positive definite.
Prototypes are stop-gradient targets; only the encoder side of the
contrastive loss carries gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from manifold_glue import diff as D
from manifold_glue import gluing as gl
from manifold_glue.frame import FramedEmbedding

__all__ = [
    "PrototypeError",
    "RiemannianPrototype",
    "batch_statistics",
    "ema_update",
    "proto_contrastive_loss",
    "nearest_prototypes",
]


class PrototypeError(KeyError):
    pass


@dataclass
class RiemannianPrototype:
    domain: str
    z: np.ndarray          # 1 x d
    log_g: np.ndarray      # M x M symmetric
    update_count: int = 0

    def validate(self) -> None:
        asym = np.abs(self.log_g - self.log_g.T).max()
        if asym > 1e-10:
            raise ValueError(f"prototype {self.domain}: log_g asymmetry {asym:.3e}")

    def metric(self) -> np.ndarray:
        """exp(log G); SPD for any symmetric log_g."""
        return gl.sym_expm_np(self.log_g)


def batch_statistics(framed: list[FramedEmbedding]) -> tuple[np.ndarray, np.ndarray]:
    """Detached batch means of z and log G, for the EMA update."""
    if not framed:
        raise ValueError("batch_statistics: empty batch")
    z_mean = np.mean([f.z.values for f in framed], axis=0)
    logs = []
    for f in framed:
        log_g, _ = gl.spd_log_and_det(D.DiffTensor(f.g.values))
        logs.append(0.5 * (log_g.values + log_g.values.T))
    return z_mean, np.mean(logs, axis=0)


def ema_update(proto: RiemannianPrototype, batch_z_mean: np.ndarray,
               batch_log_g_mean: np.ndarray, beta: float) -> RiemannianPrototype:
    """Convex EMA step; the very first update adopts the batch mean outright
    to avoid dragging in an arbitrary initialization."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"ema_update: beta must be in (0, 1), got {beta}")
    if proto.update_count == 0:
        z, log_g = batch_z_mean.copy(), batch_log_g_mean.copy()
    else:
        z = beta * proto.z + (1.0 - beta) * batch_z_mean
        log_g = beta * proto.log_g + (1.0 - beta) * batch_log_g_mean
    return replace(proto, z=z, log_g=0.5 * (log_g + log_g.T),
                   update_count=proto.update_count + 1)


def _cosine(z: D.DiffTensor, anchor: np.ndarray) -> D.DiffTensor:
    a = D.DiffTensor(anchor)
    denom = D.mul(D.sqrt(D.frobenius_sq(z)), D.DiffTensor([[float(np.linalg.norm(anchor))]]))
    return D.div(D.dot(z, a), denom)


def proto_contrastive_loss(framed: list[FramedEmbedding], domains: list[str],
                           protos: dict[str, RiemannianPrototype],
                           temperature: float = 1.0) -> D.DiffTensor:
    """Mean over the batch of -log softmax over prototype similarities, with
    each sample's own domain in the numerator. Cosine similarity; gradients
    reach z only, never the prototypes."""
    if temperature <= 0:
        raise ValueError("proto_contrastive_loss: temperature must be positive")
    if len(framed) != len(domains):
        raise ValueError("proto_contrastive_loss: framed/domains length mismatch")
    names = sorted(protos)
    for dom in domains:
        if dom not in protos:
            raise PrototypeError(f"no prototype for domain {dom!r}")
    inv_t = D.DiffTensor([[1.0 / temperature]])
    acc = None
    for f, dom in zip(framed, domains):
        sims = [D.mul(_cosine(f.z, protos[name].z), inv_t) for name in names]
        logits = D.concat(sims, axis=1)
        probs = D.softmax_rows(logits)
        own = names.index(dom)
        term = D.neg(D.log(D.slice2d(probs, (0, 1), (own, own + 1))))
        acc = term if acc is None else D.add(acc, term)
    return D.div(acc, D.DiffTensor([[float(len(framed))]]))


def nearest_prototypes(z: np.ndarray, protos: dict[str, RiemannianPrototype],
                       k: int) -> list[str]:
    """Domains of the k nearest prototypes by Euclidean distance in z,
    ties broken lexicographically."""
    if k > len(protos):
        raise ValueError(f"nearest_prototypes: k={k} exceeds {len(protos)} prototypes")
    z = np.asarray(z, dtype=float).reshape(1, -1)
    ranked = sorted((float(np.linalg.norm(p.z - z)), name) for name, p in protos.items())
    return [name for _, name in ranked[:k]]

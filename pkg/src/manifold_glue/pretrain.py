"""Three-stage pre-training: local contrast, cross-domain gluing, refinement.

Every epoch runs the same schedule. Stage 1 trains the encoder and the
perturbation bank with a two-view contrastive loss (plus the prototype pull
after warm-up) and refreshes the per-domain EMA prototypes. Stage 2 builds a
KNN skeleton over the mixed batch in embedding space, samples adjacent-edge
pairs, and descends the holonomy and curvature losses. Stage 3 repeats the
geometric step per dataset, using the stored source-graph edges when the
dataset came from ego sampling and an intra-dataset KNN skeleton otherwise.

One Adam optimizer covers all parameters across stages; the learning rate
follows cosine annealing over epochs. All randomness flows through a single
generator whose state is checkpointed, so a resumed run replays the exact
batch order, augmentations, and dropout masks of an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from manifold_glue import diff as D
from manifold_glue import encoder as enc
from manifold_glue import gluing as gl
from manifold_glue import prototypes as pt
from manifold_glue.data import DomainDataset, GraphRecord, make_batches
from manifold_glue.frame import FramedEmbedding, PerturbationBank, build_frame

__all__ = [
    "PretrainConfig",
    "SkeletonGraph",
    "ModelState",
    "NonFiniteLossError",
    "local_contrastive_loss",
    "cross_dataset_knn",
    "sample_triangle_paths",
    "augment_record",
    "init_state",
    "run_pretrain",
    "frame_record",
    "domain_seed",
    "METRICS_COLUMNS",
]

METRICS_COLUMNS = ("epoch", "stage", "batch", "loss_local", "loss_proto",
                   "loss_holo", "loss_curv", "loss_total", "lr", "wall_ms")


class NonFiniteLossError(RuntimeError):
    def __init__(self, stage: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at stage {stage}, batch {batch}: {detail}")
        self.stage = stage
        self.batch = batch
        self.detail = detail


@dataclass
class PretrainConfig:
    epochs: int = 20
    warmup_epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-4
    dropout: float = 0.1
    input_dim: int = 128
    hidden_dim: int = 512
    embed_dim: int = 512
    manifold_dim: int = 32
    k_perturb: int = 15
    knn_k: int = 15
    n_triangle_samples: int = 8
    temperature: float = 1.0
    beta_ema: float = 0.99
    seed: int = 0
    weight_local: float = 1.0
    weight_proto: float = 1.0
    weight_holo: float = 1.0
    weight_curv: float = 1.0
    edge_drop: float = 0.2
    feature_mask: float = 0.2
    length_mode: str = "tangent-norm"

    def validate(self) -> None:
        positive = ("epochs", "batch_size", "learning_rate", "input_dim", "hidden_dim",
                    "embed_dim", "manifold_dim", "k_perturb", "knn_k",
                    "n_triangle_samples", "temperature")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config: {name} must be positive")
        for name in ("weight_local", "weight_proto", "weight_holo", "weight_curv"):
            if getattr(self, name) < 0:
                raise ValueError(f"config: {name} must be >= 0")
        if not 0.0 < self.beta_ema < 1.0:
            raise ValueError("config: beta_ema must be in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("config: dropout must be in [0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("config: warmup_epochs must be >= 0")


@dataclass
class SkeletonGraph:
    """KNN skeleton over batch records; node i is record i of the batch."""

    num_nodes: int
    edges: list[tuple[int, int]]

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return [sorted(a) for a in adj]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class ModelState:
    """Everything a checkpoint holds."""

    config: PretrainConfig
    params: dict[str, np.ndarray]
    prototypes: dict[str, pt.RiemannianPrototype]
    adam: AdamState
    epoch: int = 0
    rng_state: dict | None = None
    domain_meta: dict[str, dict] = field(default_factory=dict)


def domain_seed(seed: int, domain: str) -> list[int]:
    digest = hashlib.sha256(domain.encode("utf-8")).digest()
    return [seed, int.from_bytes(digest[:4], "little")]


def init_state(datasets: list[DomainDataset], config: PretrainConfig) -> ModelState:
    config.validate()
    rng = np.random.default_rng([config.seed, 0xA11CE])
    params = enc.init_encoder_values(config.input_dim, config.hidden_dim,
                                     config.embed_dim, rng)
    params["bank.p"] = rng.normal(0.0, 1.0 / np.sqrt(config.input_dim),
                                  size=(config.manifold_dim, config.input_dim))
    meta = {}
    for ds in datasets:
        if ds.feature_dim != config.input_dim:
            params[f"proj.{ds.name}"] = enc.make_projection(
                ds.feature_dim, config.input_dim, domain_seed(config.seed, ds.name))
        meta[ds.name] = {"task": ds.task, "num_classes": ds.num_classes,
                         "feature_dim": ds.feature_dim}
    protos = {ds.name: pt.RiemannianPrototype(
        domain=ds.name,
        z=np.zeros((1, config.embed_dim)),
        log_g=np.zeros((config.manifold_dim, config.manifold_dim)),
        update_count=0) for ds in datasets}
    state = ModelState(config=config, params=params, prototypes=protos,
                       adam=AdamState(), domain_meta=meta)
    state.rng_state = np.random.default_rng(config.seed).bit_generator.state
    return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.step += 1
    t = state.step
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(epoch: int, config: PretrainConfig) -> float:
    lr0 = config.learning_rate
    lr_min = lr0 / 100.0
    t = min(epoch, config.epochs)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t / config.epochs))


# ---------------------------------------------------------------------------
# augmentation and the contrastive objective
# ---------------------------------------------------------------------------

def augment_record(record: GraphRecord, rng: np.random.Generator,
                   edge_drop: float, feature_mask: float) -> GraphRecord:
    """Seeded edge dropping and per-entry feature masking."""
    edges = [e for e in record.edges if rng.random() >= edge_drop]
    feats = record.features.copy()
    if feature_mask > 0:
        feats = feats * (rng.random(feats.shape) >= feature_mask)
    return GraphRecord(record.num_nodes, edges, feats, record.label, record.domain)


def local_contrastive_loss(z_view_a: list[D.DiffTensor], z_view_b: list[D.DiffTensor],
                           temperature: float = 1.0) -> D.DiffTensor:
    """Symmetric InfoNCE over 2N views with cosine similarity.

    For each anchor the positive is its record's other view; all remaining
    2N-2 embeddings are negatives. A batch of one record has no negatives
    and is rejected.
    """
    n = len(z_view_a)
    if n != len(z_view_b):
        raise ValueError("local_contrastive_loss: view lists differ in length")
    if n < 2:
        raise ValueError("local_contrastive_loss: need at least two records")
    rows = []
    for za, zb in zip(z_view_a, z_view_b):
        rows.append(D.div(za, D.sqrt(D.frobenius_sq(za))))
        rows.append(D.div(zb, D.sqrt(D.frobenius_sq(zb))))
    zmat = D.concat(rows, axis=0)
    sims = D.div(D.matmul(zmat, D.transpose(zmat)), D.DiffTensor([[temperature]]))
    # push the self-similarity out of every softmax
    sims = D.add(sims, D.DiffTensor(-1e9 * np.eye(2 * n)))
    probs = D.softmax_rows(sims)
    acc = None
    for i in range(2 * n):
        partner = i + 1 if i % 2 == 0 else i - 1
        term = D.neg(D.log(D.slice2d(probs, (i, i + 1), (partner, partner + 1))))
        acc = term if acc is None else D.add(acc, term)
    return D.div(acc, D.DiffTensor([[float(2 * n)]]))


# ---------------------------------------------------------------------------
# skeleton construction
# ---------------------------------------------------------------------------

def cross_dataset_knn(z_rows: np.ndarray, knn_k: int) -> SkeletonGraph:
    """Mutualized Euclidean KNN over batch embeddings, no domain restriction."""
    n = z_rows.shape[0]
    edges = set()
    if n >= 2:
        diff = z_rows[:, None, :] - z_rows[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        for i in range(n):
            order = np.argsort(dist[i], kind="stable")[: min(knn_k, n - 1)]
            for j in order:
                edges.add((min(i, int(j)), max(i, int(j))))
    return SkeletonGraph(num_nodes=n, edges=sorted(edges))


def sample_triangle_paths(skeleton: SkeletonGraph, n_samples: int,
                          rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Adjacent-edge pairs (i, j, k): center j drawn with weight deg(deg-1)/2,
    then an unordered neighbor pair uniformly. Duplicates allowed."""
    adj = skeleton.neighbors()
    weights = np.array([len(a) * (len(a) - 1) / 2 for a in adj], dtype=float)
    total = weights.sum()
    if total == 0:
        return []
    probs = weights / total
    paths = []
    for _ in range(n_samples):
        j = int(rng.choice(skeleton.num_nodes, p=probs))
        a, b = rng.choice(len(adj[j]), size=2, replace=False)
        i, k = adj[j][int(a)], adj[j][int(b)]
        paths.append((min(i, k), j, max(i, k)))
    return paths


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def frame_record(record: GraphRecord, leaves: dict[str, D.DiffTensor],
                 config: PretrainConfig, train_mode: bool,
                 rng: np.random.Generator | None) -> FramedEmbedding:
    params = enc.EncoderParams(leaves["encoder.w1"], leaves["encoder.b1"],
                               leaves["encoder.w2"], leaves["encoder.b2"],
                               dropout=config.dropout)
    bank = PerturbationBank(p=leaves["bank.p"], k=config.k_perturb)
    return build_frame(record, params, bank, leaves.get(f"proj.{record.domain}"),
                       train_mode=train_mode, rng=rng, length_mode=config.length_mode)


def _make_leaves(tape: D.Tape, params: dict[str, np.ndarray]) -> dict[str, D.DiffTensor]:
    return {name: tape.leaf(val) for name, val in params.items()}


def _grads_by_name(grad_map, leaves) -> dict[str, np.ndarray]:
    return {name: grad_map[leaf.node_id].values for name, leaf in leaves.items()}


def _require_finite(value: float, stage: int, batch: int, name: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(stage, batch, f"{name}={value!r}")
    return value


def _geometric_step(framed: list[FramedEmbedding], paths, leaves, config,
                    state, lr, stage, batch_idx, epoch, sink, t0) -> None:
    metrics = {i: f.g for i, f in enumerate(framed)}
    loss_holo = gl.holonomy_loss(paths, metrics)
    loss_curv = gl.curvature_loss(paths, metrics)
    total = D.add(D.mul(loss_holo, D.DiffTensor([[config.weight_holo]])),
                  D.mul(loss_curv, D.DiffTensor([[config.weight_curv]])))
    _require_finite(total.item(), stage, batch_idx, "loss_geo")
    grads = _grads_by_name(D.backward(total), leaves)
    adam_step(state.params, grads, state.adam, lr)
    _emit(sink, epoch, stage, batch_idx, 0.0, 0.0, loss_holo.item(),
          loss_curv.item(), total.item(), lr, t0)


def _emit(sink, epoch, stage, batch, l_local, l_proto, l_holo, l_curv,
          l_total, lr, t0) -> None:
    if sink is None:
        return
    sink({"epoch": epoch, "stage": stage, "batch": batch,
          "loss_local": l_local, "loss_proto": l_proto, "loss_holo": l_holo,
          "loss_curv": l_curv, "loss_total": l_total, "lr": lr,
          "wall_ms": (time.monotonic() - t0) * 1000.0})


def run_pretrain(datasets: list[DomainDataset], config: PretrainConfig,
                 sink=None, state: ModelState | None = None,
                 on_epoch_end=None) -> ModelState:
    """Run (or resume) pre-training; returns the final model state.

    ``sink`` receives one metrics dict per stage per batch; ``on_epoch_end``
    receives the state after each epoch (checkpointing hook). A non-finite
    loss raises ``NonFiniteLossError`` without touching the last epoch's
    state on disk.
    """
    if not datasets:
        raise ValueError("run_pretrain: need at least one dataset")
    if state is None:
        state = init_state(datasets, config)
    config = state.config
    by_name = {ds.name: ds for ds in datasets}

    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    for epoch in range(state.epoch, config.epochs):
        lr = cosine_lr(epoch, config)
        t0 = time.monotonic()

        # Stage 1: local construction with contrastive learning
        for b_idx, batch in enumerate(make_batches(datasets, config.batch_size, rng)):
            tape = D.Tape()
            leaves = _make_leaves(tape, state.params)
            framed_a, framed_b = [], []
            for rec in batch.records:
                va = augment_record(rec, rng, config.edge_drop, config.feature_mask)
                vb = augment_record(rec, rng, config.edge_drop, config.feature_mask)
                framed_a.append(frame_record(va, leaves, config, True, rng))
                framed_b.append(frame_record(vb, leaves, config, True, rng))
            if len(batch.records) < 2:
                continue
            loss_local = local_contrastive_loss([f.z for f in framed_a],
                                                [f.z for f in framed_b],
                                                config.temperature)
            loss_proto_val = 0.0
            total = D.mul(loss_local, D.DiffTensor([[config.weight_local]]))
            # prototypes enter the objective after warm-up, and never before
            # each has absorbed at least one batch (a zero anchor has no
            # direction to pull toward)
            protos_ready = all(p.update_count > 0 for p in state.prototypes.values())
            if epoch >= config.warmup_epochs and protos_ready:
                domains = [r.domain for r in batch.records] * 2
                loss_proto = pt.proto_contrastive_loss(
                    framed_a + framed_b, domains, state.prototypes, config.temperature)
                loss_proto_val = loss_proto.item()
                total = D.add(total, D.mul(loss_proto, D.DiffTensor([[config.weight_proto]])))
            _require_finite(total.item(), 1, b_idx, "loss_local_total")
            grads = _grads_by_name(D.backward(total), leaves)
            adam_step(state.params, grads, state.adam, lr)

            # EMA prototype refresh, per domain present in the batch
            per_domain: dict[str, list[FramedEmbedding]] = {}
            for f in framed_a + framed_b:
                per_domain.setdefault(f.record.domain, []).append(f)
            for dom, fs in sorted(per_domain.items()):
                z_mean, log_mean = pt.batch_statistics(fs)
                state.prototypes[dom] = pt.ema_update(
                    state.prototypes[dom], z_mean, log_mean, config.beta_ema)
            _emit(sink, epoch, 1, b_idx, loss_local.item(), loss_proto_val,
                  0.0, 0.0, total.item(), lr, t0)
            t0 = time.monotonic()

        # Stage 2: cross-dataset skeleton gluing
        for b_idx, batch in enumerate(make_batches(datasets, config.batch_size, rng)):
            tape = D.Tape()
            leaves = _make_leaves(tape, state.params)
            framed = [frame_record(rec, leaves, config, True, rng)
                      for rec in batch.records]
            skeleton = cross_dataset_knn(
                np.vstack([f.z.values for f in framed]), config.knn_k)
            paths = sample_triangle_paths(skeleton, config.n_triangle_samples, rng)
            if not paths:
                _emit(sink, epoch, 2, b_idx, 0.0, 0.0, 0.0, 0.0, 0.0, lr, t0)
                t0 = time.monotonic()
                continue
            _geometric_step(framed, paths, leaves, config, state, lr, 2,
                            b_idx, epoch, sink, t0)
            t0 = time.monotonic()

        # Stage 3: per-dataset refinement
        for ds_name in sorted(by_name):
            ds = by_name[ds_name]
            if ds.record_edges:
                # source-graph skeleton: records whose centers were adjacent
                skeleton = SkeletonGraph(len(ds.records),
                                         sorted(set(ds.record_edges)))
                paths = sample_triangle_paths(skeleton, config.n_triangle_samples, rng)
                if not paths:
                    continue
                needed = sorted({n for p in paths for n in p})
                tape = D.Tape()
                leaves = _make_leaves(tape, state.params)
                framed_map = {i: frame_record(ds.records[i], leaves, config, True, rng)
                              for i in needed}
                framed = [framed_map[i] for i in needed]
                remap = {old: new for new, old in enumerate(needed)}
                local_paths = [(remap[i], remap[j], remap[k]) for i, j, k in paths]
                _geometric_step(framed, local_paths, leaves, config, state, lr,
                                3, 0, epoch, sink, t0)
                t0 = time.monotonic()
            else:
                for b_idx, batch in enumerate(make_batches([ds], config.batch_size, rng)):
                    tape = D.Tape()
                    leaves = _make_leaves(tape, state.params)
                    framed = [frame_record(rec, leaves, config, True, rng)
                              for rec in batch.records]
                    skeleton = cross_dataset_knn(
                        np.vstack([f.z.values for f in framed]), config.knn_k)
                    paths = sample_triangle_paths(skeleton, config.n_triangle_samples, rng)
                    if not paths:
                        _emit(sink, epoch, 3, b_idx, 0.0, 0.0, 0.0, 0.0, 0.0, lr, t0)
                        t0 = time.monotonic()
                        continue
                    _geometric_step(framed, paths, leaves, config, state, lr,
                                    3, b_idx, epoch, sink, t0)
                    t0 = time.monotonic()

        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def config_dict(config: PretrainConfig) -> dict:
    return asdict(config)

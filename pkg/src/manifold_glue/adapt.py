"""Few-shot target adaptation against a frozen pre-trained geometry.

The pre-trained encoder, perturbation bank, and projections never move here;
training touches only a prompt matrix Q (initialized to the identity, so the
adapted state starts exactly at the pre-trained one), a small gating network
over the prototype experts, and the task head. Geometric consistency comes
from gluing the adapted sample onto a transfer graph of its nearest
prototypes with the same holonomy and curvature penalties used in
pre-training. The Geometric Transfer Metric is those two penalties measured
without gradients: their sum quantifies how much deformation the target
demands of the learned manifold.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from manifold_glue import diff as D
from manifold_glue import gluing as gl
from manifold_glue import prototypes as pt
from manifold_glue.data import DomainDataset
from manifold_glue.encoder import make_projection
from manifold_glue.frame import FramedEmbedding, local_metric, orthogonal_frame
from manifold_glue.pretrain import (AdamState, ModelState, adam_step,
                                    domain_seed, frame_record)

__all__ = [
    "AdaptConfig",
    "TransferGraph",
    "GtmReport",
    "AdaptResult",
    "prompt_adapt",
    "build_transfer_graph",
    "moe_align",
    "task_representation",
    "glue_losses",
    "gtm",
    "run_adapt",
    "split_few_shot",
    "freeze_checksum",
    "ADAPT_METRICS_COLUMNS",
]

ADAPT_METRICS_COLUMNS = ("epoch", "loss_task", "loss_holo", "loss_curv",
                         "gtm", "val_acc", "test_acc")


@dataclass
class AdaptConfig:
    epochs: int = 30
    shots: int = 5
    learning_rate: float = 1e-3
    lam: float = 1.0
    proto_k: int = 3
    gate_hidden: int = 16
    seed: int = 0
    val_fraction: float = 0.1
    use_adapted_z: bool = False

    def validate(self) -> None:
        if self.shots < 1 or self.epochs < 1 or self.proto_k < 1:
            raise ValueError("adapt config: shots, epochs, proto_k must be >= 1")
        if self.lam < 0:
            raise ValueError("adapt config: lambda must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("adapt config: val_fraction must be in [0, 1)")


@dataclass
class TransferGraph:
    """Target sample (node 0) starred onto its nearest prototypes (1..k)."""

    proto_names: list[str]
    metrics: dict[int, D.DiffTensor]
    edges: list[tuple[int, int]]
    paths: list[tuple[int, int, int]]


@dataclass
class GtmReport:
    delta_h: float
    delta_c: float

    @property
    def gtm(self) -> float:
        return self.delta_h + self.delta_c

    def to_dict(self) -> dict:
        return {"delta_h": self.delta_h, "delta_c": self.delta_c, "gtm": self.gtm}


@dataclass
class AdaptResult:
    prompt: dict[str, np.ndarray]
    rows: list[dict]
    report: GtmReport
    test_acc: float
    val_acc: float
    frozen_core_intact: bool
    splits: dict[str, list[int]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# adapted geometry
# ---------------------------------------------------------------------------

def prompt_adapt(framed: FramedEmbedding, q: D.DiffTensor,
                 length_mode: str = "tangent-norm") -> FramedEmbedding:
    """Apply the prompt to coordinates and frame: z -> Qz, columns w -> Qw,
    then re-orthogonalize so the adapted metric is assembled exactly like the
    pre-trained one (full Gram plus jitter, diagonal in the ideal case)."""
    if q.shape[0] != q.shape[1] or q.shape[0] != framed.z.shape[1]:
        raise D.ShapeError(f"prompt_adapt: Q {q.shape} vs z {framed.z.shape}")
    z_adapt = D.matmul(framed.z, D.transpose(q))
    mapped = D.matmul(q, framed.w)
    w_adapt, degenerate = orthogonal_frame(mapped, length_mode=length_mode)
    return FramedEmbedding(z=z_adapt, w=w_adapt, g=local_metric(w_adapt),
                           degenerate_columns=degenerate, record=framed.record)


def build_transfer_graph(z_adapt: np.ndarray, g_adapt: D.DiffTensor,
                         protos: dict[str, pt.RiemannianPrototype],
                         k: int) -> TransferGraph:
    """Star the target onto its k nearest prototypes (z distance), adding
    consecutive prototype-prototype edges so adjacent-edge pairs exist.

    With k = 1 no triangle exists; the glue losses fall back to the
    single-edge terms ||P - I||_F^2 and |log r|^2.
    """
    if not protos:
        raise ValueError("build_transfer_graph: no prototypes in checkpoint")
    if k < 1:
        raise ValueError("build_transfer_graph: k must be >= 1")
    names = pt.nearest_prototypes(z_adapt, protos, min(k, len(protos)))
    metrics: dict[int, D.DiffTensor] = {0: g_adapt}
    for idx, name in enumerate(names, start=1):
        metrics[idx] = D.DiffTensor(protos[name].metric())
    edges = [(0, i) for i in range(1, len(names) + 1)]
    edges += [(i, i + 1) for i in range(1, len(names))]
    paths = []
    for i in range(1, len(names)):
        paths.append((i, 0, i + 1))
        paths.append((0, i, i + 1))
    return TransferGraph(proto_names=names, metrics=metrics, edges=edges, paths=paths)


def glue_losses(tg: TransferGraph) -> tuple[D.DiffTensor, D.DiffTensor]:
    if tg.paths:
        return (gl.holonomy_loss(tg.paths, tg.metrics),
                gl.curvature_loss(tg.paths, tg.metrics))
    return gl.single_edge_glue_terms(tg.metrics[0], tg.metrics[1])


def gtm(tg: TransferGraph) -> GtmReport:
    """Measurement-only gluing penalties on the current transfer graph."""
    detached = TransferGraph(
        proto_names=tg.proto_names,
        metrics={i: D.DiffTensor(m.values) for i, m in tg.metrics.items()},
        edges=tg.edges, paths=tg.paths)
    holo, curv = glue_losses(detached)
    return GtmReport(delta_h=holo.item(), delta_c=curv.item())


def moe_align(z_adapt: D.DiffTensor, g_adapt: D.DiffTensor,
              protos: dict[str, pt.RiemannianPrototype],
              gate: dict[str, D.DiffTensor],
              ) -> tuple[D.DiffTensor, D.DiffTensor, D.DiffTensor]:
    """Mixture of prototype experts: a two-layer gate over the adapted
    coordinates and log-metric diagonal emits convex weights; the aligned
    log-metric is the weighted sum of prototype log-metrics.

    Returns (log_g_align, weights, log_g_adapt).
    """
    names = sorted(protos)
    log_adapt, _ = gl.spd_log_and_det(g_adapt)
    diag_row = D.transpose(D.diag_part(log_adapt))
    x = D.concat([z_adapt, diag_row], axis=1)
    h = D.relu(D.add(D.matmul(x, gate["gate.w1"]), gate["gate.b1"]))
    logits = D.add(D.matmul(h, gate["gate.w2"]), gate["gate.b2"])
    weights = D.softmax_rows(logits)
    acc = None
    for idx, name in enumerate(names):
        term = D.mul(D.DiffTensor(protos[name].log_g),
                     D.slice2d(weights, (0, 1), (idx, idx + 1)))
        acc = term if acc is None else D.add(acc, term)
    return acc, weights, log_adapt


def task_representation(z_pre: D.DiffTensor, log_g_adapt: D.DiffTensor,
                        log_g_align: D.DiffTensor,
                        z_adapt: D.DiffTensor | None = None,
                        use_adapted_z: bool = False) -> D.DiffTensor:
    """Final task vector [z; diag log G_adapt; diag log G_align] of length
    d + 2M. The coordinate block is the pre-prompt z by default; the adapted
    one is an opt-in switch."""
    z_block = z_adapt if (use_adapted_z and z_adapt is not None) else z_pre
    return D.concat([z_block,
                     D.transpose(D.diag_part(log_g_adapt)),
                     D.transpose(D.diag_part(log_g_align))], axis=1)


# ---------------------------------------------------------------------------
# heads and objective
# ---------------------------------------------------------------------------

def init_prompt_values(d: int, m: int, num_classes: int, gate_hidden: int,
                       task: str, num_protos: int,
                       rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Prompt starts at the identity; the gate's output layer starts at zero
    so the expert mixture opens uniform; heads start at zero logits."""
    rep = d + 2 * m
    vals = {
        "q": np.eye(d),
        "gate.w1": rng.normal(0.0, 0.1, size=(d + m, gate_hidden)),
        "gate.b1": np.zeros((1, gate_hidden)),
        "gate.w2": np.zeros((gate_hidden, num_protos)),
        "gate.b2": np.zeros((1, num_protos)),
    }
    if task == "link":
        for c in range(num_classes):
            vals[f"head.bilinear.{c}"] = np.zeros((rep, rep))
        vals["head.b"] = np.zeros((1, num_classes))
    else:
        vals["head.w"] = np.zeros((rep, num_classes))
        vals["head.b"] = np.zeros((1, num_classes))
    return vals


def head_logits(rep: D.DiffTensor, leaves: dict[str, D.DiffTensor],
                task: str, num_classes: int) -> D.DiffTensor:
    if task == "link":
        cols = []
        for c in range(num_classes):
            quad = D.matmul(D.matmul(rep, leaves[f"head.bilinear.{c}"]),
                            D.transpose(rep))
            cols.append(quad)
        return D.add(D.concat(cols, axis=1), leaves["head.b"])
    return D.add(D.matmul(rep, leaves["head.w"]), leaves["head.b"])


def cross_entropy(logits: D.DiffTensor, label: int) -> D.DiffTensor:
    probs = D.softmax_rows(logits)
    return D.neg(D.log(D.slice2d(probs, (0, 1), (label, label + 1))))


def split_few_shot(dataset: DomainDataset, shots: int, val_fraction: float,
                   rng: np.random.Generator) -> tuple[list[int], list[int], list[int]]:
    """Pick ``shots`` per class for training; split the rest into validation
    and test. A class with fewer than ``shots`` examples is a hard error."""
    by_label: dict[int, list[int]] = {}
    for i, rec in enumerate(dataset.records):
        if rec.label is None:
            raise ValueError(f"split_few_shot: record {i} has no label")
        by_label.setdefault(rec.label, []).append(i)
    train = []
    for label in sorted(by_label):
        pool = by_label[label]
        if len(pool) < shots:
            raise ValueError(
                f"split_few_shot: class {label} has {len(pool)} samples, needs {shots}")
        picked = rng.choice(len(pool), size=shots, replace=False)
        train.extend(pool[i] for i in sorted(picked))
    rest = [i for i in range(len(dataset.records)) if i not in set(train)]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    n_val = min(len(rest), max(1, int(round(val_fraction * len(rest))))) if rest else 0
    return sorted(train), sorted(rest[:n_val]), sorted(rest[n_val:])


def freeze_checksum(params: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# the adaptation loop
# ---------------------------------------------------------------------------

def _target_projection(state: ModelState, target: DomainDataset) -> np.ndarray | None:
    key = f"proj.{target.name}"
    if key in state.params:
        return state.params[key]
    if target.feature_dim != state.config.input_dim:
        return make_projection(target.feature_dim, state.config.input_dim,
                               domain_seed(state.config.seed, target.name))
    return None


def encode_frozen(state: ModelState, target: DomainDataset) -> list[FramedEmbedding]:
    """Framed embeddings of every record under the frozen pre-trained model."""
    consts = {name: D.DiffTensor(val) for name, val in state.params.items()}
    proj = _target_projection(state, target)
    if proj is not None:
        consts[f"proj.{target.name}"] = D.DiffTensor(proj)
    return [frame_record(rec, consts, state.config, False, None)
            for rec in target.records]


def _sample_forward(framed, leaves, protos, cfg, task, num_classes, state_cfg):
    adapted = prompt_adapt(framed, leaves["q"], state_cfg.length_mode)
    log_align, weights, log_adapt = moe_align(adapted.z, adapted.g, protos,
                                              leaves)
    rep = task_representation(framed.z, log_adapt, log_align,
                              z_adapt=adapted.z, use_adapted_z=cfg.use_adapted_z)
    logits = head_logits(rep, leaves, task, num_classes)
    tg = build_transfer_graph(adapted.z.values, adapted.g, protos, cfg.proto_k)
    return adapted, logits, tg


def run_adapt(state: ModelState, target: DomainDataset, cfg: AdaptConfig,
              sink=None) -> AdaptResult:
    """Adapt to a labeled target dataset with frozen pre-trained parameters.

    Emits one metrics row per epoch (plus an epoch-0 row measured before any
    update, whose GTM is the raw target's). Gluing losses are always
    measured; lambda controls only whether they receive gradient.
    """
    cfg.validate()
    if not state.prototypes:
        raise ValueError("run_adapt: checkpoint has no prototypes")
    num_classes = target.num_classes
    if num_classes < 2:
        raise ValueError("run_adapt: target needs at least two classes")

    before = freeze_checksum(state.params)
    rng = np.random.default_rng(cfg.seed)
    frames = encode_frozen(state, target)
    train_idx, val_idx, test_idx = split_few_shot(target, cfg.shots,
                                                  cfg.val_fraction, rng)
    d = state.config.embed_dim
    m = state.config.manifold_dim
    prompt = init_prompt_values(d, m, num_classes, cfg.gate_hidden,
                                target.task, len(state.prototypes), rng)
    adam = AdamState()
    protos = state.prototypes

    def evaluate(indices: list[int], leaves) -> float:
        if not indices:
            return float("nan")
        hits = 0
        for i in indices:
            _, logits, _ = _sample_forward(frames[i], leaves, protos, cfg,
                                           target.task, num_classes, state.config)
            if int(np.argmax(logits.values[0])) == target.records[i].label:
                hits += 1
        return hits / len(indices)

    rows: list[dict] = []
    report = GtmReport(0.0, 0.0)

    def run_epoch(epoch: int, update: bool) -> None:
        nonlocal report
        tape = D.Tape()
        leaves = {name: tape.leaf(val) for name, val in prompt.items()}
        ce_acc = None
        holo_acc = curv_acc = 0.0
        glue_acc = None
        for i in train_idx:
            adapted, logits, tg = _sample_forward(
                frames[i], leaves, protos, cfg, target.task, num_classes, state.config)
            ce = cross_entropy(logits, target.records[i].label)
            ce_acc = ce if ce_acc is None else D.add(ce_acc, ce)
            holo, curv = glue_losses(tg)
            holo_acc += holo.item()
            curv_acc += curv.item()
            if cfg.lam > 0:
                pair = D.add(holo, curv)
                glue_acc = pair if glue_acc is None else D.add(glue_acc, pair)
        n = float(len(train_idx))
        loss_task = D.div(ce_acc, D.DiffTensor([[n]]))
        total = loss_task
        if cfg.lam > 0 and glue_acc is not None:
            total = D.add(total, D.mul(D.div(glue_acc, D.DiffTensor([[n]])),
                                       D.DiffTensor([[cfg.lam]])))
        if not np.isfinite(total.item()):
            raise gl.ConvergenceError("run_adapt: non-finite adaptation loss",
                                      total.item())
        if update:
            grad_map = D.backward(total)
            grads = {name: grad_map[leaf.node_id].values
                     for name, leaf in leaves.items()}
            adam_step(prompt, grads, adam, cfg.learning_rate)
        report = GtmReport(delta_h=holo_acc / n, delta_c=curv_acc / n)
        eval_leaves = {name: D.DiffTensor(val) for name, val in prompt.items()}
        row = {"epoch": epoch, "loss_task": loss_task.item(),
               "loss_holo": report.delta_h, "loss_curv": report.delta_c,
               "gtm": report.gtm, "val_acc": evaluate(val_idx, eval_leaves),
               "test_acc": evaluate(test_idx, eval_leaves)}
        rows.append(row)
        if sink is not None:
            sink(row)

    run_epoch(0, update=False)
    for epoch in range(1, cfg.epochs + 1):
        run_epoch(epoch, update=True)

    intact = freeze_checksum(state.params) == before
    if not intact:
        raise RuntimeError("run_adapt: frozen parameters changed during adaptation")
    return AdaptResult(prompt=prompt, rows=rows, report=report,
                       test_acc=rows[-1]["test_acc"], val_acc=rows[-1]["val_acc"],
                       frozen_core_intact=intact,
                       splits={"train": train_idx, "val": val_idx, "test": test_idx})


def gtm_for_record(state: ModelState, framed: FramedEmbedding, k: int) -> GtmReport:
    """Raw-geometry GTM of one record against the pre-trained prototypes."""
    tg = build_transfer_graph(framed.z.values, D.DiffTensor(framed.g.values),
                              state.prototypes, k)
    return gtm(tg)

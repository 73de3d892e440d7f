"""Prompt adaptation, transfer-graph gluing, MoE alignment, GTM."""

import numpy as np
import pytest

import oracles
import suite
from manifold_glue import adapt as ad
from manifold_glue import diff as D
from manifold_glue import pretrain as pre
from manifold_glue import prototypes as pt
from manifold_glue.frame import FramedEmbedding, METRIC_JITTER


def framed_const(z, w):
    w = np.asarray(w, float)
    g = w.T @ w + METRIC_JITTER * np.eye(w.shape[1])
    return FramedEmbedding(z=D.DiffTensor(np.asarray(z, float).reshape(1, -1)),
                           w=D.DiffTensor(w), g=D.DiffTensor(g))


def ortho_w(d=4, m=2, seed=0, scales=(1.0, 2.0)):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q[:, :m] * np.asarray(scales)


def protos_for(m=2, d=4, names=("a", "b", "c"), seed=3):
    rng = np.random.default_rng(seed)
    out = {}
    for name in names:
        s = rng.normal(size=(m, m))
        out[name] = pt.RiemannianPrototype(
            domain=name, z=rng.normal(size=(1, d)),
            log_g=0.2 * (s + s.T), update_count=5)
    return out


# ---------------------------------------------------------------------------
# prompt adaptation
# ---------------------------------------------------------------------------

def test_prompt_identity_is_noop():
    f = framed_const([1.0, 2.0, 3.0, 4.0], ortho_w())
    out = ad.prompt_adapt(f, D.DiffTensor(np.eye(4)))
    assert np.allclose(out.z.values, f.z.values, atol=1e-12)
    assert np.allclose(out.w.values, f.w.values, atol=1e-12)
    assert np.allclose(out.g.values, f.g.values, atol=1e-10)


def test_prompt_scaling_doubles_z_quadruples_metric():
    f = framed_const([1.0, 0.0, 0.0, 0.0], ortho_w())
    out = ad.prompt_adapt(f, D.DiffTensor(2.0 * np.eye(4)))
    assert np.allclose(out.z.values, 2.0 * f.z.values, atol=1e-12)
    diff = out.g.values - 4.0 * (f.g.values - METRIC_JITTER * np.eye(2))
    assert np.abs(diff - METRIC_JITTER * np.eye(2)).max() < 1e-9


def test_prompt_orthogonal_invariance():
    rng = np.random.default_rng(5)
    for _ in range(10):
        f = framed_const(rng.normal(size=4), ortho_w(seed=int(rng.integers(1e6))))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        out = ad.prompt_adapt(f, D.DiffTensor(q))
        assert abs(np.linalg.norm(out.z.values) - np.linalg.norm(f.z.values)) < 1e-10
        assert abs(np.linalg.det(out.g.values) - np.linalg.det(f.g.values)) < 1e-8


def test_prompt_shape_check():
    f = framed_const([1.0, 2.0, 3.0, 4.0], ortho_w())
    with pytest.raises(D.ShapeError):
        ad.prompt_adapt(f, D.DiffTensor(np.eye(3)))


# ---------------------------------------------------------------------------
# transfer graph
# ---------------------------------------------------------------------------

def test_transfer_graph_k1_has_no_paths():
    protos = protos_for()
    f = framed_const([0.0, 0.0, 0.0, 0.0], ortho_w())
    tg = ad.build_transfer_graph(f.z.values, f.g, protos, k=1)
    assert len(tg.proto_names) == 1
    assert tg.paths == []
    holo, curv = ad.glue_losses(tg)
    assert holo.item() >= 0 and curv.item() >= 0


def test_transfer_graph_k3_counts():
    protos = protos_for()
    f = framed_const([0.0, 0.0, 0.0, 0.0], ortho_w())
    tg = ad.build_transfer_graph(f.z.values, f.g, protos, k=3)
    star = [(0, i) for i in (1, 2, 3)]
    assert all(e in tg.edges for e in star)
    assert len(tg.paths) >= 3
    assert (1, 0, 2) in tg.paths and (0, 1, 2) in tg.paths


def test_transfer_graph_coincident_target_gives_identity_transports():
    protos = protos_for(names=("only",))
    p = protos["only"]
    g = p.metric()
    f = FramedEmbedding(z=D.DiffTensor(p.z.copy()), w=D.DiffTensor(np.eye(2)),
                        g=D.DiffTensor(g))
    tg = ad.build_transfer_graph(f.z.values, f.g, protos, k=1)
    holo, curv = ad.glue_losses(tg)
    assert holo.item() < 1e-12 and curv.item() < 1e-16


def test_transfer_graph_requires_prototypes():
    f = framed_const([0.0, 0.0, 0.0, 0.0], ortho_w())
    with pytest.raises(ValueError):
        ad.build_transfer_graph(f.z.values, f.g, {}, k=1)


# ---------------------------------------------------------------------------
# MoE alignment
# ---------------------------------------------------------------------------

def gate_leaves(d, m, hidden, k, zero_out=True, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "gate.w1": D.DiffTensor(rng.normal(0.0, 0.1, size=(d + m, hidden))),
        "gate.b1": D.DiffTensor(np.zeros((1, hidden))),
        "gate.w2": D.DiffTensor(np.zeros((hidden, k)) if zero_out
                                else rng.normal(size=(hidden, k))),
        "gate.b2": D.DiffTensor(np.zeros((1, k))),
    }


def test_moe_single_expert_returns_its_log_metric():
    protos = protos_for(names=("solo",))
    f = framed_const([1.0, 0.0, 0.0, 0.0], ortho_w())
    log_align, weights, _ = ad.moe_align(f.z, f.g, protos,
                                         gate_leaves(4, 2, 8, 1, zero_out=False))
    assert np.allclose(weights.values, [[1.0]])
    assert np.allclose(log_align.values, protos["solo"].log_g, atol=1e-12)


def test_moe_zero_gate_gives_uniform_mixture():
    protos = protos_for(names=("a", "b", "c"))
    f = framed_const([1.0, 0.0, 0.0, 0.0], ortho_w())
    log_align, weights, _ = ad.moe_align(f.z, f.g, protos, gate_leaves(4, 2, 8, 3))
    assert np.allclose(weights.values, np.full((1, 3), 1 / 3), atol=1e-12)
    want = np.mean([protos[n].log_g for n in ("a", "b", "c")], axis=0)
    assert np.allclose(log_align.values, want, atol=1e-12)


def test_moe_output_symmetric():
    protos = protos_for(names=("a", "b"))
    f = framed_const([0.5, -0.5, 1.0, 0.0], ortho_w(seed=2))
    log_align, weights, _ = ad.moe_align(f.z, f.g, protos,
                                         gate_leaves(4, 2, 8, 2, zero_out=False, seed=4))
    assert np.abs(log_align.values - log_align.values.T).max() < 1e-12
    assert abs(weights.values.sum() - 1.0) < 1e-12
    assert (weights.values >= 0).all()


# ---------------------------------------------------------------------------
# task representation
# ---------------------------------------------------------------------------

def test_task_representation_dimension():
    for d, m in [(4, 2), (8, 3), (12, 5)]:
        z = D.DiffTensor(np.zeros((1, d)))
        log_a = D.DiffTensor(np.zeros((m, m)))
        log_b = D.DiffTensor(np.zeros((m, m)))
        rep = ad.task_representation(z, log_a, log_b)
        assert rep.shape == (1, d + 2 * m)


def test_task_representation_identity_metrics_zero_tail():
    z = D.DiffTensor(np.arange(4.0).reshape(1, -1))
    rep = ad.task_representation(z, D.DiffTensor(np.zeros((2, 2))),
                                 D.DiffTensor(np.zeros((2, 2))))
    assert np.allclose(rep.values[0, 4:], 0.0)


def test_task_representation_slicing_layout():
    d, m = 4, 2
    z = D.DiffTensor(np.full((1, d), 7.0))
    log_a = D.DiffTensor(np.diag([1.0, 2.0]))
    log_b = D.DiffTensor(np.diag([3.0, 4.0]))
    rep = ad.task_representation(z, log_a, log_b).values[0]
    assert np.allclose(rep[:d], 7.0)
    assert np.allclose(rep[d:d + m], [1.0, 2.0])
    assert np.allclose(rep[d + m:], [3.0, 4.0])


def test_task_representation_adapted_z_switch():
    z_pre = D.DiffTensor(np.ones((1, 4)))
    z_ad = D.DiffTensor(2 * np.ones((1, 4)))
    zeros = D.DiffTensor(np.zeros((2, 2)))
    rep = ad.task_representation(z_pre, zeros, zeros, z_adapt=z_ad, use_adapted_z=True)
    assert np.allclose(rep.values[0, :4], 2.0)


# ---------------------------------------------------------------------------
# GTM
# ---------------------------------------------------------------------------

def test_gtm_zero_at_perfect_gluing():
    protos = protos_for(names=("only",))
    p = protos["only"]
    f = FramedEmbedding(z=D.DiffTensor(p.z.copy()), w=D.DiffTensor(np.eye(2)),
                        g=D.DiffTensor(p.metric()))
    tg = ad.build_transfer_graph(f.z.values, f.g, protos, k=1)
    report = ad.gtm(tg)
    assert report.delta_h < 1e-12 and report.delta_c < 1e-16
    assert report.gtm == report.delta_h + report.delta_c


def test_gtm_increases_with_metric_scaling():
    protos = protos_for(names=("a", "b"))
    rng = np.random.default_rng(6)
    w = ortho_w(seed=7)
    values = []
    for c in (1.0, 2.0, 4.0):
        f = framed_const(rng.normal(size=4), np.sqrt(c) * w)
        tg = ad.build_transfer_graph(f.z.values, f.g, protos, k=2)
        values.append(ad.gtm(tg).delta_c)
    assert values[0] < values[1] < values[2]


def test_gtm_nonnegative_random():
    protos = protos_for()
    rng = np.random.default_rng(8)
    for _ in range(10):
        f = framed_const(rng.normal(size=4), ortho_w(seed=int(rng.integers(1e6))))
        report = ad.gtm(ad.build_transfer_graph(f.z.values, f.g, protos, k=3))
        assert report.delta_h >= 0 and report.delta_c >= 0


# ---------------------------------------------------------------------------
# few-shot split
# ---------------------------------------------------------------------------

def test_split_counts_and_disjointness():
    ds = suite.make_suite(records=30)[0]
    train, val, test = ad.split_few_shot(ds, shots=5, val_fraction=0.1,
                                         rng=np.random.default_rng(0))
    assert len(train) == 5 * ds.num_classes
    assert set(train) | set(val) | set(test) == set(range(30))
    assert not (set(train) & set(val)) and not (set(train) & set(test))
    labels = [ds.records[i].label for i in train]
    for c in range(ds.num_classes):
        assert labels.count(c) == 5


def test_split_rejects_starved_class():
    ds = suite.make_suite(records=6)[0]
    with pytest.raises(ValueError, match="class"):
        ad.split_few_shot(ds, shots=5, val_fraction=0.1,
                          rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# run_adapt end to end
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pretrained():
    datasets = suite.make_suite(records=24)
    cfg = suite.tiny_config(epochs=2, warmup_epochs=0, batch_size=8)
    state = pre.run_pretrain(datasets[:2], cfg)
    return state, datasets


def test_run_adapt_shapes_and_freeze(pretrained):
    state, datasets = pretrained
    cfg = ad.AdaptConfig(epochs=3, shots=2, proto_k=2, seed=0)
    result = ad.run_adapt(state, datasets[2], cfg)
    assert result.frozen_core_intact
    assert len(result.rows) == 4  # epoch 0 plus 3 training epochs
    for row in result.rows:
        assert set(row) == set(ad.ADAPT_METRICS_COLUMNS)
        assert row["gtm"] == row["loss_holo"] + row["loss_curv"]
    assert 0.0 <= result.test_acc <= 1.0


def test_run_adapt_lambda_zero_still_reports_glue(pretrained):
    state, datasets = pretrained
    cfg = ad.AdaptConfig(epochs=2, shots=2, proto_k=2, lam=0.0, seed=1)
    result = ad.run_adapt(state, datasets[2], cfg)
    assert all(row["gtm"] >= 0 for row in result.rows)


def test_run_adapt_deterministic(pretrained):
    state, datasets = pretrained
    cfg = ad.AdaptConfig(epochs=2, shots=2, proto_k=2, seed=3)
    r1 = ad.run_adapt(state, datasets[2], cfg)
    r2 = ad.run_adapt(state, datasets[2], cfg)
    assert [row["loss_task"] for row in r1.rows] == [row["loss_task"] for row in r2.rows]
    assert [row["test_acc"] for row in r1.rows] == [row["test_acc"] for row in r2.rows]
    for name in r1.prompt:
        assert np.array_equal(r1.prompt[name], r2.prompt[name])


def test_run_adapt_epoch0_gtm_is_raw(pretrained):
    state, datasets = pretrained
    cfg = ad.AdaptConfig(epochs=1, shots=2, proto_k=2, seed=4)
    result = ad.run_adapt(state, datasets[2], cfg)
    frames = ad.encode_frozen(state, datasets[2])
    raw = []
    for i in result.splits["train"]:
        raw.append(ad.gtm_for_record(state, frames[i], k=2).gtm)
    assert abs(result.rows[0]["gtm"] - float(np.mean(raw))) < 1e-9


def test_run_adapt_learns_head(pretrained):
    state, datasets = pretrained
    cfg = ad.AdaptConfig(epochs=12, shots=4, proto_k=2, lam=0.1,
                         learning_rate=5e-2, seed=5)
    result = ad.run_adapt(state, datasets[2], cfg)
    assert result.rows[-1]["loss_task"] < result.rows[0]["loss_task"]


def test_adaptation_composite_gradcheck(pretrained):
    state, datasets = pretrained
    target = datasets[2]
    frames = ad.encode_frozen(state, target)
    protos = state.prototypes
    cfg = ad.AdaptConfig(epochs=1, shots=1, proto_k=2, lam=0.7, seed=6)
    f0 = frames[0]
    label = target.records[0].label
    d = state.config.embed_dim
    m = state.config.manifold_dim
    init = ad.init_prompt_values(d, m, target.num_classes, cfg.gate_hidden,
                                 target.task, len(protos), np.random.default_rng(7))
    names = sorted(init)
    rng = np.random.default_rng(8)
    leaves0 = [init[n] + 0.05 * rng.normal(size=init[n].shape) for n in names]

    def f(ls):
        leaves = dict(zip(names, ls))
        adapted, logits, tg = ad._sample_forward(
            f0, leaves, protos, cfg, target.task, target.num_classes, state.config)
        ce = ad.cross_entropy(logits, label)
        holo, curv = ad.glue_losses(tg)
        return D.add(ce, D.mul(D.add(holo, curv), D.DiffTensor([[cfg.lam]])))

    assert D.check_gradient(f, leaves0, h=1e-6) < 1e-4

"""EMA prototype updates and the sample-prototype contrastive loss."""

import numpy as np
import pytest

from manifold_glue import diff as D
from manifold_glue import prototypes as pt
from manifold_glue.frame import FramedEmbedding


def proto(domain="a", d=4, m=2, z=None, log_g=None, count=1):
    return pt.RiemannianPrototype(
        domain=domain,
        z=np.zeros((1, d)) if z is None else np.asarray(z, float).reshape(1, -1),
        log_g=np.zeros((m, m)) if log_g is None else np.asarray(log_g, float),
        update_count=count,
    )


def framed(z, g=None, m=2):
    g = np.eye(m) if g is None else np.asarray(g, float)
    return FramedEmbedding(z=D.DiffTensor(np.asarray(z, float).reshape(1, -1)),
                           w=D.DiffTensor(np.eye(g.shape[0])),
                           g=D.DiffTensor(g))


def test_ema_direct_arithmetic():
    p = pt.ema_update(proto(d=3), batch_z_mean=np.ones((1, 3)),
                      batch_log_g_mean=np.zeros((2, 2)), beta=0.9)
    assert np.allclose(p.z, 0.1 * np.ones((1, 3)))
    assert p.update_count == 2


def test_ema_geometric_contraction():
    m_target = np.full((1, 4), 2.0)
    p = proto(d=4, z=np.zeros(4), count=1)
    beta = 0.9
    start_gap = np.linalg.norm(p.z - m_target)
    for t in range(1, 51):
        p = pt.ema_update(p, m_target, np.zeros((2, 2)), beta)
        gap = np.linalg.norm(p.z - m_target)
        assert abs(gap - beta ** t * start_gap) < 1e-10


def test_ema_first_update_bootstraps():
    p = pt.ema_update(proto(count=0, z=[9.0, 9.0, 9.0, 9.0]),
                      batch_z_mean=np.ones((1, 4)),
                      batch_log_g_mean=np.eye(2), beta=0.99)
    assert np.allclose(p.z, np.ones((1, 4)))
    assert np.allclose(p.log_g, np.eye(2))


def test_ema_diagonal_matches_elementwise():
    rng = np.random.default_rng(0)
    p = proto(m=3, log_g=np.diag([0.3, -0.1, 0.5]))
    expect = p.log_g.copy()
    for _ in range(10):
        batch = np.diag(rng.uniform(-1, 1, size=3))
        p = pt.ema_update(p, np.zeros((1, 4)), batch, beta=0.8)
        expect = 0.8 * expect + 0.2 * batch
        assert np.allclose(p.log_g, expect, atol=1e-14)


def test_ema_rejects_bad_beta():
    with pytest.raises(ValueError):
        pt.ema_update(proto(), np.zeros((1, 4)), np.zeros((2, 2)), beta=1.0)


def test_log_g_stays_symmetric_under_updates():
    rng = np.random.default_rng(1)
    p = proto(m=3, log_g=np.zeros((3, 3)))
    for _ in range(30):
        s = rng.normal(size=(3, 3))
        p = pt.ema_update(p, np.zeros((1, 4)), 0.5 * (s + s.T), beta=0.95)
    p.validate()
    assert np.linalg.eigvalsh(p.metric()).min() > 0


def test_batch_statistics_diagonal_metrics():
    fs = [framed([1.0, 0.0], g=np.diag([np.e, 1.0])),
          framed([0.0, 1.0], g=np.diag([1.0, np.e]))]
    z_mean, log_mean = pt.batch_statistics(fs)
    assert np.allclose(z_mean, [[0.5, 0.5]])
    assert np.allclose(log_mean, np.diag([0.5, 0.5]), atol=1e-12)


def test_contrastive_single_prototype_is_zero():
    protos = {"a": proto("a", z=[1.0, 0.0, 0.0, 0.0])}
    loss = pt.proto_contrastive_loss([framed([2.0, 0.0, 0.0, 0.0])], ["a"], protos)
    assert abs(loss.item()) < 1e-12


def test_contrastive_hand_value_two_domains():
    # sample sits on its own prototype; the other prototype is orthogonal
    protos = {"a": proto("a", z=[1.0, 0.0, 0.0, 0.0]),
              "b": proto("b", z=[0.0, 1.0, 0.0, 0.0])}
    loss = pt.proto_contrastive_loss([framed([3.0, 0.0, 0.0, 0.0])], ["a"], protos,
                                     temperature=1.0)
    want = -np.log(np.e / (np.e + 1.0))
    assert abs(loss.item() - want) < 1e-12


def test_contrastive_decreases_toward_own_prototype():
    protos = {"a": proto("a", z=[1.0, 0.0, 0.0, 0.0]),
              "b": proto("b", z=[0.0, 1.0, 0.0, 0.0])}
    z0 = np.array([0.4, 0.8, 0.1, 0.0])
    direction = protos["a"].z.ravel() - z0
    direction /= np.linalg.norm(direction)

    def loss_at(z):
        return pt.proto_contrastive_loss([framed(z)], ["a"], protos).item()

    h = 1e-6
    deriv = (loss_at(z0 + h * direction) - loss_at(z0 - h * direction)) / (2 * h)
    assert deriv < 0


def test_contrastive_gradient_reaches_z_not_protos():
    protos = {"a": proto("a", z=[1.0, 0.0, 0.0, 0.0]),
              "b": proto("b", z=[0.0, 1.0, 0.0, 0.0])}
    tape = D.Tape()
    z = tape.leaf(np.array([[0.2, 0.5, 0.1, 0.3]]))
    f = FramedEmbedding(z=z, w=D.DiffTensor(np.eye(2)), g=D.DiffTensor(np.eye(2)))
    loss = pt.proto_contrastive_loss([f], ["a"], protos)
    grads = D.backward(loss)
    assert np.abs(grads[z.node_id].values).max() > 0


def test_contrastive_gradcheck():
    protos = {"a": proto("a", z=[1.0, 0.2, 0.0, 0.0]),
              "b": proto("b", z=[0.0, 1.0, 0.3, 0.0]),
              "c": proto("c", z=[0.1, 0.0, 1.0, 0.0])}

    def f(ls):
        fe = FramedEmbedding(z=ls[0], w=D.DiffTensor(np.eye(2)), g=D.DiffTensor(np.eye(2)))
        return pt.proto_contrastive_loss([fe], ["b"], protos, temperature=0.7)

    err = D.check_gradient(f, [np.array([[0.3, -0.4, 0.8, 0.1]])])
    assert err < 1e-6


def test_contrastive_missing_prototype_names_domain():
    with pytest.raises(pt.PrototypeError, match="ghost"):
        pt.proto_contrastive_loss([framed([1.0, 0.0, 0.0, 0.0])], ["ghost"],
                                  {"a": proto("a")})


def test_contrastive_nonnegative_random():
    rng = np.random.default_rng(2)
    protos = {n: proto(n, z=rng.normal(size=4)) for n in ("a", "b", "c")}
    for _ in range(20):
        loss = pt.proto_contrastive_loss([framed(rng.normal(size=4))], ["b"], protos)
        assert loss.item() >= 0


def test_nearest_zero_distance_first():
    protos = {"a": proto("a", z=[1.0, 0.0, 0.0, 0.0]),
              "b": proto("b", z=[5.0, 5.0, 0.0, 0.0])}
    assert pt.nearest_prototypes(np.array([1.0, 0.0, 0.0, 0.0]), protos, 2) == ["a", "b"]


def test_nearest_full_ordering_matches_argsort():
    rng = np.random.default_rng(3)
    protos = {f"d{i}": proto(f"d{i}", z=rng.normal(size=4)) for i in range(6)}
    z = rng.normal(size=4)
    got = pt.nearest_prototypes(z, protos, 6)
    dists = {n: np.linalg.norm(p.z.ravel() - z) for n, p in protos.items()}
    want = [n for n in sorted(protos, key=lambda n: (dists[n], n))]
    assert got == want


def test_nearest_tie_breaks_lexicographically():
    protos = {"zz": proto("zz", z=[1.0, 0.0, 0.0, 0.0]),
              "aa": proto("aa", z=[-1.0, 0.0, 0.0, 0.0])}
    assert pt.nearest_prototypes(np.zeros(4), protos, 2) == ["aa", "zz"]


def test_nearest_rejects_oversized_k():
    with pytest.raises(ValueError):
        pt.nearest_prototypes(np.zeros(4), {"a": proto("a")}, 2)

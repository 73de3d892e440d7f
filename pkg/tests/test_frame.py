"""Local geometry: perturbation wiring, frames, metrics, the tangent bound."""

import numpy as np
import pytest

import oracles
from manifold_glue import diff as D
from manifold_glue import encoder as enc
from manifold_glue import frame as fr
from manifold_glue.data import GraphRecord


def make_record(n=10, seed=0, f=4):
    rng = np.random.default_rng(seed)
    edges = oracles.random_connected_graph(n, rng, extra_edges=n)
    return GraphRecord(n, edges, rng.normal(size=(n, f)), label=0, domain="t")


def make_bank(m=2, k=3, f=4, seed=1):
    rng = np.random.default_rng(seed)
    return fr.PerturbationBank(p=D.DiffTensor(rng.normal(size=(m, f))), k=k)


def test_perturb_cardinality():
    rec = make_record(n=10)
    pg = fr.perturb_graph(rec, D.DiffTensor(rec.features), make_bank(m=2, k=3))
    assert pg.num_nodes == 12
    assert pg.num_edges == len(rec.edges) + 6


def test_perturb_clamps_k_to_n():
    rec = make_record(n=2)
    pg = fr.perturb_graph(rec, D.DiffTensor(rec.features), make_bank(m=2, k=5))
    assert pg.mask.sum() == 4  # 2 originals per perturbation node


def test_weights_sum_to_one_per_connected_node():
    rec = make_record(n=8)
    pg = fr.perturb_graph(rec, D.DiffTensor(rec.features), make_bank(m=3, k=4))
    h = pg.adjacency.values[: pg.num_original, pg.num_original:]
    sums = h.sum(axis=1)
    connected = pg.mask.sum(axis=1) > 0
    assert np.allclose(sums[connected], 1.0, atol=1e-12)
    assert np.all(sums[~connected] == 0.0)


def test_single_incident_edge_weight_is_one():
    # one perturbation node, k=1: exactly one original node carries weight 1
    rec = make_record(n=5)
    pg = fr.perturb_graph(rec, D.DiffTensor(rec.features), make_bank(m=1, k=1))
    h = pg.adjacency.values[: pg.num_original, pg.num_original:]
    assert np.count_nonzero(h) == 1
    assert np.isclose(h.max(), 1.0)


def test_topk_matches_argsort_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, m, k = 9, 3, 4
        scores = rng.normal(size=(n, m))
        _, mask = fr.attachment_weights(D.DiffTensor(scores), k)
        for col in range(m):
            want = set(np.argsort(-scores[:, col], kind="stable")[:k])
            assert set(np.flatnonzero(mask[:, col])) == want


def test_tangent_zero_deformation():
    # perturbation embedding equal to the pooled mean -> zero column
    emb = np.array([[1.0, 0.0], [3.0, 2.0], [2.0, 1.0]])  # mean of first two rows
    v, z = fr.tangent_vectors(D.DiffTensor(emb), 2)
    assert np.allclose(z.values, [[2.0, 1.0]])
    assert np.allclose(v.values, 0.0, atol=1e-15)


def test_identical_perturbation_rows_give_identical_columns():
    rec = make_record(n=6)
    rng = np.random.default_rng(3)
    row = rng.normal(size=(1, 4))
    bank = fr.PerturbationBank(p=D.DiffTensor(np.vstack([row, row])), k=3)
    pg = fr.perturb_graph(rec, D.DiffTensor(rec.features), bank)
    params = enc.EncoderParams(
        w1=D.DiffTensor(np.eye(4)), b1=D.DiffTensor(np.zeros((1, 4))),
        w2=D.DiffTensor(np.eye(4)), b2=D.DiffTensor(np.zeros((1, 4))))
    emb = enc.gcn_forward(params, pg.features, pg.adjacency)
    v, _ = fr.tangent_vectors(emb, pg.num_original)
    assert np.allclose(v.values[:, 0], v.values[:, 1], atol=1e-14)


# ---------------------------------------------------------------------------
# orthogonal frame
# ---------------------------------------------------------------------------

def test_gram_schmidt_hand_example():
    v = np.array([[1.0, 1.0], [0.0, 1.0]])  # columns (1,0) and (1,1)
    w, degenerate = fr.orthogonal_frame(D.DiffTensor(v))
    assert degenerate == 0
    assert np.allclose(w.values[:, 0], [1.0, 0.0], atol=1e-15)
    assert np.allclose(w.values[:, 1], [0.0, np.sqrt(2.0)], atol=1e-15)


def test_orthogonal_input_is_fixed_point():
    v = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 3.0], [0.0, 1.5, 0.0]])
    w, _ = fr.orthogonal_frame(D.DiffTensor(v))
    assert np.allclose(w.values, v, rtol=1e-15, atol=1e-15)


def test_frame_idempotence():
    rng = np.random.default_rng(11)
    for _ in range(10):
        v = rng.normal(size=(6, 3))
        w1, _ = fr.orthogonal_frame(D.DiffTensor(v))
        w2, _ = fr.orthogonal_frame(D.DiffTensor(w1.values))
        assert np.abs(w2.values - w1.values).max() < 1e-10


def test_columns_orthogonal_on_random_input():
    rng = np.random.default_rng(12)
    for _ in range(20):
        v = rng.normal(size=(8, 4))
        w, _ = fr.orthogonal_frame(D.DiffTensor(v))
        gram = w.values.T @ w.values
        off = gram - np.diag(np.diag(gram))
        assert np.abs(off).max() < 1e-10 * max(1.0, np.abs(np.diag(gram)).max())


def test_norm_preservation():
    rng = np.random.default_rng(13)
    v = rng.normal(size=(7, 4))
    w, _ = fr.orthogonal_frame(D.DiffTensor(v))
    assert np.allclose(np.linalg.norm(w.values, axis=0),
                       np.linalg.norm(v, axis=0), rtol=1e-12)


def test_qr_diagonal_length_mode():
    v = np.array([[1.0, 1.0], [0.0, 1.0]])
    w, _ = fr.orthogonal_frame(D.DiffTensor(v), length_mode="qr-diagonal")
    # residual norms are 1 and 1 (second column minus its projection)
    assert np.allclose(np.linalg.norm(w.values, axis=0), [1.0, 1.0], atol=1e-14)
    with pytest.raises(ValueError):
        fr.orthogonal_frame(D.DiffTensor(v), length_mode="bogus")


def test_degenerate_column_fallback():
    v = np.array([[1.0, 2.0], [1.0, 2.0]])  # second column parallel to first
    w, degenerate = fr.orthogonal_frame(D.DiffTensor(v))
    assert degenerate == 1
    assert abs(w.values[:, 0] @ w.values[:, 1]) < 1e-12
    assert np.isclose(np.linalg.norm(w.values[:, 1]),
                      np.linalg.norm(v[:, 1]) + fr.DEGENERATE_TOL)


def test_degenerate_fallback_is_reproducible():
    v = np.array([[1.0, 2.0], [1.0, 2.0]])
    w1, _ = fr.orthogonal_frame(D.DiffTensor(v))
    w2, _ = fr.orthogonal_frame(D.DiffTensor(v))
    assert np.array_equal(w1.values, w2.values)


def test_frame_gradcheck():
    rng = np.random.default_rng(14)
    v0 = rng.normal(size=(5, 3))

    def f(ls):
        w, _ = fr.orthogonal_frame(ls[0])
        return D.frobenius_sq(fr.local_metric(w))

    assert D.check_gradient(f, [v0]) < 1e-6


# ---------------------------------------------------------------------------
# local metric
# ---------------------------------------------------------------------------

def test_metric_from_column_norms():
    w = np.zeros((5, 2))
    w[0, 0] = 1.0
    w[1, 1] = np.sqrt(2.0)
    g = fr.local_metric(D.DiffTensor(w)).values
    assert np.allclose(g, np.diag([1.0, 2.0]), atol=1e-7)


def test_metric_degenerate_column_keeps_jitter():
    w = np.zeros((4, 2))
    w[2, 0] = 3.0
    g = fr.local_metric(D.DiffTensor(w)).values
    assert np.isclose(g[0, 0], 9.0 + fr.METRIC_JITTER)
    assert np.isclose(g[1, 1], fr.METRIC_JITTER)


def test_metric_positive_determinant_on_random_frames():
    rng = np.random.default_rng(15)
    for _ in range(1000):
        v = rng.normal(size=(6, 3))
        w, _ = fr.orthogonal_frame(D.DiffTensor(v))
        assert np.linalg.det(fr.local_metric(w).values) > 0


def test_build_frame_shapes_and_invariants():
    rec = make_record(n=9, f=4)
    vals = enc.init_encoder_values(4, 6, 5, np.random.default_rng(0))
    params = enc.EncoderParams(*[D.DiffTensor(vals[k]) for k in
                                 ("encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2")])
    framed = fr.build_frame(rec, params, make_bank(m=3, k=3), projection=None)
    assert framed.z.shape == (1, 5)
    assert framed.w.shape == (5, 3)
    assert framed.g.shape == (3, 3)
    g = framed.g.values
    assert np.abs(g - g.T).max() < 1e-10 * np.abs(g).max()
    assert np.abs(g - framed.w.values.T @ framed.w.values).max() <= fr.METRIC_JITTER + 1e-12
    assert np.linalg.eigvalsh(g).min() > 0


def test_bank_gradient_flows_through_attachment():
    rec = make_record(n=8, f=4)
    vals = enc.init_encoder_values(4, 5, 4, np.random.default_rng(1))

    def f(ls):
        params = enc.EncoderParams(*[D.DiffTensor(vals[k]) for k in
                                     ("encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2")])
        bank = fr.PerturbationBank(p=ls[0], k=3)
        framed = fr.build_frame(rec, params, bank, projection=None)
        return D.add(D.frobenius_sq(framed.z), D.trace(framed.g))

    p0 = np.random.default_rng(2).normal(size=(2, 4))
    assert D.check_gradient(f, [p0]) < 1e-4


# ---------------------------------------------------------------------------
# tangent length bound under the heat-diffusion model
# ---------------------------------------------------------------------------

def test_heat_diffusion_tangent_bound():
    rng = np.random.default_rng(100)
    for trial in range(100):
        n = int(rng.integers(12, 51))
        num_perturb = int(rng.integers(1, 4))
        k = int(rng.integers(1, int(0.3 * n / num_perturb) + 1))
        eps = k * num_perturb / n
        assert eps <= 0.3 + 1e-12
        worst, p_norm = oracles.heat_perturbation_displacement(
            n, num_perturb, k, feat_dim=3, ts=(0.1, 1.0, 10.0), rng=rng)
        assert worst <= (1.0 + eps) * p_norm

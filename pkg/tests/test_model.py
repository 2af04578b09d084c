import numpy as np
import pytest

from mmgrec.errors import ShapeError
from mmgrec.graph import build_graph
from mmgrec.linalg import affine, relu
from mmgrec.model import (
    ScoringMode,
    compute_user_embeddings,
    forward,
    gated_fusion,
    init_params,
    policy_transform,
    project_modalities,
    score_pairs,
)

from conftest import dense_normalized_adjacency


@pytest.fixture
def params():
    p = init_params(3, 4, 6, 5, 7, 8, seed=1)
    rng = np.random.default_rng(0)
    for v in p.tensors().values():
        v[:] = rng.normal(size=v.shape)
    return p


class TestInit:
    def test_deterministic(self):
        a, b = init_params(4, 5, 8, 6, 3, 16, seed=3), init_params(4, 5, 8, 6, 3, 16, seed=3)
        for name in a.tensors():
            assert a.tensors()[name].tobytes() == b.tensors()[name].tobytes()

    def test_full_size_shapes(self):
        p = init_params(2, 2, 64, 4096, 384, 128, seed=0)
        assert p.w_img.shape == (64, 4096)
        assert p.w_txt.shape == (64, 384)
        assert p.w_gate.shape == (64, 128)
        assert p.w_hidden.shape == (128, 64) and p.w_out.shape == (64, 128)

    def test_biases_zero_and_bounds(self):
        p = init_params(200, 300, 64, 100, 50, 128, seed=0)
        for name in ("b_img", "b_txt", "b_gate", "b_hidden", "b_out"):
            assert not getattr(p, name).any()
        assert np.abs(p.w_img).max() <= np.sqrt(6 / (64 + 100))
        assert p.user_emb.std() == pytest.approx(0.1, rel=0.05)

    def test_rejects_zero_dim(self):
        with pytest.raises(ValueError):
            init_params(1, 1, 0, 1, 1, 1, 0)


class TestProjection:
    def test_zero_weights(self, params):
        params.w_img[:] = 0
        params.b_img[:] = 0
        v_img, _ = project_modalities(params, np.ones(5), np.ones(7))
        assert not v_img.any()

    def test_negative_bias_clamped(self, params):
        params.w_img[:] = 0
        params.b_img[:] = -10
        v_img, _ = project_modalities(params, np.ones(5), np.ones(7))
        assert not v_img.any()

    def test_matches_composition(self, params):
        rng = np.random.default_rng(1)
        xi, xt = rng.normal(size=5), rng.normal(size=7)
        v_img, v_txt = project_modalities(params, xi, xt)
        np.testing.assert_allclose(v_img, relu(affine(params.w_img, xi, params.b_img)), atol=1e-12)
        np.testing.assert_allclose(v_txt, relu(affine(params.w_txt, xt, params.b_txt)), atol=1e-12)
        assert (v_img >= 0).all() and (v_txt >= 0).all()

    def test_shape_error(self, params):
        with pytest.raises(ShapeError):
            project_modalities(params, np.ones(4), np.ones(7))


class TestFusion:
    def test_neutral_gate(self, params):
        params.w_gate[:] = 0
        params.b_gate[:] = 0
        vi, vt = np.arange(6.0), np.ones(6)
        g, z = gated_fusion(params, vi, vt)
        np.testing.assert_array_equal(g, 0.5)
        np.testing.assert_allclose(z, (vi + vt) / 2)

    def test_saturated_gate_picks_image(self, params):
        params.w_gate[:] = 0
        params.b_gate[:] = 1000
        vi, vt = np.arange(6.0), np.ones(6)
        g, z = gated_fusion(params, vi, vt)
        np.testing.assert_allclose(g, 1.0)
        np.testing.assert_allclose(z, vi, atol=1e-12)

    def test_equal_inputs(self, params):
        v = np.random.default_rng(2).random(6)
        np.testing.assert_allclose(gated_fusion(params, v, v)[1], v, atol=1e-15)

    def test_concat_order_image_first(self, params):
        params.w_gate[:] = 0
        params.b_gate[:] = 0
        params.w_gate[:, :6] = 50 * np.eye(6)  # image columns only
        g, _ = gated_fusion(params, np.ones(6), np.zeros(6))
        assert (g > 0.99).all()

    def test_swap_antisymmetry(self):
        rng = np.random.default_rng(3)
        a, b, g = rng.random((3, 100, 6))
        np.testing.assert_allclose(g * a + (1 - g) * b, (1 - g) * b + g * a)
        np.testing.assert_allclose(g * a + (1 - g) * b, (1 - g) * b + (1 - (1 - g)) * a)

    def test_fixed_gate(self, params):
        g, z = gated_fusion(params, np.full(6, 2.0), np.zeros(6), fixed_gate=0.5)
        np.testing.assert_array_equal(g, 0.5)
        np.testing.assert_array_equal(z, 1.0)

    def test_shape_error(self, params):
        with pytest.raises(ShapeError):
            gated_fusion(params, np.ones(6), np.ones(5))


class TestUserEmbeddings:
    def test_empty_graph(self, params):
        e, _ = compute_user_embeddings(params, build_graph([], [], 3, 4))
        assert not e.any()

    def test_degree_one_round_trip(self):
        p = init_params(1, 1, 4, 2, 2, 2, seed=0)
        e, _ = compute_user_embeddings(p, build_graph([0], [0], 1, 1))
        np.testing.assert_array_equal(e[0], p.user_emb[0])

    def test_matches_dense(self, params):
        us, its = [0, 0, 1, 2, 2], [0, 1, 1, 2, 3]
        g = build_graph(us, its, 3, 4)
        P = dense_normalized_adjacency(3, 4, us, its)
        e, layers = compute_user_embeddings(params, g)
        X = np.vstack([params.user_emb, params.item_emb])
        np.testing.assert_allclose(e, (P @ P @ X)[:3], atol=1e-12)
        assert len(layers) == 3

    def test_shape_mismatch(self, params):
        with pytest.raises(ShapeError):
            compute_user_embeddings(params, build_graph([0], [0], 2, 4))


class TestPolicy:
    def test_constant_net(self, params):
        params.w_hidden[:] = 0
        params.b_hidden[:] = 0
        params.w_out[:] = 0
        params.b_out[:] = np.arange(6.0)
        out = policy_transform(params, np.random.default_rng(0).normal(size=(3, 6)))
        np.testing.assert_array_equal(out, np.tile(np.arange(6.0), (3, 1)))

    def test_identity_construction(self, params):
        params.w_hidden[:] = 0
        params.w_hidden[:6] = np.eye(6)
        params.b_hidden[:] = 0
        params.w_out[:] = 0
        params.w_out[:, :6] = np.eye(6)
        params.b_out[:] = 0
        e = np.random.default_rng(1).random(6)
        np.testing.assert_allclose(policy_transform(params, e), e)

    def test_composition(self, params):
        e = np.random.default_rng(2).normal(size=6)
        h = np.maximum(params.w_hidden @ e + params.b_hidden, 0)
        np.testing.assert_allclose(policy_transform(params, e), params.w_out @ h + params.b_out, atol=1e-12)


class TestScorePairs:
    def test_basis(self):
        e = np.eye(3)
        assert score_pairs(ScoringMode.DOT, e, e, [(1, 1)])[0] == 1.0
        assert score_pairs("dot", e, e, [(0, 2)])[0] == 0.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(4)
        E, Z = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
        pairs = [(0, 1), (3, 5), (2, 2), (1, 0), (0, 4)]
        expected = [sum(E[u, k] * Z[i, k] for k in range(5)) for u, i in pairs]
        np.testing.assert_allclose(score_pairs("dot", E, Z, pairs), expected, atol=1e-12)

    def test_bilinear(self):
        rng = np.random.default_rng(5)
        E1, E2, Z = rng.normal(size=(3, 2, 4))
        pairs = [(0, 0), (1, 1), (0, 1)]
        np.testing.assert_allclose(score_pairs("dot", 2 * E1 + E2, Z, pairs),
                                   2 * score_pairs("dot", E1, Z, pairs) + score_pairs("dot", E2, Z, pairs))

    def test_policy_mode(self, params):
        rng = np.random.default_rng(6)
        E, Z = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
        s = score_pairs("policy", E, Z, [(2, 3)], params)
        assert s[0] == pytest.approx(policy_transform(params, E[2]) @ Z[3])

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            score_pairs("dot", np.eye(2), np.eye(2), [(2, 0)])


class TestForward:
    def test_deterministic_and_consistent(self, params):
        g = build_graph([0, 1, 2, 2], [0, 1, 2, 3], 3, 4)
        rng = np.random.default_rng(7)
        xi, xt = rng.normal(size=(4, 5)), rng.normal(size=(4, 7))
        users, items = np.array([0, 1, 2, 0]), np.array([3, 1, 1, 0])
        s1, cache = forward(params, g, xi, xt, users, items)
        s2, _ = forward(params, g, xi, xt, users, items)
        assert s1.tobytes() == s2.tobytes()
        e, _ = compute_user_embeddings(params, g)
        v_img, v_txt = project_modalities(params, xi, xt)
        z = gated_fusion(params, v_img, v_txt)[1]
        np.testing.assert_allclose(s1, score_pairs("dot", e, z, np.c_[users, items]), atol=1e-12)
        assert ((cache.g > 0) & (cache.g < 1)).all()
        lo, hi = np.minimum(cache.v_img, cache.v_txt), np.maximum(cache.v_img, cache.v_txt)
        assert ((cache.z >= lo - 1e-15) & (cache.z <= hi + 1e-15)).all()

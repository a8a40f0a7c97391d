import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from dfan import tensor as T
from dfan.data import ClassSplit, SemanticMatrix
from dfan.model import (
    ConfigError,
    DfanParams,
    attention_weights,
    attribute_features,
    compute_losses,
    cosine_loss,
    forward,
    global_prediction,
    load_checkpoint,
    local_prediction,
    local_scores,
    phi_forward,
    save_checkpoint,
    total_loss,
)
from dfan.tensor import no_grad


def params64(D, M, seed=0, **kw):
    return DfanParams.init(D, M, seed=seed, dtype=np.float64, **kw)


def relu(x):
    return np.maximum(x, 0)


def phi_reference(v, params):
    """Layer-by-layer MLP written out separately from the library code."""
    (w1, b1), (w2, b2), (w3, b3) = [(w.data, b.data) for w, b in params.phi]
    h1 = relu(v @ w1 + b1)
    h2 = relu(h1 @ w2 + b2)
    return h2 @ w3 + b3


class TestLocalScoresAndAttention:
    def test_scores_match_triple_loop(self):
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((5, 3))
        params = params64(3, 4)
        W = params.W_l.data
        ref = np.zeros((5, 4))
        for r in range(5):
            for j in range(4):
                for d in range(3):
                    ref[r, j] += Z[r, d] * W[d, j]
        np.testing.assert_allclose(local_scores(Z, params).data, ref, atol=1e-12)

    def test_scores_reject_width_mismatch(self):
        with pytest.raises(T.DimensionError, match="width 5"):
            local_scores(np.zeros((2, 5)), params64(4, 3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31), st.floats(0.1, 30.0))
    def test_region_attention_columns_are_distributions(self, N, M, seed, scale):
        A = np.random.default_rng(seed).standard_normal((N, M)) * scale
        W = attention_weights(T.Tensor(A, dtype=np.float64)).data
        assert np.all(W >= 0)
        np.testing.assert_allclose(W.sum(axis=0), 1.0, atol=1e-6)

    def test_attribute_axis_rows_are_distributions(self):
        A = np.random.default_rng(1).standard_normal((4, 6))
        W = attention_weights(T.Tensor(A, dtype=np.float64), "attribute").data
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            attention_weights(T.Tensor(np.zeros((2, 2))), "channel")

    def test_attribute_features_are_in_convex_hull_of_regions(self):
        rng = np.random.default_rng(2)
        Z = rng.standard_normal((7, 3))
        W = attention_weights(T.Tensor(rng.standard_normal((7, 5)) * 4, dtype=np.float64)).data
        Zhat = attribute_features(Z, T.Tensor(W, dtype=np.float64)).data
        for j in range(5):
            # the weights are a certificate of convex combination
            np.testing.assert_allclose(Z.T @ W[:, j], Zhat[:, j], atol=1e-12)
            assert np.all(Zhat[:, j] <= Z.max(axis=0) + 1e-12)
            assert np.all(Zhat[:, j] >= Z.min(axis=0) - 1e-12)

    def test_attribute_features_double_loop(self):
        rng = np.random.default_rng(3)
        Z, W = rng.standard_normal((4, 3)), rng.random((4, 2))
        ref = np.zeros((3, 2))
        for d in range(3):
            for j in range(2):
                ref[d, j] = sum(Z[r, d] * W[r, j] for r in range(4))
        got = attribute_features(Z, T.Tensor(W, dtype=np.float64)).data
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_region_count_mismatch(self):
        with pytest.raises(T.DimensionError):
            attribute_features(np.zeros((4, 3)), T.Tensor(np.zeros((5, 2))))


class TestCosineLoss:
    def test_orthonormal_columns_give_zero(self):
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 4)))
        assert cosine_loss(T.Tensor(Q * [1, 2, 3, 4], dtype=np.float64)).item() == pytest.approx(0, abs=1e-7)

    def test_duplicated_column_gives_sqrt2(self):
        Q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((5, 3)))
        Zhat = np.column_stack([Q[:, 0], Q[:, 1], 3 * Q[:, 0]])
        assert cosine_loss(T.Tensor(Zhat, dtype=np.float64)).item() == pytest.approx(np.sqrt(2), abs=1e-7)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
    def test_positive_when_columns_exceed_dimension(self, D, extra, seed):
        Zhat = np.random.default_rng(seed).standard_normal((D, D + extra))
        assert cosine_loss(T.Tensor(Zhat, dtype=np.float64)).item() > 0

    def test_matches_pairwise_cosines(self):
        Zhat = np.random.default_rng(4).standard_normal((5, 4))
        C = np.eye(4)
        for i in range(4):
            for j in range(4):
                a, b = Zhat[:, i], Zhat[:, j]
                C[i, j] = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        ref = np.sqrt(((C - np.eye(4)) ** 2).sum())
        assert cosine_loss(T.Tensor(Zhat, dtype=np.float64)).item() == pytest.approx(ref, rel=1e-12)

    def test_batch_is_mean(self):
        Zs = np.random.default_rng(5).standard_normal((3, 4, 2))
        each = [cosine_loss(T.Tensor(z, dtype=np.float64)).item() for z in Zs]
        assert cosine_loss(T.Tensor(Zs, dtype=np.float64)).item() == pytest.approx(np.mean(each), rel=1e-12)


class TestPredictions:
    def test_local_prediction_hand_example(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        params = DfanParams(T.parameter(W, dtype=np.float64), T.parameter(W, dtype=np.float64), None)
        Zhat = np.array([[1.0, 0.0], [0.0, 1.0]])
        # column-wise inner products: [1*1 + 3*0, 2*0 + 4*1]
        np.testing.assert_allclose(local_prediction(T.Tensor(Zhat, dtype=np.float64), params).data, [1.0, 4.0])

    def test_phi_matches_layer_by_layer(self):
        params = params64(8, 5, seed=3)
        v = np.random.default_rng(0).standard_normal((3, 8))
        np.testing.assert_allclose(phi_forward(v, params).data, phi_reference(v, params), atol=1e-12)

    def test_local_prediction_with_bias_learner(self):
        params = params64(6, 4, seed=1)
        Zhat = np.random.default_rng(1).standard_normal((6, 4))
        linear = (Zhat * params.W_l.data).sum(axis=0)
        offset = phi_reference(Zhat.T, params).mean(axis=0)
        got = local_prediction(T.Tensor(Zhat, dtype=np.float64), params).data
        np.testing.assert_allclose(got, linear + offset, atol=1e-12)

    def test_global_prediction(self):
        params = params64(6, 4, seed=2)
        p = np.random.default_rng(2).standard_normal(6)
        ref = p @ params.W_g.data + phi_reference(p, params)
        np.testing.assert_allclose(global_prediction(p, params).data, ref, atol=1e-12)

    def test_phi_disabled(self):
        with pytest.raises(ConfigError):
            phi_forward(np.zeros(3), params64(3, 2, bias_learner=False))

    def test_predictors_are_independent(self):
        params = params64(6, 3, seed=4)
        rng = np.random.default_rng(4)
        Z = rng.standard_normal((5, 6))
        p = Z.mean(axis=0)
        before = forward(params, Z, p)
        params.W_g.data[:] = rng.standard_normal(params.W_g.shape)
        after = forward(params, Z, p)
        np.testing.assert_array_equal(before.a_hat_local.data, after.a_hat_local.data)
        assert not np.allclose(before.a_hat_global.data, after.a_hat_global.data)
        params.W_l.data[:] = rng.standard_normal(params.W_l.shape)
        again = forward(params, Z, p)
        np.testing.assert_array_equal(after.a_hat_global.data, again.a_hat_global.data)

    def test_shared_predictor_is_one_tensor(self):
        params = params64(4, 3, shared=True)
        assert params.shared and "W_l" not in params.groups()

    def test_batched_forward_matches_per_sample(self):
        params = params64(8, 4, seed=5)
        Z = np.random.default_rng(5).standard_normal((3, 6, 8))
        p = Z.mean(axis=1)
        batched = forward(params, Z, p)
        for i in range(3):
            one = forward(params, Z[i], p[i])
            np.testing.assert_allclose(batched.a_hat_local.data[i], one.a_hat_local.data, atol=1e-12)
            np.testing.assert_allclose(batched.a_hat_global.data[i], one.a_hat_global.data, atol=1e-12)


@pytest.fixture
def toy():
    rng = np.random.default_rng(9)
    sm = SemanticMatrix(rng.uniform(0, 1, (4, 4)), ("a", "b", "c", "d"))
    split = ClassSplit((0, 1, 2), (3,))
    Z = rng.standard_normal((2, 6, 8))
    return Z, Z.mean(axis=1), np.array([0, 2]), sm, split


class TestLosses:
    def test_total_loss_example(self):
        assert total_loss(1.0, 2.0, 3.0, 0.5) == pytest.approx(4.5)

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, 2.0, 3.0, -0.1)

    def test_cross_entropy_matches_direct_formula(self, toy):
        Z, p, y, sm, split = toy
        params = params64(8, 4, seed=1)
        parts = compute_losses(params, Z, p, y, sm, split)
        out = forward(params, Z, p)
        A = sm.values[list(split.seen)].astype(np.float64)

        def ce(a_hat):
            total = 0.0
            for i, c in enumerate(y):
                logits = A @ a_hat[i]
                total += np.log(np.exp(logits).sum()) - logits[c]
            return total / len(y)

        assert parts.attr.item() == pytest.approx(ce(out.a_hat_local.data), rel=1e-10)
        assert parts.cls.item() == pytest.approx(ce(out.a_hat_global.data), rel=1e-10)
        ref = parts.attr.item() + parts.cls.item() + 0.1 * parts.cos.item()
        assert parts.total.item() == pytest.approx(ref, rel=1e-12)

    def test_unseen_label_is_rejected(self, toy):
        Z, p, _, sm, split = toy
        with pytest.raises(ValueError, match="'d'"):
            compute_losses(params64(8, 4), Z, p, np.array([0, 3]), sm, split)

    def test_term_selection(self, toy):
        Z, p, y, sm, split = toy
        params = params64(8, 4, seed=1)
        parts = compute_losses(params, Z, p, y, sm, split, terms=("cls",))
        assert parts.total.item() == pytest.approx(parts.cls.item())
        with pytest.raises(ConfigError):
            compute_losses(params, Z, p, y, sm, split, terms=("nope",))

    @pytest.mark.parametrize("axis", ["region", "attribute"])
    def test_end_to_end_finite_differences(self, axis):
        from dfan.gradcheck import smooth_instance

        Z, p, y, sm, split, params = smooth_instance(6, 8, 4, 3, axis, seed=0, margin=1e-2)

        def loss():
            return compute_losses(params, Z, p, y, sm, split, 0.1, axis).total.item()

        compute_losses(params, Z, p, y, sm, split, 0.1, axis).total.backward()
        for name, t in params.groups().items():
            analytic = t.grad.copy()
            numeric = numeric_grad(loss, t.data)
            assert rel_error(analytic, numeric) < 1e-4, name

    def test_excluded_terms_give_no_gradient(self, toy):
        Z, p, y, sm, split = toy
        params = params64(8, 4, seed=1)
        compute_losses(params, Z, p, y, sm, split, terms=("cls",)).total.backward()
        assert params.W_l.grad is None or not np.any(params.W_l.grad)
        assert np.any(params.W_g.grad)


class TestCheckpoint:
    def test_roundtrip_is_byte_exact(self, tmp_path):
        params = DfanParams.init(8, 5, seed=3)
        save_checkpoint(params, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        for (k, a), (k2, b) in zip(params.named().items(), back.named().items()):
            assert k == k2 and a.data.tobytes() == b.data.tobytes()
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_without_bias_learner(self, tmp_path):
        params = DfanParams.init(4, 3, bias_learner=False)
        save_checkpoint(params, tmp_path / "a.ckpt")
        assert load_checkpoint(tmp_path / "a.ckpt").phi is None

    def test_truncated(self, tmp_path):
        from dfan.data import FormatError, LengthError

        save_checkpoint(DfanParams.init(4, 3), tmp_path / "a.ckpt")
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(raw[:-4])
        with pytest.raises(LengthError):
            load_checkpoint(tmp_path / "a.ckpt")
        (tmp_path / "a.ckpt").write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.ckpt")

    def test_predictions_survive_roundtrip(self, tmp_path):
        params = DfanParams.init(8, 4, seed=2)
        Z = np.random.default_rng(0).standard_normal((2, 3, 8)).astype(np.float32)
        save_checkpoint(params, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        with no_grad():
            a = forward(params, Z, Z.mean(1)).a_hat_local.data
            b = forward(back, Z, Z.mean(1)).a_hat_local.data
        assert a.tobytes() == b.tobytes()

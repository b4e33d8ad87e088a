import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pubfeat_dp.dataio import PublicFeatureMatrix, SparseRow
from pubfeat_dp.encoder import (
    ALL,
    LinearEncoder,
    TwoLayerEncoder,
    UserEncoder,
    load_checkpoint,
    save_checkpoint,
    tree_norm,
)


def row(pairs):
    idx, vals = zip(*pairs) if pairs else ((), ())
    return SparseRow(np.array(idx, dtype=np.int64), np.array(vals, dtype=np.float64))


def dense(x: SparseRow, p: int) -> np.ndarray:
    out = np.zeros(p)
    out[x.indices] = x.values
    return out


def random_row(rng, p, k=3):
    idx = np.sort(rng.choice(p, size=k, replace=False))
    return SparseRow(idx, rng.standard_normal(k))


def finite_difference(enc, x, r, h=1e-4):
    """Central differences of <forward(x), r> in every parameter."""
    grads = {}
    for name, P in enc.params.items():
        G = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            plus = {k: v.copy() for k, v in enc.params.items()}
            minus = {k: v.copy() for k, v in enc.params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            G[idx] = (enc.with_params(plus).forward(x) @ r - enc.with_params(minus).forward(x) @ r) / (2 * h)
        grads[name] = G
    return grads


class TestForward:
    def test_one_hot_lookup(self):
        theta = np.arange(12.0).reshape(4, 3)
        assert LinearEncoder(theta).forward(row([(0, 1.0)])).tolist() == theta[0].tolist()

    def test_zero_input(self):
        rng = np.random.default_rng(0)
        assert np.all(LinearEncoder.init(5, 2, rng).forward(row([])) == 0)
        enc = TwoLayerEncoder.init(5, 2, rng, activation="tanh")
        np.testing.assert_array_equal(enc.forward(row([])), enc.params["dense"].T @ np.tanh(np.zeros(2)))

    def test_two_layer_identity_matches_matrix_product(self):
        rng = np.random.default_rng(1)
        enc = TwoLayerEncoder.init(10, 4, rng)
        x = random_row(rng, 10)
        expected = enc.params["dense"].T @ enc.params["embedding"].T @ dense(x, 10)
        np.testing.assert_allclose(enc.forward(x), expected, rtol=1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            LinearEncoder(np.zeros((3, 2))).forward(row([(3, 1.0)]))

    def test_forward_all_matches_rows(self):
        rng = np.random.default_rng(2)
        X = PublicFeatureMatrix.from_dense(rng.standard_normal((6, 8)) * (rng.random((6, 8)) < 0.4))
        for enc in (LinearEncoder.init(8, 3, rng), TwoLayerEncoder.init(8, 3, rng, "tanh")):
            V = enc.forward_all(X)
            for j in range(X.m):
                np.testing.assert_allclose(V[j], enc.forward(X.row(j)), rtol=1e-12, atol=1e-15)


class TestVjp:
    def test_linear_is_outer_product(self):
        rng = np.random.default_rng(3)
        x, r = random_row(rng, 7), rng.standard_normal(3)
        g = LinearEncoder.init(7, 3, rng).vjp(x, r)
        np.testing.assert_allclose(g["linear"], np.outer(dense(x, 7), r))

    def test_zero_residual(self):
        rng = np.random.default_rng(4)
        enc = TwoLayerEncoder.init(6, 2, rng, "tanh")
        assert tree_norm(enc.vjp(random_row(rng, 6), np.zeros(2))) == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            LinearEncoder(np.zeros((3, 2))).vjp(row([(0, 1.0)]), np.zeros(3))

    @pytest.mark.parametrize("activation", ["identity", "tanh"])
    def test_finite_differences(self, activation):
        rng = np.random.default_rng(5)
        for enc in (LinearEncoder.init(6, 3, rng), TwoLayerEncoder.init(6, 3, rng, activation)):
            x, r = random_row(rng, 6), rng.standard_normal(3)
            g, fd = enc.vjp(x, r), finite_difference(enc, x, r)
            for k in g:
                np.testing.assert_allclose(g[k], fd[k], rtol=1e-5, atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_residual(self, seed, a, b):
        rng = np.random.default_rng(seed)
        enc = TwoLayerEncoder.init(8, 3, rng, "tanh")
        x, r1, r2 = random_row(rng, 8), rng.standard_normal(3), rng.standard_normal(3)
        lhs = enc.vjp(x, a * r1 + b * r2)
        g1, g2 = enc.vjp(x, r1), enc.vjp(x, r2)
        for k in lhs:
            np.testing.assert_allclose(lhs[k], a * g1[k] + b * g2[k], rtol=1e-9, atol=1e-12)

    def test_per_example_norms(self):
        rng = np.random.default_rng(6)
        X = PublicFeatureMatrix.from_dense(rng.standard_normal((5, 9)) * (rng.random((5, 9)) < 0.5))
        items = rng.integers(5, size=12)
        R = rng.standard_normal((12, 3))
        for enc in (LinearEncoder.init(9, 3, rng), TwoLayerEncoder.init(9, 3, rng, "tanh")):
            expected = [tree_norm(enc.vjp(X.row(j), r)) for j, r in zip(items, R)]
            np.testing.assert_allclose(enc.per_example_grad_norms(X.csr, items, R), expected, rtol=1e-10)


class TestSparsity:
    def test_pattern(self):
        enc = TwoLayerEncoder.init(10, 2, np.random.default_rng(0))
        assert enc.sparsity_pattern(row([(3, 1.0), (7, 2.0)])) == {3, 7}
        assert enc.sparsity_pattern(row([])) == set()
        assert LinearEncoder(np.zeros((10, 2))).sparsity_pattern(row([(3, 1.0)])) == ALL

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_rows_outside_pattern_are_zero(self, seed):
        rng = np.random.default_rng(seed)
        enc = TwoLayerEncoder.init(40, 3, rng, "tanh")
        x = random_row(rng, 40, k=int(rng.integers(1, 6)))
        g = enc.vjp(x, rng.standard_normal(3))["embedding"]
        touched = set(np.flatnonzero(np.any(g != 0, axis=1)).tolist())
        assert touched <= enc.sparsity_pattern(x)
        outside = np.setdiff1d(np.arange(40), list(enc.sparsity_pattern(x)))
        assert np.all(g[outside] == 0)


class TestUserEncoder:
    def test_lookup_and_set(self):
        users = UserEncoder([[1.0, 2.0], [3.0, 4.0]])
        assert users.user_embed(0).tolist() == [1.0, 2.0]
        users.set_row(0, [5.0, 6.0])
        assert users.user_embed(0).tolist() == [5.0, 6.0]
        with pytest.raises(IndexError):
            users.user_embed(2)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            UserEncoder([[np.nan]])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    enc = TwoLayerEncoder.init(6, 2, rng, "tanh")
    users = UserEncoder.init(4, 2, rng)
    save_checkpoint(tmp_path / "c.csv", enc, users)
    enc2, users2 = load_checkpoint(tmp_path / "c.csv", activation="tanh")
    for k in enc.params:
        np.testing.assert_array_equal(enc.params[k], enc2.params[k])
    np.testing.assert_array_equal(users.table, users2.table)
    save_checkpoint(tmp_path / "l.csv", LinearEncoder(rng.standard_normal((5, 2))))
    lin, none = load_checkpoint(tmp_path / "l.csv")
    assert isinstance(lin, LinearEncoder) and none is None

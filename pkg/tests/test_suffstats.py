import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from pubfeat_dp.dataio import InteractionDataset
from pubfeat_dp.encoder import LinearEncoder, UserEncoder
from pubfeat_dp.rng import NoiseSource
from pubfeat_dp.suffstats import (
    LogisticLoss,
    QuadraticLoss,
    SuffStats,
    clip,
    compute_convex_stats,
    compute_stats,
    get_loss,
    load_stats,
    noise_convex_stats,
    noise_stats,
    save_stats,
    symmetric_gaussian,
)


class TestClip:
    def test_examples(self):
        np.testing.assert_array_equal(clip([3.0, 4.0], 5.0), [3.0, 4.0])
        np.testing.assert_allclose(clip([6.0, 8.0], 5.0), [3.0, 4.0])
        assert clip(0.0, 2.0) == 0.0
        assert clip(-7.0, 2.0) == -2.0

    def test_matrix_uses_frobenius(self):
        out = clip(np.full((2, 2), 2.0), 2.0)
        assert np.isclose(np.linalg.norm(out), 2.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            clip([np.inf, 0.0], 1.0)
        with pytest.raises(ValueError):
            clip([1.0], 0.0)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(1e-3, 1e3))
    def test_norm_bounded_and_idempotent(self, x, bound):
        out = clip(x, bound)
        assert np.linalg.norm(out) <= bound * (1 + 1e-12)
        np.testing.assert_allclose(clip(out, bound), out)


def one(users, items, labels, n=None, m=None, w=None):
    return InteractionDataset(users, items, labels, w, n=n, m=m)


class TestComputeStats:
    def test_single_outer_product(self):
        st_ = compute_stats(one([0], [0], [2.0]), [[1.0, 0.0]], 10, 10)
        np.testing.assert_array_equal(st_.A[0], [[1, 0], [0, 0]])
        np.testing.assert_array_equal(st_.b[0], [2, 0])

    def test_identity(self):
        st_ = compute_stats(one([0, 1], [0, 0], [1.0, 1.0]), [[1.0, 0.0], [0.0, 1.0]], 10, 10)
        np.testing.assert_array_equal(st_.A[0], np.eye(2))
        np.testing.assert_array_equal(st_.b[0], [1, 1])

    def test_label_clip(self):
        st_ = compute_stats(one([0], [0], [5.0]), [[1.0]], 10, 1)
        assert st_.b[0, 0] == 1.0

    def test_empty_items_get_zeros(self):
        st_ = compute_stats(one([0], [0], [1.0], m=3), [[1.0]], 1, 1)
        assert st_.m == 3 and np.all(st_.A[1:] == 0) and np.all(st_.b[1:] == 0)

    def test_matches_explicit_loop(self):
        rng = np.random.default_rng(0)
        X, ds, users = random_instance(rng, weights=True)
        st_ = compute_stats(ds, users, 0.8, 0.5)
        A = np.zeros_like(st_.A)
        b = np.zeros_like(st_.b)
        for i in range(ds.D):
            u = clip(users.table[ds.users[i]], 0.8)
            y = clip(ds.labels[i], 0.5)
            A[ds.items[i]] += ds.weights[i] * np.outer(u, u)
            b[ds.items[i]] += ds.weights[i] * y * u
        np.testing.assert_allclose(st_.A, A, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(st_.b, b, rtol=1e-12, atol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_pre_noise_invariants(self, seed):
        rng = np.random.default_rng(seed)
        X, ds, users = random_instance(rng, weights=True)
        gu, gy = 0.7, 1.3
        st_ = compute_stats(ds, users, gu, gy, m=X.m)
        wsum = np.bincount(ds.items, weights=ds.weights, minlength=X.m)
        np.testing.assert_array_equal(st_.A, np.transpose(st_.A, (0, 2, 1)))
        assert np.all(np.linalg.eigvalsh(st_.A) >= -1e-12)
        assert np.all(np.linalg.norm(st_.A, axis=(1, 2)) <= wsum * gu**2 + 1e-12)
        assert np.all(np.linalg.norm(st_.b, axis=1) <= wsum * gu * gy + 1e-12)

    def test_additivity_on_representable_data(self):
        rng = np.random.default_rng(1)
        users = UserEncoder(rng.integers(-2, 3, size=(4, 2)).astype(float))
        a = one(rng.integers(4, size=10), rng.integers(3, size=10), rng.integers(-3, 4, size=10), n=4, m=3)
        b = one(rng.integers(4, size=7), rng.integers(3, size=7), rng.integers(-3, 4, size=7), n=4, m=3)
        total = compute_stats(a.concat(b), users, 100, 100)
        parts = compute_stats(a, users, 100, 100) + compute_stats(b, users, 100, 100)
        np.testing.assert_array_equal(total.A, parts.A)
        np.testing.assert_array_equal(total.b, parts.b)

    def test_additivity_on_float_data(self):
        rng = np.random.default_rng(4)
        X, ds, users = random_instance(rng, m=5, D=40)
        cut = 17
        a, b = ds.subset(np.arange(cut)), ds.subset(np.arange(cut, ds.D))
        total = compute_stats(ds, users, 1.0, 1.0, m=5)
        parts = compute_stats(a, users, 1.0, 1.0, m=5) + compute_stats(b, users, 1.0, 1.0, m=5)
        np.testing.assert_allclose(total.A, parts.A, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(total.b, parts.b, rtol=1e-12, atol=1e-12)


class TestNoise:
    def test_zero_sigma_unchanged(self):
        rng = np.random.default_rng(2)
        X, ds, users = random_instance(rng)
        st_ = compute_stats(ds, users, 1, 1)
        ns = NoiseSource(0)
        out = noise_stats(st_, 0.0, 1, 1, ns)
        np.testing.assert_array_equal(out.A, st_.A)
        assert ns.draws == 0

    def test_symmetric_and_scaled(self):
        rng = np.random.default_rng(3)
        X, ds, users = random_instance(rng, d=3)
        st_ = compute_stats(ds, users, 2.0, 3.0)
        out = noise_stats(st_, 1.5, 2.0, 3.0, NoiseSource(4), ("stats", 7))
        np.testing.assert_array_equal(out.A, np.transpose(out.A, (0, 2, 1)))
        ns = NoiseSource(4)
        j = 1
        upper = ns.normal(("stats", 7, j, "A"), 6)
        iu = np.triu_indices(3)
        np.testing.assert_allclose((out.A[j] - st_.A[j])[iu], 1.5 * 4.0 * upper, rtol=1e-12)
        np.testing.assert_allclose(out.b[j] - st_.b[j], 1.5 * 6.0 * ns.normal(("stats", 7, j, "b"), 3), rtol=1e-12)

    def test_draw_count(self):
        rng = np.random.default_rng(5)
        X, ds, users = random_instance(rng, m=9, d=4)
        ns = NoiseSource(0)
        noise_stats(compute_stats(ds, users, 1, 1), 1.0, 1, 1, ns)
        assert ns.draws == 9 * (4 * 5 // 2 + 4)
        assert ns.field_draws("A") == 9 * 10 and ns.field_draws("b") == 9 * 4

    def test_noise_mean_is_zero(self):
        d, m = 2, 3
        base = SuffStats(np.zeros((m, d, d)), np.zeros((m, d)))
        draws = np.stack([noise_stats(base, 1.0, 1, 1, NoiseSource(s)).A for s in range(10_000)])
        se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0)) < 3 * se + 1e-12)

    def test_symmetric_gaussian(self):
        rng = np.random.default_rng(6)
        M = symmetric_gaussian(4, rng)
        np.testing.assert_array_equal(M, M.T)
        assert symmetric_gaussian(1, rng).shape == (1, 1)
        samples = np.stack([symmetric_gaussian(3, rng) for _ in range(10_000)])
        var = samples.var(axis=0)[np.triu_indices(3)]
        assert np.all(np.abs(var - 1) < 0.05)
        with pytest.raises(ValueError):
            symmetric_gaussian(0, rng)


class TestConvex:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.X, self.ds, self.users = random_instance(rng, m=6, d=3, D=40)
        self.enc = LinearEncoder.init(self.X.p, 3, rng)

    def test_quadratic_reduces_to_ab(self):
        st_ = compute_stats(self.ds, self.users, 1e9, 1e9)
        cs = compute_convex_stats(self.ds, self.users, self.enc, self.X, "quadratic", 1e9, 1e9, 1e9, 1e9)
        V0 = self.enc.forward_all(self.X)
        np.testing.assert_allclose(cs.H, st_.A, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(cs.g, np.einsum("jab,jb->ja", st_.A, V0) - st_.b, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(cs.residuals(V0 + 1.0), st_.residuals(V0 + 1.0), rtol=1e-10, atol=1e-10)

    def test_logistic_derivatives_at_zero(self):
        loss = LogisticLoss()
        assert loss.d2(0.0, 1) == pytest.approx(0.25)
        assert loss.d1(0.0, 1) == pytest.approx(-0.5)
        assert loss.d1(0.0, 0) == pytest.approx(0.5)
        s = np.linspace(-3, 3, 7)
        h = 1e-6
        for y in (0, 1):
            np.testing.assert_allclose(loss.d1(s, y), (loss.value(s + h, y) - loss.value(s - h, y)) / (2 * h), rtol=1e-6)
            np.testing.assert_allclose(loss.d2(s, y), (loss.d1(s + h, y) - loss.d1(s - h, y)) / (2 * h), rtol=1e-6)
        np.testing.assert_array_equal(QuadraticLoss().d2(s, 0), 1.0)

    def test_per_summand_clipping(self):
        cs = compute_convex_stats(self.ds, self.users, self.enc, self.X, "quadratic", 0.1, 0.05, 10, 10)
        counts = np.bincount(self.ds.items, minlength=self.X.m)
        assert np.all(np.linalg.norm(cs.H, axis=(1, 2)) <= 0.1 * counts + 1e-12)
        assert np.all(np.linalg.norm(cs.g, axis=1) <= 0.05 * counts + 1e-12)

    def test_empty_item_zero(self):
        ds = InteractionDataset([0], [0], [1.0], n=1, m=self.X.m)
        cs = compute_convex_stats(ds, [[1.0, 0.0, 0.0]], self.enc, self.X, "logistic", 1, 1, 1, 1)
        assert np.all(cs.H[1:] == 0) and np.all(cs.g[1:] == 0)

    def test_loss_without_derivatives(self):
        class Bad:
            def value(self, s, y):
                return s

        with pytest.raises(TypeError):
            get_loss(Bad())

    def test_convex_noise_fields(self):
        cs = compute_convex_stats(self.ds, self.users, self.enc, self.X, "logistic", 1, 1, 1, 1)
        ns = NoiseSource(1)
        out = noise_convex_stats(cs, 2.0, 1, 1, ns, ("convex", 3))
        np.testing.assert_array_equal(out.H, np.transpose(out.H, (0, 2, 1)))
        assert ns.field_draws("H") == self.X.m * 6 and ns.field_draws("g") == self.X.m * 3


def test_stats_dump_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    X, ds, users = random_instance(rng, d=2)
    st_ = noise_stats(compute_stats(ds, users, 1, 1, m=X.m), 1.0, 1, 1, NoiseSource(2))
    save_stats(tmp_path / "s.csv", st_)
    back = load_stats(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.A, st_.A)
    np.testing.assert_array_equal(back.b, st_.b)
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "item_id,kind,row,col,value"


def test_stats_of_empty_dataset():
    ds = InteractionDataset(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0), n=1, m=2)
    stats = compute_stats(ds, np.ones((1, 3)), 1.0, 1.0)
    assert stats.A.shape == (2, 3, 3) and not stats.A.any() and not stats.b.any()

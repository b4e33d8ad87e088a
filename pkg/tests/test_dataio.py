import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pubfeat_dp.dataio import (
    DataFormatError,
    InteractionDataset,
    PublicFeatureMatrix,
    gen_synthetic_linear,
    load_feature_matrix,
    load_interactions,
    load_matrix,
    partition,
    remap_ids,
    save_feature_matrix,
    save_interactions,
    save_matrix,
    save_synthetic,
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestFeatureLoader:
    def test_transcription(self, tmp_path):
        X = load_feature_matrix(write(tmp_path, "f.csv", "item_id,feature_id,value\n0,0,1.0\n1,2,0.5\n"))
        assert (X.m, X.p) == (2, 3)
        assert X.row(0).indices.tolist() == [0] and X.row(0).values.tolist() == [1.0]
        assert X.row(1).indices.tolist() == [2] and X.row(1).values.tolist() == [0.5]

    def test_empty_body(self, tmp_path):
        with pytest.raises(DataFormatError, match="no items"):
            load_feature_matrix(write(tmp_path, "f.csv", "item_id,feature_id,value\n"))

    def test_duplicate_entry(self, tmp_path):
        with pytest.raises(DataFormatError, match="duplicate") as info:
            load_feature_matrix(write(tmp_path, "f.csv", "item_id,feature_id,value\n0,0,1.0\n0,0,1.0\n"))
        assert info.value.line == 3

    def test_negative_index_and_parse_error(self, tmp_path):
        with pytest.raises(DataFormatError, match="negative"):
            load_feature_matrix(write(tmp_path, "f.csv", "item_id,feature_id,value\n0,-1,1.0\n"))
        with pytest.raises(DataFormatError, match="line 2"):
            load_feature_matrix(write(tmp_path, "f.csv", "item_id,feature_id,value\n0,x,1.0\n"))

    def test_bad_header(self, tmp_path):
        with pytest.raises(DataFormatError, match="header"):
            load_feature_matrix(write(tmp_path, "f.csv", "a,b,c\n0,0,1\n"))


class TestInteractionLoader:
    def test_single_row(self, tmp_path):
        ds = load_interactions(write(tmp_path, "i.csv", "user_id,item_id,rating\n0,1,3.5\n"))
        assert ds.D == 1
        assert (ds.users[0], ds.items[0], ds.labels[0], ds.weights[0]) == (0, 1, 3.5, 1.0)
        assert (ds.n, ds.m) == (1, 2)

    def test_duplicates_kept(self, tmp_path):
        ds = load_interactions(write(tmp_path, "i.csv", "user_id,item_id,rating\n0,1,3\n0,1,4\n"))
        assert ds.D == 2 and ds.labels.tolist() == [3.0, 4.0]

    @pytest.mark.parametrize("bad", ["NaN", "inf", "-inf"])
    def test_non_finite_rating(self, tmp_path, bad):
        with pytest.raises(DataFormatError, match="non-finite"):
            load_interactions(write(tmp_path, "i.csv", f"user_id,item_id,rating\n0,1,{bad}\n"))

    def test_negative_user(self, tmp_path):
        with pytest.raises(DataFormatError, match="negative"):
            load_interactions(write(tmp_path, "i.csv", "user_id,item_id,rating\n-2,1,1\n"))


class TestDataModel:
    def test_feature_matrix_invariants(self):
        with pytest.raises(ValueError):
            PublicFeatureMatrix.from_rows([[(0, 1.0), (0, 2.0)]], p=3)
        with pytest.raises(ValueError):
            PublicFeatureMatrix.from_rows([[(3, 1.0)]], p=3)
        X = PublicFeatureMatrix.from_dense([[3.0, 4.0], [0.0, 1.0]])
        np.testing.assert_allclose(X.row_norms(), [5.0, 1.0])
        assert X.norm_bound == 5.0

    def test_dataset_invariants(self):
        with pytest.raises(ValueError):
            InteractionDataset([0], [5], [1.0], m=3)
        with pytest.raises(ValueError):
            InteractionDataset([0], [0], [1.0], weights=[-1.0])
        with pytest.raises(ValueError):
            InteractionDataset([0, 1], [0], [1.0])
        ds = InteractionDataset([0, 2], [1, 0], [1.0, 2.0])
        assert (ds.n, ds.m, ds.D) == (3, 2, 2)
        with pytest.raises(ValueError):
            ds.labels[0] = 5.0

    def test_remap_ids(self):
        dense, mapping = remap_ids(["b", "a", "b", "c"])
        assert dense.tolist() == [0, 1, 0, 2]
        assert mapping == {"b": 0, "a": 1, "c": 2}


class TestPartition:
    def test_worked_example(self):
        part = partition(InteractionDataset([0, 0, 1], [1, 0, 1], [1.0, 1.0, 1.0]))
        assert {k: v.tolist() for k, v in part.by_item.items()} == {0: [1], 1: [0, 2]}
        assert {k: v.tolist() for k, v in part.by_user.items()} == {0: [0, 1], 1: [2]}

    def test_empty(self):
        part = partition(InteractionDataset([], [], []))
        assert part.by_item == {} and part.by_user == {}

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 9)), min_size=1, max_size=80))
    def test_disjoint_cover(self, pairs):
        users, items = zip(*pairs)
        ds = InteractionDataset(users, items, np.zeros(len(pairs)))
        part = partition(ds)
        for groups, keys in ((part.by_item, ds.items), (part.by_user, ds.users)):
            flat = np.concatenate(list(groups.values()))
            assert sorted(flat.tolist()) == list(range(ds.D))
            for key, idx in groups.items():
                assert np.all(keys[idx] == key)
                assert np.all(np.diff(idx) > 0)


class TestSynthetic:
    def test_noiseless_labels_are_bilinear(self):
        data = gen_synthetic_linear(8, 5, 20, 3, 4, 0.0, seed=1, num_examples=50)
        ds = data.interactions
        V = data.features.toarray() @ data.theta
        expected = np.einsum("id,id->i", V[ds.items], data.users[ds.users])
        np.testing.assert_allclose(ds.labels, expected, rtol=1e-13, atol=1e-15)

    def test_deterministic(self, tmp_path):
        a = save_synthetic(tmp_path / "a", gen_synthetic_linear(8, 5, 20, 3, 4, 0.1, seed=7, num_examples=30))
        b = save_synthetic(tmp_path / "b", gen_synthetic_linear(8, 5, 20, 3, 4, 0.1, seed=7, num_examples=30))
        for key in a:
            assert a[key].read_bytes() == b[key].read_bytes()

    def test_standard_shape(self):
        data = gen_synthetic_linear(32, 100, 512, 4, 8, 0.1, seed=0)
        X = data.features
        assert (X.m, X.p) == (32, 512)
        assert np.all(np.diff(X.csr.indptr) == 8)
        np.testing.assert_allclose(X.row_norms(), 1.0)
        assert np.all(np.linalg.norm(data.users, axis=1) <= 1.0 + 1e-12)

    @pytest.mark.parametrize("kwargs", [dict(d=30, p=20), dict(features_per_item=21, p=20), dict(m=0)])
    def test_dimension_errors(self, kwargs):
        args = dict(m=8, n=5, p=20, d=3, features_per_item=4, label_noise_std=0.1, seed=0) | kwargs
        with pytest.raises(ValueError):
            gen_synthetic_linear(**args)


def test_round_trips(tmp_path):
    data = gen_synthetic_linear(8, 5, 20, 3, 4, 0.3, seed=2, num_examples=40)
    save_feature_matrix(tmp_path / "f.csv", data.features)
    save_interactions(tmp_path / "i.csv", data.interactions)
    save_matrix(tmp_path / "t.csv", data.theta)
    X = load_feature_matrix(tmp_path / "f.csv")
    ds = load_interactions(tmp_path / "i.csv")
    assert (X.csr != data.features.csr[:, : X.p]).nnz == 0
    np.testing.assert_array_equal(ds.labels, data.interactions.labels)
    np.testing.assert_array_equal(ds.users, data.interactions.users)
    np.testing.assert_array_equal(ds.items, data.interactions.items)
    np.testing.assert_array_equal(load_matrix(tmp_path / "t.csv"), data.theta)

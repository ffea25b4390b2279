"""Unit tests for schemas, encoding, splitting, CSV ingestion, synthetic data."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfusion.data import (
    UNKNOWN,
    Dataset,
    Feature,
    FeatureSchema,
    SyntheticSpec,
    decode,
    encode,
    generate_synthetic,
    load_csv,
    load_schema,
    numeric_stats,
    save_csv,
    save_schema,
    stratified_split,
    stratified_split_indices,
)
from fedfusion.errors import ConfigError, DataError


def make_labels(n0, n1, seed=0):
    labels = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    return np.random.default_rng(seed).permutation(labels)


class TestStratifiedSplit:
    def test_exact_ratio_case(self):
        labels = make_labels(90, 10)
        tr, te = stratified_split_indices(labels, 0.7, seed=1)
        assert np.sum(labels[tr] == 0) == 63 and np.sum(labels[tr] == 1) == 7
        assert np.sum(labels[te] == 0) == 27 and np.sum(labels[te] == 1) == 3

    def test_rounding_and_singleton_class(self):
        labels = make_labels(9, 1)
        tr, te = stratified_split_indices(labels, 0.7, seed=1)
        # floor(0.7*9 + 0.5) = 6 negatives; the lone positive goes to train
        assert np.sum(labels[tr] == 0) == 6 and np.sum(labels[tr] == 1) == 1
        assert np.sum(labels[te] == 0) == 3 and np.sum(labels[te] == 1) == 0

    def test_deterministic(self):
        labels = make_labels(50, 13)
        a = stratified_split_indices(labels, 0.7, seed=9)
        b = stratified_split_indices(labels, 0.7, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_missing_class_rejected(self):
        with pytest.raises(DataError):
            stratified_split_indices(np.zeros(10, dtype=int), 0.7, seed=0)

    def test_bad_fraction_rejected(self):
        for frac in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                stratified_split_indices(make_labels(5, 5), frac, seed=0)

    @given(
        n0=st.integers(min_value=2, max_value=200),
        n1=st.integers(min_value=2, max_value=200),
        frac=st.sampled_from([0.3, 0.5, 0.7, 0.9]),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=300, deadline=None)
    def test_partition_property(self, n0, n1, frac, seed):
        labels = make_labels(n0, n1, seed=seed)
        tr, te = stratified_split_indices(labels, frac, seed=seed)
        merged = np.sort(np.concatenate([tr, te]))
        assert np.array_equal(merged, np.arange(n0 + n1))
        for cls, n_c in ((0, n0), (1, n1)):
            want = min(max(int(np.floor(frac * n_c + 0.5)), 1), n_c - 1)
            assert np.sum(labels[tr] == cls) == want

    def test_dataset_level_split(self):
        schema = FeatureSchema([Feature("a", "numeric")])
        ds = Dataset(schema, [[float(i)] for i in range(10)], make_labels(8, 2))
        tr, te = stratified_split(ds, 0.7, seed=4)
        assert tr.n_rows + te.n_rows == 10
        got = sorted(r[0] for r in tr.rows + te.rows)
        assert got == [float(i) for i in range(10)]


def mixed_schema():
    return FeatureSchema(
        [
            Feature("age", "numeric"),
            Feature("stage", "categorical", ["A", "B"]),
        ]
    )


class TestEncode:
    def test_one_hot_placement(self):
        ds = Dataset(mixed_schema(), [[10.0, "B"]], np.array([0]))
        mat = encode(ds)
        start, stop = mat.column_map["stage"]
        np.testing.assert_array_equal(mat.x[0, start:stop], [0.0, 1.0])
        assert mat.column_labels[start:stop] == ["stage=A", "stage=B"]

    def test_unknown_categorical_all_zero(self):
        ds = Dataset(mixed_schema(), [[10.0, UNKNOWN]], np.array([0]))
        mat = encode(ds)
        start, stop = mat.column_map["stage"]
        np.testing.assert_array_equal(mat.x[0, start:stop], [0.0, 0.0])

    def test_numeric_standardization_with_train_stats(self):
        ds = Dataset(mixed_schema(), [[14.0, "A"]], np.array([1]))
        mat = encode(ds, stats={"age": (10.0, 2.0)})
        start, _ = mat.column_map["age"]
        np.testing.assert_array_equal(mat.x[0, start : start + 2], [2.0, 1.0])
        assert mat.column_labels[start : start + 2] == ["age", "age::present"]

    def test_unknown_numeric_zero_with_absent_indicator(self):
        ds = Dataset(mixed_schema(), [[UNKNOWN, "A"]], np.array([0]))
        mat = encode(ds, stats={"age": (10.0, 2.0)})
        start, _ = mat.column_map["age"]
        np.testing.assert_array_equal(mat.x[0, start : start + 2], [0.0, 0.0])

    def test_out_of_vocabulary_category(self):
        ds = Dataset(mixed_schema(), [[1.0, "A"]], np.array([0]))
        ds.rows[0][1] = "Z"  # bypass any construction-time checking
        with pytest.raises(DataError, match="stage.*'Z'"):
            encode(ds)

    def test_constant_feature_gets_unit_sd(self):
        schema = FeatureSchema([Feature("flat", "numeric")])
        ds = Dataset(schema, [[5.0], [5.0]], np.array([0, 1]))
        assert numeric_stats(ds)["flat"] == (5.0, 1.0)

    def test_one_hot_group_sums(self):
        rng = np.random.default_rng(7)
        cats = ["x", "y", "z"]
        schema = FeatureSchema(
            [Feature("n", "numeric"), Feature("c", "categorical", cats)]
        )
        rows = []
        for _ in range(50):
            cell = UNKNOWN if rng.uniform() < 0.3 else cats[rng.integers(3)]
            rows.append([float(rng.normal()), cell])
        ds = Dataset(schema, rows, rng.integers(0, 2, size=50))
        mat = encode(ds)
        start, stop = mat.column_map["c"]
        sums = mat.x[:, start:stop].sum(axis=1)
        assert set(np.unique(sums)) <= {0.0, 1.0}

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        schema = FeatureSchema(
            [
                Feature("a", "numeric"),
                Feature("c", "categorical", ["p", "q", "r"]),
                Feature("b", "numeric"),
            ]
        )
        for _ in range(20):
            rows = []
            for _ in range(30):
                row = [
                    UNKNOWN if rng.uniform() < 0.2 else float(rng.normal(50, 9)),
                    UNKNOWN if rng.uniform() < 0.2 else ["p", "q", "r"][rng.integers(3)],
                    UNKNOWN if rng.uniform() < 0.2 else float(rng.normal(-3, 0.01)),
                ]
                rows.append(row)
            ds = Dataset(schema, rows, rng.integers(0, 2, size=30))
            back = decode(encode(ds))
            for orig, rec in zip(ds.rows, back.rows):
                for feat, a, b in zip(schema.features, orig, rec):
                    if a is UNKNOWN:
                        assert b is UNKNOWN
                    elif feat.kind == "numeric":
                        assert abs(a - b) < 1e-9
                    else:
                        assert a == b
            np.testing.assert_array_equal(ds.labels, back.labels)


class TestSchemaValidation:
    def test_duplicate_names(self):
        with pytest.raises(DataError):
            FeatureSchema([Feature("x", "numeric"), Feature("x", "numeric")])

    def test_categorical_needs_categories(self):
        with pytest.raises(DataError):
            FeatureSchema([Feature("c", "categorical")])

    def test_row_width_checked(self):
        with pytest.raises(DataError):
            Dataset(mixed_schema(), [[1.0]], np.array([0]))

    def test_labels_must_be_binary(self):
        with pytest.raises(DataError):
            Dataset(mixed_schema(), [[1.0, "A"]], np.array([2]))


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(n_small=80, n_large=160, seed=5)
        a_small, a_large = generate_synthetic(spec)
        b_small, b_large = generate_synthetic(spec)
        for a, b in ((a_small, b_small), (a_large, b_large)):
            assert a.schema == b.schema
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(np.array(a.rows), np.array(b.rows))

    def test_prevalence_within_tolerance(self):
        spec = SyntheticSpec(n_small=10_000, n_large=10_000, prevalence_target=0.08, seed=3)
        small, large = generate_synthetic(spec)
        for ds in (small, large):
            n_pos = int(ds.labels.sum())
            assert 700 <= n_pos <= 900

    def test_schemas_overlap_exactly_on_common_features(self):
        small, large = generate_synthetic(SyntheticSpec(n_small=50, n_large=50, seed=2))
        shared = set(small.schema.names) & set(large.schema.names)
        assert shared == {f"c{j:02d}" for j in range(6)}
        assert len(small.schema) == 12 and len(large.schema) == 8

    def test_noiseless_common_views_are_informative(self):
        # identity projections expose z itself; a logistic oracle should
        # recover the Bernoulli(sigmoid(w.z + b)) structure nearly perfectly
        from sklearn.linear_model import LogisticRegression
        from sklearn.metrics import roc_auc_score

        spec = SyntheticSpec(
            latent_dim=6,
            n_common=6,
            n_unique_small=0,
            n_unique_large=0,
            n_small=10_000,
            n_large=10_000,
            noise_sd=0.0,
            seed=13,
        )
        small, _ = generate_synthetic(spec)
        x = np.array(small.rows)
        y = small.labels
        probs = (
            LogisticRegression(max_iter=1000)
            .fit(x, y)
            .predict_proba(x)[:, 1]
        )
        assert roc_auc_score(y, probs) > 0.95

    def test_impossible_prevalence_raises(self):
        # 10 rows cannot land within +/-0.01 of 0.085 (multiples of 0.1 only)
        spec = SyntheticSpec(n_small=10, n_large=10, prevalence_target=0.085, seed=0)
        with pytest.raises(DataError):
            generate_synthetic(spec)

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(prevalence_target=0.6)
        with pytest.raises(ConfigError):
            SyntheticSpec(n_common=0)
        with pytest.raises(ConfigError):
            SyntheticSpec(noise_sd=-1.0)


class TestCsvRoundTrip:
    def write_schema(self, tmp_path):
        path = tmp_path / "schema.json"
        save_schema(mixed_schema(), "outcome", path)
        return path

    def test_well_formed_file(self, tmp_path):
        schema_path = self.write_schema(tmp_path)
        csv_path = tmp_path / "d.csv"
        csv_path.write_text("age,stage,outcome\n1.5,A,0\n2.0,B,1\n3.25,A,0\n")
        ds = load_csv(csv_path, schema_path)
        assert ds.n_rows == 3
        assert ds.rows[1] == [2.0, "B"]
        np.testing.assert_array_equal(ds.labels, [0, 1, 0])

    def test_unparseable_numeric_cites_row(self, tmp_path):
        schema_path = self.write_schema(tmp_path)
        csv_path = tmp_path / "d.csv"
        csv_path.write_text("age,stage,outcome\n1.5,A,0\nabc,B,1\n")
        with pytest.raises(DataError, match="row 2"):
            load_csv(csv_path, schema_path)

    def test_empty_and_token_cells_become_unknown(self, tmp_path):
        schema_path = self.write_schema(tmp_path)
        csv_path = tmp_path / "d.csv"
        csv_path.write_text("age,stage,outcome\n,A,0\nUNKNOWN,,1\n")
        ds = load_csv(csv_path, schema_path)
        assert ds.rows[0][0] is UNKNOWN
        assert ds.rows[1][0] is UNKNOWN and ds.rows[1][1] is UNKNOWN

    def test_missing_column(self, tmp_path):
        schema_path = self.write_schema(tmp_path)
        csv_path = tmp_path / "d.csv"
        csv_path.write_text("age,outcome\n1.5,0\n")
        with pytest.raises(DataError, match="stage"):
            load_csv(csv_path, schema_path)

    def test_bad_label(self, tmp_path):
        schema_path = self.write_schema(tmp_path)
        csv_path = tmp_path / "d.csv"
        csv_path.write_text("age,stage,outcome\n1.5,A,2\n")
        with pytest.raises(DataError, match="row 1"):
            load_csv(csv_path, schema_path)

    def test_save_then_load(self, tmp_path):
        ds = Dataset(
            mixed_schema(),
            [[1.25, "A"], [UNKNOWN, "B"], [7.5, UNKNOWN]],
            np.array([0, 1, 1]),
        )
        schema_path = self.write_schema(tmp_path)
        csv_path = tmp_path / "d.csv"
        save_csv(ds, csv_path, label_name="outcome")
        back = load_csv(csv_path, schema_path)
        assert back.rows[0] == [1.25, "A"]
        assert back.rows[1][0] is UNKNOWN and back.rows[1][1] == "B"
        assert back.rows[2][0] == 7.5 and back.rows[2][1] is UNKNOWN
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_schema_file_round_trip(self, tmp_path):
        path = self.write_schema(tmp_path)
        schema, label = load_schema(path)
        assert label == "outcome"
        assert schema == mixed_schema()

    def test_schema_rejects_unknown_kind(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text('{"label": "y", "features": [{"name": "a", "kind": "date"}]}')
        with pytest.raises(DataError):
            load_schema(path)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbiz import data as dt
from deepbiz.errors import ContractError, DataError, SchemaError, VocabularyError

SCHEMA = "when: timestamp\nx: numeric\ncolour: categorical\ny: target classification\n"


def write(tmp_path, csv_text, schema_text=SCHEMA):
    (tmp_path / "d.csv").write_text(csv_text)
    (tmp_path / "d.schema").write_text(schema_text)
    return tmp_path / "d.csv", tmp_path / "d.schema"


class TestSchema:
    def test_parse(self):
        s = dt.Schema.parse(SCHEMA + "# comment\nnote: ignore\n")
        assert s.task == "classification"
        assert s.columns("numeric") == ["x"] and s.columns("ignore") == ["note"]
        assert dt.Schema.parse(s.to_text()) == s

    @pytest.mark.parametrize("text", ["x: numeric\n", "x: numeric\ny: target\nz: target\n",
                                      "x: weird\ny: target\n", "x numeric\n", "y: target ranking\n"])
    def test_rejects(self, text):
        with pytest.raises(SchemaError):
            dt.Schema.parse(text)


class TestLoadCSV:
    def test_two_rows(self, tmp_path):
        ds = dt.load_csv(*write(tmp_path, "when,x,colour,y\n2020-01-01,1.5,red,1\n2020-01-02,2.5,blue,0\n"))
        assert ds.vocabularies == [["blue", "red"]]
        assert ds.vocab_sizes == [3]
        assert ds.categorical[:, 0].tolist() == [1, 0]
        assert ds.numeric[:, 0].tolist() == [1.5, 2.5]
        assert ds.target.tolist() == [1, 0] and ds.task == "classification"

    def test_missing_schema_column_named(self, tmp_path):
        with pytest.raises(SchemaError, match="colour"):
            dt.load_csv(*write(tmp_path, "when,x,y\nt,1,0\n"))

    def test_missing_target(self, tmp_path):
        with pytest.raises(SchemaError, match="target column 'y'"):
            dt.load_csv(*write(tmp_path, "when,x,colour\nt,1,a\n"))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError, match="row 3"):
            dt.load_csv(*write(tmp_path, "when,x,colour,y\nt,1,a,0\nt,1,a\n"))

    def test_unparseable_cell_reports_row_and_column(self, tmp_path):
        with pytest.raises(DataError, match=r"row 2, column 'x'"):
            dt.load_csv(*write(tmp_path, "when,x,colour,y\nt,abc,a,0\n"))

    def test_missing_numeric_is_nan(self, tmp_path):
        ds = dt.load_csv(*write(tmp_path, "when,x,colour,y\nt,,a,0\nt,NA,a,1\n"))
        assert np.isnan(ds.numeric).all()

    def test_quoted_fields(self, tmp_path):
        ds = dt.load_csv(*write(tmp_path, 'when,x,colour,y\nt,1,"dark, red",0\nt,2,a,1\n'))
        assert ds.vocabularies[0] == ["a", "dark, red"]

    def test_unseen_value_maps_to_unknown_code(self, tmp_path):
        path, schema = write(tmp_path, "when,x,colour,y\nt,1,green,0\nt,2,red,1\n")
        ds = dt.load_csv(path, schema, vocabularies=[["red"]])
        assert ds.categorical[:, 0].tolist() == [1, 0]
        assert ds.decoded(0) == ["<unknown>", "red"]

    def test_round_trip_exact(self, tmp_path):
        ds = dt.synth_insurance(300, seed=3)
        dt.write_csv(ds, tmp_path / "a.csv", tmp_path / "a.schema")
        back = dt.load_csv(tmp_path / "a.csv", tmp_path / "a.schema")
        assert np.array_equal(back.numeric, ds.numeric, equal_nan=True)
        assert back.decoded(2) == ds.decoded(2)
        assert np.array_equal(back.target, ds.target)
        dt.write_csv(back, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestOneHot:
    def test_examples(self):
        assert dt.one_hot(1, 3).tolist() == [0, 1, 0]
        assert dt.one_hot(0, 1).tolist() == [1]
        assert sum(dt.one_hot(c, 4) for c in range(4)).tolist() == [1, 1, 1, 1]

    @pytest.mark.parametrize("code", [-1, 3])
    def test_out_of_range(self, code):
        with pytest.raises(VocabularyError):
            dt.one_hot(code, 3)

    @given(st.integers(1, 20).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, k - 1))))
    def test_argmax_inverts(self, kc):
        k, c = kc
        v = dt.one_hot(c, k)
        assert np.array_equal(dt.one_hot(int(v.argmax()), k), v)


class TestLags:
    def test_sliding_window_enumeration(self):
        ds = dt.build_lags([1, 2, 3, 4, 5], 2)
        assert ds.numeric.tolist() == [[2, 1], [3, 2], [4, 3]]
        assert ds.target.tolist() == [3, 4, 5]

    def test_horizon_width(self):
        ds = dt.build_lags(np.arange(200.0), 48, horizon=24)
        assert ds.target.shape == (200 - 48 - 24 + 1, 24)

    def test_one_row_boundary(self):
        assert len(dt.build_lags(np.arange(10.0), 9)) == 1

    def test_too_short(self):
        with pytest.raises(DataError):
            dt.build_lags(np.arange(5.0), 5)

    @given(st.integers(14, 60), st.integers(1, 8), st.integers(1, 5))
    def test_row_count_and_no_future_leak(self, n, lags, horizon):
        y = np.arange(float(n))
        ds = dt.build_lags(y, lags, horizon)
        assert len(ds) == n - lags - horizon + 1
        target = ds.target.reshape(len(ds), -1)
        assert np.all(ds.numeric.max(axis=1) < target.min(axis=1))
        assert np.all(np.diff(ds.anchors) == 1)

    def test_windows_match_lags(self):
        y = np.arange(30.0)
        seq = dt.build_windows(y, y, window=4, horizon=2, anchors=[4, 10])
        assert seq.sequences[:, :, 0].tolist() == [[0, 1, 2, 3], [6, 7, 8, 9]]
        assert seq.target.tolist() == [[4, 5], [10, 11]]


class TestSplit:
    def test_chronological_order(self):
        ts = np.array([f"2020-01-{d:02d}" for d in range(1, 31)])
        rng = np.random.default_rng(0)
        perm = rng.permutation(30)
        ds = dt.TabularDataset(np.zeros((30, 0)), np.zeros((30, 0)), [], np.arange(30.0), timestamps=ts[perm])
        s = dt.split(ds, dt.SplitSpec("chronological", 0.1, 0.1))
        t = ds.timestamps.astype("datetime64[D]")
        assert t[s.train].max() < t[s.val].min() and t[s.val].max() < t[s.test].min()

    def test_ten_folds(self):
        folds = dt.kfold(100, 10, seed=1)
        assert all(len(f) == 10 for f in folds)
        allidx = np.concatenate(folds)
        assert sorted(allidx.tolist()) == list(range(100))

    def test_stratified_folds(self):
        labels = np.r_[np.zeros(90), np.ones(10)].astype(int)
        for f in dt.kfold(100, 10, seed=2, labels=labels):
            assert labels[f].sum() == 1

    def test_random_split_deterministic(self):
        a = dt.split(50, dt.SplitSpec("random", 0.2, 0.2, seed=5))
        b = dt.split(50, dt.SplitSpec("random", 0.2, 0.2, seed=5))
        assert all(np.array_equal(x, y) for x, y in zip((a.train, a.val, a.test), (b.train, b.val, b.test)))

    @given(st.integers(40, 200), st.floats(0.05, 0.4), st.floats(0.05, 0.4), st.integers(0, 100))
    @settings(max_examples=50)
    def test_partition(self, n, fv, ft, seed):
        s = dt.split(n, dt.SplitSpec("random", fv, ft, seed=seed))
        joined = np.concatenate([s.train, s.val, s.test])
        assert sorted(joined.tolist()) == list(range(n))

    def test_infeasible(self):
        with pytest.raises(DataError):
            dt.split(5, dt.SplitSpec("random", 0.1, 0.1))
        with pytest.raises(DataError):
            dt.kfold(5, 10)
        with pytest.raises(ContractError):
            dt.SplitSpec("random", 0.6, 0.5)


class TestStandardize:
    def test_constant_column_to_zero(self):
        stats = dt.Standardizer.fit(np.full((5, 1), 3.0))
        assert np.array_equal(stats.transform(np.full((5, 1), 3.0)), np.zeros((5, 1)))

    def test_idempotent_on_standardized(self):
        x = np.random.default_rng(0).normal(size=(50, 3))
        x = (x - x.mean(0)) / x.std(0)
        np.testing.assert_allclose(dt.Standardizer.fit(x).transform(x), x, atol=1e-12)

    def test_held_out_rows_never_influence_training_transform(self):
        rng = np.random.default_rng(1)
        train, test = rng.normal(size=(40, 2)), rng.normal(size=(10, 2))
        before = dt.Standardizer.fit(train).transform(train)
        test[:] = 1e9  # poisoning rows outside the fit
        stats = dt.Standardizer.fit(train)
        assert np.array_equal(stats.transform(train), before)
        assert np.all(np.abs(stats.transform(test)) > 1e6)

    def test_median_imputation_and_indicator(self):
        x = np.array([[1.0], [np.nan], [3.0], [10.0]])
        stats = dt.Standardizer.fit(x)
        assert stats.median[0] == 3.0
        out = stats.transform(np.array([[np.nan], [1.0]]))
        assert out.shape == (2, 2) and out[:, 1].tolist() == [1.0, 0.0]

    def test_standardize_leaves_categoricals(self):
        ds = dt.synth_insurance(200, 0)
        out = dt.standardize(dt.Standardizer.fit(ds.numeric), ds)
        assert np.array_equal(out.categorical, ds.categorical)
        assert not np.isnan(out.numeric).any()


class TestGenerators:
    def test_insurance_rate(self):
        ds = dt.synth_insurance(100000, seed=11)
        assert 0.031 <= ds.target.mean() <= 0.041

    def test_insurance_shape(self):
        ds = dt.synth_insurance(500, 0)
        assert ds.numeric.shape == (500, 10) and ds.categorical.shape == (500, 6)
        assert ds.vocab_sizes == [k + 1 for k in dt.INSURANCE_VOCAB]
        assert ds.task == "classification"

    def test_tickets_peak_hour_fixed_but_noise_differs(self):
        peaks, series = set(), []
        for seed in range(4):
            ds = dt.synth_tickets(24 * 7 * 20, seed)
            hour = ds.categorical[:, 0]
            profile = np.array([ds.target[hour == h].mean() for h in range(24)])
            peaks.add(int(profile.argmax()))
            series.append(ds.target)
        assert peaks == {10}
        assert not np.array_equal(series[0], series[1])

    def test_sales_closed_on_sundays_for_most_stores(self):
        ds = dt.synth_sales(28, stores=10, seed=0)
        dow = np.array(ds.decoded(ds.categorical_names.index("day_of_week")))
        assert (ds.target[dow == "6"] == 0).mean() > 0.5
        assert (ds.target[dow == "0"] > 0).all()

    @pytest.mark.parametrize("make", [lambda s: dt.synth_insurance(300, s), lambda s: dt.synth_tickets(500, s),
                                      lambda s: dt.synth_sales(20, 10, s)])
    def test_seeded(self, make):
        a, b = make(4), make(4)
        assert np.array_equal(a.numeric, b.numeric, equal_nan=True)
        assert np.array_equal(a.target, b.target)
        assert not np.array_equal(make(5).target, a.target)

    def test_too_small(self):
        with pytest.raises(ContractError):
            dt.synth_tickets(50)

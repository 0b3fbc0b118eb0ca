import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from arft import data as D
from arft.errors import ContractError, ParseError, SchemaError, UndefinedMetricError


def _ds(x, y=None, names=None, pid="p"):
    x = np.asarray(x, dtype=float)
    return D.Dataset(pid, names or [f"m{j}" for j in range(x.shape[1])], x, y)


def test_metric_catalogue_has_52_unique_names():
    assert len(D.METRIC_NAMES) == 52
    assert len(set(D.METRIC_NAMES)) == 52
    assert [len(v) for v in D.METRIC_FAMILIES.values()] == [26, 11, 9, 6]


def test_dataset_validation():
    with pytest.raises(SchemaError, match="duplicate"):
        _ds(np.ones((2, 2)), names=["a", "a"])
    with pytest.raises(SchemaError, match="non-finite"):
        _ds([[1.0, np.nan]])
    with pytest.raises(SchemaError, match="0 .*or 1"):
        _ds(np.ones((2, 1)), [0, 2])
    ds = _ds(np.ones((2, 1)), [0, 1])
    with pytest.raises(ValueError):
        ds.features[0, 0] = 5.0


def test_csv_round_trip_is_lossless(tmp_path):
    rng = np.random.default_rng(0)
    ds = _ds(rng.normal(size=(30, 4)) * 10.0 ** rng.integers(-8, 8, size=(30, 4)),
             rng.integers(0, 2, 30), pid="proj")
    path = tmp_path / "proj.csv"
    D.write_csv(ds, path)
    back = D.load_csv(path, label_column="label")
    assert back.project_id == "proj"
    assert back.metric_names == ds.metric_names
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_load_csv_reports_row_and_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,label\n1,2,0\n3,oops,1\n")
    with pytest.raises(ParseError, match=r"row 3, column 'b'"):
        D.load_csv(path, label_column="label")
    path.write_text("a,a,label\n1,2,0\n")
    with pytest.raises(SchemaError, match="duplicate"):
        D.load_csv(path, label_column="label")
    path.write_text("a,b,label\n1,2,7\n")
    with pytest.raises(ParseError, match="not 0/1"):
        D.load_csv(path, label_column="label")


def test_load_csv_metric_columns_reorders_and_checks(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("b,a,extra\n1,2,9\n3,4,9\n")
    ds = D.load_csv(path, metric_columns=["a", "b"])
    np.testing.assert_array_equal(ds.features, [[2, 1], [4, 3]])
    with pytest.raises(SchemaError, match="missing"):
        D.load_csv(path, metric_columns=["a", "zz"])


def test_global_normalize_uses_pooled_population_stats():
    rng = np.random.default_rng(1)
    s, t = _ds(rng.normal(2, 3, (50, 3)), rng.integers(0, 2, 50)), _ds(rng.normal(-1, 1, (20, 3)))
    sn, tn, stats_ = D.global_normalize(s, t)
    pooled = np.vstack([sn.features, tn.features])
    np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(pooled.std(axis=0), 1.0, rtol=1e-7)
    np.testing.assert_array_equal(sn.labels, s.labels)
    assert tn.labels is None


def test_global_normalize_constant_column_is_finite():
    s, t = _ds(np.ones((4, 2))), _ds(np.ones((3, 2)))
    sn, tn, _ = D.global_normalize(s, t)
    assert np.all(sn.features == 0.0) and np.all(tn.features == 0.0)


def test_global_normalize_schema_mismatch():
    with pytest.raises(SchemaError):
        D.global_normalize(_ds(np.ones((2, 2)), names=["a", "b"]), _ds(np.ones((2, 2)), names=["b", "a"]))


def test_oversample_rejects_single_class():
    with pytest.raises(ContractError):
        D.random_oversample(_ds(np.ones((3, 1)), [1, 1, 1]), np.random.default_rng(0))


def test_oversample_is_seed_deterministic():
    rng = np.random.default_rng(2)
    ds = _ds(rng.normal(size=(40, 2)), (rng.random(40) < 0.2).astype(int))
    a = D.random_oversample(ds, np.random.default_rng(5))
    b = D.random_oversample(ds, np.random.default_rng(5))
    np.testing.assert_array_equal(a.features, b.features)


def test_concat_projects():
    a = _ds(np.zeros((2, 2)), [0, 1], pid="L")
    b = _ds(np.ones((3, 2)), [1, 0, 0], pid="H")
    both = D.concat_projects([a, b])
    assert both.project_id == "L+H" and both.n == 5
    with pytest.raises(ContractError):
        D.concat_projects([a, b.without_labels()])


def test_spearman_matches_scipy_and_pvalue():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(5, 60))
        x = np.round(rng.normal(size=n), 1)
        y = np.round(x + rng.normal(size=n), 1)
        rho, p = D.spearman_rho(x, y)
        ref = stats.spearmanr(x, y)
        assert rho == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-300)


def test_spearman_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        D.spearman_rho([1, 2], [2, 1])
    with pytest.raises(UndefinedMetricError):
        D.spearman_rho([1, 1, 1], [1, 2, 3])


def test_spearman_perfect_monotone():
    x = np.arange(10.0)
    assert D.spearman_rho(x, x ** 3) == (1.0, 0.0)
    assert D.spearman_rho(x, -x)[0] == -1.0


def test_correlation_report_counts_and_undefined():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(30, 5))
    x[:, 1] = x[:, 0] + 0.01 * rng.normal(size=30)
    x[:, 4] = 7.0
    rep = D.correlation_report(_ds(x))
    assert rep.total_pairs == 10
    assert len(rep.undefined_pairs) == 4
    assert rep.correlated_pairs >= 1
    assert rep.summary_line().startswith("p=5, pairs=10, significant=")
    assert rep.to_csv().count("\n") == 11


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=30))
def test_midranks_sum_and_ties(values):
    from arft import _kernels

    r = _kernels.midranks(np.array(values))
    n = len(values)
    assert math.isclose(r.sum(), n * (n + 1) / 2, rel_tol=1e-12)
    np.testing.assert_allclose(r, stats.rankdata(values), rtol=0, atol=1e-12)


def test_synth_generate_shapes_rates_and_determinism():
    cfg = D.SynthConfig(n_source=500, n_target=200, p=6, positive_rate=0.1, seed=3)
    s1, t1 = D.synth_generate(cfg)
    s2, t2 = D.synth_generate(cfg)
    np.testing.assert_array_equal(s1.features, s2.features)
    np.testing.assert_array_equal(t1.labels, t2.labels)
    assert s1.features.shape == (500, 6) and t1.features.shape == (200, 6)
    assert 0.03 < s1.labels.mean() < 0.2


def test_synth_shift_moves_the_target():
    base = D.SynthConfig(n_source=2000, n_target=2000, p=5, shift_strength=0.0, seed=1)
    s, t = D.synth_generate(base)
    assert np.max(np.abs(s.features.mean(0) - t.features.mean(0))) < 0.2
    s, t = D.synth_generate(D.SynthConfig(n_source=2000, n_target=2000, p=5, shift_strength=1.0, seed=1))
    assert np.max(np.abs(s.features.mean(0) - t.features.mean(0))) > 0.3

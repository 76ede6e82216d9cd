import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetlb.analysis import (ComparisonReport, Difference, ExperimentSpec, PolicyRow, SSCRow,
                            batch_means, compare_policies, ecdf_distance, pmap, read_csv,
                            ssc_sweep, write_csv)
from hetlb.errors import EmptySeries, InsufficientBatches
from hetlb.model import proportioned_config


def test_batch_means_constant_and_alternating():
    m, s = batch_means(np.full(1000, 3.25))
    assert m == 3.25 and s == 0.0
    m, s = batch_means(np.tile([1.0, -1.0], 500), n_batches=10)
    assert m == pytest.approx(0.0, abs=1e-15) and s == pytest.approx(0.0, abs=1e-15)


def test_batch_means_time_weighting():
    # value 1 for 1 time unit, then 0 for 3: the mean is 0.25 whatever the batching
    m, _ = batch_means([1.0, 0.0], [1.0, 3.0], n_batches=4)
    assert m == pytest.approx(0.25, rel=1e-15)


def test_batch_means_errors():
    with pytest.raises(EmptySeries):
        batch_means([])
    with pytest.raises(InsufficientBatches):
        batch_means([1.0, 2.0], n_batches=1)
    with pytest.raises(ValueError):
        batch_means([1.0, 2.0], [1.0, -1.0])


def test_batch_means_interval_coverage():
    """AR(1) series: nominal 95% intervals from batch means cover the truth."""
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(100):
        e = rng.standard_normal(20_000)
        x = np.empty_like(e)
        x[0] = e[0]
        for k in range(1, len(e)):
            x[k] = 0.5 * x[k - 1] + e[k]
        m, s = batch_means(x, n_batches=20)
        hits += abs(m) <= 2.093 * s  # t quantile, 19 degrees of freedom
    assert hits >= 90


def test_ecdf_distance():
    a = np.arange(10.0)
    assert ecdf_distance(a, a) == 0.0
    assert ecdf_distance(a, a + 100) == 1.0
    rng = np.random.default_rng(3)
    assert ecdf_distance(rng.normal(size=10_000), rng.normal(size=10_000)) < 0.03
    with pytest.raises(EmptySeries):
        ecdf_distance([], a)


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
def test_csv_round_trip_is_exact(vals):
    rows = [PolicyRow(100, "pod:2", v, abs(v), -v, 0.5, 7, 20) for v in vals]
    back = read_csv(write_csv(rows), PolicyRow)
    assert back == rows


def test_csv_tuples_and_buffers(tmp_path):
    buf = io.StringIO()
    text = write_csv([(1, 0.1, "x")], buf, ["a", "b", "c"])
    assert buf.getvalue() == text == "a,b,c\n1,0.1,x\n"
    p = tmp_path / "o.csv"
    write_csv([SSCRow(10, 2, 0.5, 0.1, 0.6, 0.1)], p)
    assert read_csv(str(p), SSCRow)[0].event_sup == 0.6


def test_pmap_preserves_order():
    assert pmap(lambda v: v * v, range(30), threads=4) == [v * v for v in range(30)]


def test_experiment_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec(reps=0)
    with pytest.raises(ValueError):
        ExperimentSpec(policies=("nope",))
    with pytest.raises(ValueError):
        ExperimentSpec(n_values=(0,))
    cfgs = ExperimentSpec(n_values=(50, 100)).configs()
    assert [c.n for c in cfgs] == [50, 100]


def _small_spec(threads=1):
    return ExperimentSpec(policies=("sa-jsq", "jsq"), n_values=(50,), reps=2, seed=4,
                          threads=threads, warmup=10.0, duration=100.0, n_batches=10)


def test_compare_policies_deterministic_and_thread_independent():
    a = compare_policies(_small_spec(1))
    b = compare_policies(_small_spec(3))
    assert a.rows == b.rows and a.differences == b.differences
    assert {r.policy for r in a.rows} == {"modified", "sa-jsq", "jsq"}
    assert all(r.batches == 20 for r in a.rows)
    d = a.difference(50, "modified", "sa-jsq", "y_plus1")
    row_m, row_s = a.row(50, "modified"), a.row(50, "sa-jsq")
    assert d.diff == pytest.approx(row_m.y_plus1 - row_s.y_plus1, rel=1e-12)
    assert d.combined_se == pytest.approx(math.hypot(row_m.se_plus1, row_s.se_plus1))
    with pytest.raises(KeyError):
        a.row(51, "jsq")


def test_same_policy_twice_gives_identical_rows():
    spec = ExperimentSpec(policies=("sa-jsq", "sa-jsq"), n_values=(30,), reps=1, seed=1,
                          warmup=5.0, duration=50.0, n_batches=10, include_modified=False)
    rep = compare_policies(spec)
    r1, r2 = [r for r in rep.rows if r.policy == "sa-jsq"]
    assert r1 == r2


def test_ssc_sweep_rows():
    rows = ssc_sweep((50, 100), reps=3, horizon=3.0, seed=2, threads=2)
    assert [r.n for r in rows] == [50, 100]
    for r in rows:
        assert r.event_sup >= r.sample_sup >= 0
        assert r.reps == 3
    assert rows == ssc_sweep((50, 100), reps=3, horizon=3.0, seed=2, threads=1)

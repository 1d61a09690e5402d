import numpy as np
import pandas as pd
import pytest

from conftest import base_config
from skillreturns.dgp import sim_residuals, simulate_wide
from skillreturns.moments import (GroupDef, MomentError, MomentTable, cohort_group_windows, design_rows,
                                  experience_group_windows, iter_person_contributions, long_autocov_set,
                                  person_contributions, population_moment_table, quartile_prediction,
                                  sample_autocov)
from skillreturns.panel import ResidualPanel


def toy_residuals():
    R = np.array([[1.0, 2.0, np.nan],
                  [0.0, 1.0, 3.0],
                  [2.0, np.nan, 1.0],
                  [1.0, 0.0, 2.0]])
    return ResidualPanel.from_wide([1, 2, 3, 4], [1, 2, 3], R, cohort=[0, 0, 0, 0])


def test_pairwise_complete_covariance_unbiased():
    res = toy_residuals()
    v, n = sample_autocov(res, GroupDef("all"), 2, 1)
    x, y = np.array([2.0, 1.0, 0.0]), np.array([1.0, 0.0, 1.0])
    assert n == 3
    assert v == pytest.approx(np.sum((x - x.mean()) * (y - y.mean())) / 2)


def test_long_autocov_min_count_and_gap():
    res = toy_residuals()
    m = long_autocov_set(res, [GroupDef("all")], min_gap=1, min_count=3)
    assert set(m.keys()) == {("all", 2, 1), ("all", 3, 1)}
    assert ("all", 3, 2) in [tuple(s[:3]) for s in m.skipped]
    m0 = long_autocov_set(res, [GroupDef("all")], min_gap=0, min_count=1)
    assert m0.has("all", 1, 1)
    with pytest.raises(MomentError):
        long_autocov_set(res, [GroupDef("all")], min_gap=-1)


def test_table_io_and_lookup(tmp_path):
    m = MomentTable([("a", 1, 3, 0.5, 10), ("a", 2, 2, 1.0, 12)])
    assert m.get("a", 3, 1) == 0.5 and m.get("a", 1, 3) == 0.5
    with pytest.raises(MomentError):
        m.get("a", 4, 1)
    path = tmp_path / "m.csv"
    m.to_csv(path)
    m2 = MomentTable.from_csv(path)
    assert np.array_equal(m2.vector(), m.vector())
    with pytest.raises(MomentError, match="duplicate"):
        MomentTable([("a", 1, 3, 0.5, 10), ("a", 3, 1, 0.4, 10)])


def test_windows():
    g = cohort_group_windows({"G": (1950, 1959)}, exper=(21, 40), min_gap=6)[0]
    assert g.t_range == (1980, 1990) and g.t2_range == (1974, 1984)
    assert g.allows(1985, 1979) and not g.allows(1985, 1980)
    e = experience_group_windows([(11, 20)], min_gap=6)[0]
    assert e.allows(20, 10) and not e.allows(20, 9)
    rows = design_rows([e], range(1, 25))
    assert all(6 <= t - t2 <= 10 for _, t, t2 in rows)


def test_population_table_matches_sample():
    cfg = base_config(cohorts=(0, -5), n_per_cohort=30_000)
    groups = [GroupDef("0", cohorts=(0, 0)), GroupDef("-5", cohorts=(-5, -5))]
    res = sim_residuals(simulate_wide(cfg, 9))
    m = long_autocov_set(res, groups, min_gap=2, years=range(5, 15))
    p = population_moment_table(cfg, groups, rows=m.keys())
    assert p.provenance == "population"
    assert np.max(np.abs(m.vector() - p.vector())) < 0.05


def test_person_contributions_average_to_moments():
    cfg = base_config(n_per_cohort=500)
    res = sim_residuals(simulate_wide(cfg, 1))
    m = long_autocov_set(res, [GroupDef("0", cohorts=(0, 0))], min_gap=2, years=range(3, 12))
    P, Dm = person_contributions(res, m)
    assert P.shape == Dm.shape == (500, len(m))
    assert np.allclose(P.sum(axis=0) / (Dm.sum(axis=0) - 1), m.vector(), atol=1e-12)
    blocks = list(iter_person_contributions(res, m, chunk=77))
    assert len(blocks) == 7
    assert np.allclose(np.vstack([b[0] for b in blocks]), P)


def test_quartile_prediction_shape():
    cfg = base_config(n_per_cohort=400)
    res = sim_residuals(simulate_wide(cfg, 2))
    q = quartile_prediction(res, 8, [0, 2, 4])
    assert len(q) == 12
    at0 = q[q.horizon == 0].sort_values("quartile")["mean"].to_numpy()
    assert np.all(np.diff(at0) > 0)
    # persistence: the spread between extreme quartiles shrinks but survives
    spread = q[q.quartile == 4].set_index("horizon")["mean"] - q[q.quartile == 1].set_index("horizon")["mean"]
    assert spread[0] > spread[4] > 0

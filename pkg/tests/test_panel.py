import numpy as np
import pandas as pd
import pytest

from skillreturns.panel import (MissingColumnError, Panel, PanelError, ResidualizeSpec, ResidualPanel,
                                apply_trim_bounds, load_panel, load_residuals, ols_drop_collinear,
                                residualize, trim_bounds, trim_wages, write_panel)

CSV = """person_id,year,cohort,educ,race,exper,logw,occ,firm,tscore
1,2000,1990,hs,0,10,2.5,a,3,
1,2001,1990,hs,0,11,2.6,a,3,
2,2000,1995,col,1,5,3.1,,,0.4
"""


def small_panel(n=400, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        c = int(rng.integers(1980, 1990))
        for t in (2000, 2001, 2002):
            rows.append(dict(person_id=i, year=t, cohort=c, educ="hs" if i % 2 else "col",
                             race=str(i % 3 == 0), exper=t - c, logw=float(rng.normal(2 + 0.01 * (t - c)))))
    return Panel(pd.DataFrame(rows))


def test_load_roundtrip(tmp_path):
    p = load_panel(CSV)
    assert len(p) == 3
    assert p.frame["firm"].isna().sum() == 1
    path = tmp_path / "p.csv"
    write_panel(p, path)
    q = load_panel(path)
    assert p.equals(q)


def test_aliases_and_schema():
    txt = "id,t,c,education,race,log_wage\n7,2000,1990,hs,0,1.0\n"
    p = load_panel(txt)
    assert p.frame["exper"].iat[0] == 10
    p2 = load_panel("who,year,cohort,educ,race,w\n7,2000,1990,hs,0,1.0\n",
                    schema={"person_id": "who", "logw": "w"})
    assert p2.frame["person_id"].iat[0] == 7


@pytest.mark.parametrize("bad, msg", [
    ("1,2000,1990,hs,0,9,2.5,,,\n", "experience inconsistent"),
    ("1,2000,1990,hs,0,10,abc,,,\n", "line 2"),
    ("1,2000,2000,hs,0,0,2.5,,,\n", "experience < 1"),
])
def test_validation_errors(bad, msg):
    head = CSV.splitlines()[0] + "\n"
    with pytest.raises(PanelError, match=msg):
        load_panel(head + bad)


def test_duplicate_person_year():
    head = CSV.splitlines()[0] + "\n"
    with pytest.raises(PanelError, match="duplicate"):
        load_panel(head + "1,2000,1990,hs,0,10,2.5,,,\n1,2000,1990,hs,0,10,2.7,,,\n")


def test_require_names_column():
    p = load_panel(CSV)
    p.require("tscore")
    q = p.subset(p.frame["person_id"] == 1)
    with pytest.raises(MissingColumnError) as e:
        q.require("tscore", "score test")
    assert e.value.column == "tscore"


def test_trim_zero_is_identity_and_idempotent():
    p = small_panel()
    assert trim_wages(p, 0, 0).equals(p)
    t1 = trim_wages(p, 0.05, 0.05, cells=("year",))
    assert len(t1) < len(p)
    # quantile cutoffs of ties retained
    lo = p.frame.groupby("year")["logw"].quantile(0.05)
    assert (t1.frame.groupby("year")["logw"].min() >= lo - 1e-12).all()
    b = trim_bounds(p, 0.05, 0.05, cells=("year",))
    assert apply_trim_bounds(t1, b, cells=("year",)).equals(t1)


def test_ols_drop_collinear_input_order():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 2))
    X = np.column_stack([np.ones(50), x, x[:, 0] + 2 * x[:, 1]])
    y = X[:, :3] @ [1.0, 2.0, -1.0] + rng.normal(scale=0.1, size=50)
    coef, keep, dropped, resid = ols_drop_collinear(X, y)
    assert list(dropped) == [3]
    ref = np.linalg.lstsq(X[:, :3], y, rcond=None)[0]
    assert np.allclose(coef, ref, atol=1e-12)
    assert abs(X[:, :3].T @ resid).max() < 1e-10


def test_residualize_orthogonal():
    p = small_panel()
    spec = ResidualizeSpec(cells=("year",), regressors=("1", "exper", "C(educ)"))
    r = residualize(p, spec)
    df = r.frame
    for _, sub in df.groupby("year"):
        assert abs(sub["resid"].sum()) < 1e-9
        assert abs((sub["resid"] * sub["exper"]).sum()) < 1e-8
    assert set(r.cells) == {(2000,), (2001,), (2002,)}


def test_residualize_small_cells():
    p = small_panel(n=4)
    spec = ResidualizeSpec(cells=("year",), regressors=("1", "exper"), min_cell_size=10)
    with pytest.warns(UserWarning, match="skipped"):
        r = residualize(p, spec)
    assert len(r) == 0
    with pytest.raises(PanelError):
        residualize(p, ResidualizeSpec(cells=("year",), regressors=("1",), min_cell_size=10, on_small="error"))


def test_residual_panel_wide_and_io(tmp_path):
    p = small_panel(n=30)
    r = ResidualPanel.raw(p)
    w = r.wide()
    assert w["resid"].shape == (30, 3)
    path = tmp_path / "r.csv"
    r.to_csv(path)
    r2 = load_residuals(path)
    assert np.allclose(r2.wide()["resid"], w["resid"])
    d = r.duplicated()
    assert d.wide()["resid"].shape == (60, 3)
    s = r.select(np.arange(30) < 10)
    assert len(s) == 30

import json

import numpy as np
import pytest

from conftest import base_config
from skillreturns.dgp import (ConfigError, DgpConfig, Engine, FirmLayer, Hip, Ma, RandomWalk,
                              export_panel, population_autocov, schedule, sim_residuals, simulate,
                              simulate_wide, vectorized, wage_identity_gap)
from skillreturns.dgp import TestLayer as ScoreLayer


def test_schedule_forms():
    assert schedule(0.5)(np.arange(3), 0).tolist() == [0.5] * 3
    f = schedule({"linear": [[2, 1.0], [4, 0.0]]})
    assert np.allclose(f(np.array([1, 2, 3, 4, 9]), 0), [1, 1, 0.5, 0, 0])
    g = schedule({"by_year": {3: 2.0}, "default": 1.0})
    assert g(np.array([2, 3]), 0).tolist() == [1.0, 2.0]
    h = schedule({"by_cohort": {-5: 3.0}, "default": 1.0})
    assert h(4, -5) == 3.0 and h(4, 0) == 1.0

    @vectorized
    def lin(t, c):
        return 1.0 + 0.1 * t
    assert np.allclose(schedule(lin)(np.arange(3), 0), [1.0, 1.1, 1.2])


@pytest.mark.parametrize("kw, field", [
    (dict(years=(5, 1)), "years"),
    (dict(k=0), "k"),
    (dict(mu=-1.0), "mu"),
    (dict(skill=RandomWalk(var_psi=-1.0)), "skill.var_psi"),
    (dict(skill=Hip(var_psi=1.0, var_delta=0.01, cov_psi_delta=0.5)), "skill.cov_psi_delta"),
    (dict(shock=Ma(q=1, beta=[1.0], var_xi=0.1)), "shock.beta"),
    (dict(firm=FirmLayer(stay_prob=1.5)), "firm.stay_prob"),
])
def test_config_errors_name_field(kw, field):
    with pytest.raises(ConfigError) as e:
        base_config(**kw).validate()
    assert field in str(e.value)


def test_from_dict_roundtrip(tmp_path):
    d = {"years": [1, 10], "cohorts": {"from": -3, "to": 0}, "n_per_cohort": 50,
         "skill": {"kind": "fe_ar1", "var_psi": 1.0, "rho": 0.9, "var_nu": 0.1},
         "shock": {"kind": "ma", "q": 1, "beta": [1.0, 0.3], "var_xi": 0.2}}
    cfg = DgpConfig.from_dict(d)
    assert list(cfg.cohort_list) == [-3, -2, -1, 0]
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    cfg2 = DgpConfig.from_json(path)
    assert json.loads(cfg2.to_json()) == json.loads(cfg.to_json())
    with pytest.raises(ConfigError, match="bogus"):
        DgpConfig.from_dict({**d, "bogus": 1})
    with pytest.raises(ConfigError, match="skill.kind"):
        DgpConfig.from_dict({**d, "skill": {"kind": "nope"}})


def test_same_seed_same_panel():
    cfg = base_config(cohorts=(0, -3), n_per_cohort=300)
    a, _ = simulate(cfg, 4)
    b, _ = simulate(cfg, 4)
    c, _ = simulate(cfg, 5)
    assert a.equals(b)
    assert not a.equals(c)


def test_wage_identity(tmp_path):
    cfg = base_config(firm=FirmLayer(var_kappa=0.05, stay_prob=0.8))
    pan, lat = simulate(cfg, 1)
    assert lat.check_identity(pan) < 1e-12
    export_panel(pan, tmp_path / "p.csv")
    lat.to_csv(tmp_path / "l.csv")
    assert wage_identity_gap(tmp_path / "p.csv", tmp_path / "l.csv") < 1e-10


def test_simulated_moments_match_population():
    cfg = base_config(n_per_cohort=40_000)
    res = sim_residuals(simulate_wide(cfg, 3))
    w = res.wide()
    R, ys = w["resid"], list(w["years"])
    for t, t2 in ((10, 4), (15, 15), (18, 9)):
        x, y = R[:, ys.index(t)], R[:, ys.index(t2)]
        ok = ~np.isnan(x) & ~np.isnan(y)
        emp = np.mean((x[ok] - x[ok].mean()) * (y[ok] - y[ok].mean()))
        pop = population_autocov(cfg, 0, t, t2)
        assert abs(emp - pop) < 5 * np.sqrt(2 * pop ** 2 / ok.sum()) + 0.01 * abs(pop)


def test_engine_mu_normalised():
    cfg = base_config(t_star=5)
    eng = Engine(cfg)
    assert eng.mu[eng.gi(5)] == pytest.approx(1.0)


def test_score_layer_and_latent():
    cfg = base_config(test=ScoreLayer(tau=1.0, var_eta=0.5, years=(4, 8)))
    pan, lat = simulate(cfg, 2)
    f = pan.frame
    assert f.loc[f.year.isin([4, 8]), "tscore"].notna().all()
    assert f.loc[~f.year.isin([4, 8]), "tscore"].isna().all()
    assert {"psi", "theta", "eps"} <= set(lat.frame.columns)

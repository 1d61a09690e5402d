import warnings

import numpy as np
import pytest

from conftest import base_config
from skillreturns import estimators as E
from skillreturns.dgp import Engine, FeAr1, Ma, RandomWalk, sim_residuals, simulate, simulate_wide
from skillreturns.dgp import TestLayer as ScoreLayer
from skillreturns.moments import GroupDef, long_autocov_set, population_moment_table


@pytest.fixture(scope="module")
def rw_res():
    cfg = base_config(cohorts=(0, -3, -6), n_per_cohort=4000)
    return cfg, sim_residuals(simulate_wide(cfg, 21))


def growth_truth(cfg, t, gap=2):
    eng = Engine(cfg)
    return eng.mu[eng.gi(t)] / eng.mu[eng.gi(t - gap)] - 1


def test_tsls_close_to_truth(rw_res):
    cfg, res = rw_res
    for t in (10, 14, 18):
        p = E.tsls_growth(res, [t], [-5, -6], k=2)
        assert abs(p.params[0] - growth_truth(cfg, t)) < 4 * p.se[0] + 1e-3
        assert p.first_stage_F > 100 and p.dof == 1 and p.J >= 0


def test_tsls_equals_gmm_when_just_identified(rw_res):
    _, res = rw_res
    a = E.tsls_growth(res, [12, 13], [-5])
    b = E.gmm_growth(res, [([12, 13], [-5], "g")])
    assert a.params[0] == pytest.approx(b["g"], rel=1e-12)
    assert a.se[0] == pytest.approx(b.se[0], rel=1e-10)
    assert b.J == pytest.approx(0.0, abs=1e-12)


def test_duplicated_sample_scales_se(rw_res):
    _, res = rw_res
    a = E.tsls_growth(res, [12], [-5, -6])
    b = E.tsls_growth(res.duplicated(), [12], [-5, -6])
    assert b.params[0] == pytest.approx(a.params[0], rel=1e-12)
    assert a.se[0] / b.se[0] == pytest.approx(np.sqrt(2), rel=1e-10)


def test_exogeneity_horizon_enforced(rw_res):
    _, res = rw_res
    with pytest.raises(E.EstimationError, match="horizon"):
        E.tsls_growth(res, [12], [-3], k=2)
    with pytest.raises(E.EstimationError, match="horizon"):
        E.tsls_growth(res, [12], [1], k=2)


def test_weak_instrument_flagged():
    cfg = base_config(n_per_cohort=300, skill=RandomWalk(var_psi=0.0, var_nu=0.001),
                      shock=Ma(q=0, beta=[1.0], var_xi=1.0))
    res = sim_residuals(simulate_wide(cfg, 3))
    with pytest.warns(RuntimeWarning, match="weak"):
        p = E.tsls_growth(res, [12], [-5])
    assert "weak-instrument" in p.flags


def test_gmm_shared_parameter_and_J(rw_res):
    cfg, res = rw_res
    eqs = [E.GrowthEquation([t], [-5, -6], "g%d" % t) for t in (10, 11, 12)]
    p = E.gmm_growth(res, eqs)
    assert p.dof == 3 and 0 <= p.J_pvalue <= 1
    for t in (10, 11, 12):
        assert abs(p["g%d" % t] - growth_truth(cfg, t)) < 4 * p.se[p.names.index("g%d" % t)] + 1e-3
    bal = E.gmm_growth(res, eqs, balanced=True)
    assert bal.extra["persons"] <= p.extra["persons"]


def test_rho_from_varrho():
    assert E.rho_from_varrho(0.21) == pytest.approx(1.1)
    assert np.allclose(E.rho_from_varrho([0.0, -0.19]), [1.0, 0.9])
    with pytest.raises(ValueError):
        E.rho_from_varrho(-1.5)


def test_varrho_test_recovers_persistence():
    # pure AR(1) skills (no fixed effect): varrho = rho^2 - 1 over a two-year gap
    cfg = base_config(cohorts=(0, -4), n_per_cohort=20_000, skill=FeAr1(var_psi=0.0, rho=0.9, var_nu=0.1),
                      test=ScoreLayer(tau=1.0, var_eta=0.3, years=tuple(range(2, 21, 2))))
    pan, _ = simulate(cfg, 5)
    est = E.varrho_test(pan, lags=[2, 4])
    assert abs(est["varrho"] - (0.81 - 1)) < 3 * est.se[0]
    assert abs(est.extra["rho"] - 0.9) < 3 * est.extra["rho_se"]
    with pytest.raises(E.EstimationError):
        E.varrho_test(pan, lags=[2], mode="score+wage")


def test_md_population_fit_recovers_truth(fear1_config):
    m = population_moment_table(fear1_config, {"0": 0, "-5": -5, "-10": -10})
    spec = E.ModelSpec(kind="fear1", base=fear1_config, t_star=5, var_xi="const", ma_q=1)
    f = E.md_fit(m, spec, n_starts=1)
    assert f.objective / f.extra["scale"] < 1e-14
    assert f["rho[0]"] == pytest.approx(0.95, abs=1e-6)
    assert f.dof == len(m) - len(f.names)


def test_md_standard_errors_shape():
    cfg = base_config(cohorts=(0, -5), n_per_cohort=5000)
    res = sim_residuals(simulate_wide(cfg, 8))
    m = long_autocov_set(res, [GroupDef("0", cohorts=(0, 0)), GroupDef("-5", cohorts=(-5, -5))],
                         min_gap=0, years=range(2, 16))
    spec = E.ModelSpec(kind="baseline", base=cfg, t_star=5, var_xi="const", ma_q=1)
    f = E.md_fit(m, spec, n_starts=1)
    V = E.md_standard_errors(f, m, res)
    assert V.shape == (len(f.names), len(f.names))
    assert np.all(np.diag(V) > 0)
    g = E.with_cov(f, V)
    assert np.allclose(g.se ** 2, np.diag(V))


def test_md_omega_model_exact():
    cfg = base_config(cohorts=(0, -5))
    m = population_moment_table(cfg, {"0": 0, "-5": -5}, min_gap=2)
    spec = E.ModelSpec(kind="omega", t_star=5, k=2)
    f = E.md_fit(m, spec, n_starts=1)
    eng = Engine(cfg)
    assert f["mu[12]"] == pytest.approx(eng.mu[eng.gi(12)] / eng.mu[eng.gi(5)], rel=1e-8)


def test_occ_gmm_runs_on_two_occupations(occ_config):
    cfg = occ_config.replace(n_per_cohort=20_000)
    res = sim_residuals(simulate_wide(cfg, 4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        o = E.occ_gmm(res, lags=(4,), n_knots=4, t_star=6, o_star="rout", min_cell=20)
    eng = Engine(cfg)
    mu = o.extra["mu"]
    true = eng.mu[eng.gi(10)] * eng.mu_occ[1, eng.gi(10)] / eng.mu[eng.gi(6)]
    assert mu[("cog", 10)] == pytest.approx(true, rel=0.1)

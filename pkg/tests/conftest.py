import numpy as np
import pytest

from skillreturns.dgp import (Ar1PlusMa, DgpConfig, FeAr1, Hip, Ma, MultiSkill, OccupationLayer,
                              RandomWalk)

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def base_config(**kw) -> DgpConfig:
    """Small random-walk design used across the unit tests."""
    cfg = DgpConfig(years=(1, 20), cohorts=(0,), n_per_cohort=1000,
                    mu={"linear": [[5, 1.0], [15, 0.5]]},
                    skill=RandomWalk(var_psi=1.0, var_nu=0.1),
                    shock=Ma(q=1, beta=[1.0, 0.5], var_xi=0.2), k=2)
    return cfg.replace(**kw) if kw else cfg


@pytest.fixture
def rw_config():
    return base_config()


@pytest.fixture
def fear1_config():
    return base_config(cohorts=(0, -5, -10), skill=FeAr1(var_psi=1.0, rho=0.95, var_nu=0.2))


@pytest.fixture
def arma_config():
    return base_config(cohorts=(0, -5, -10),
                       shock=Ar1PlusMa(rho=0.8, var_nu=0.3, beta=[1.0, 0.4],
                                       ma=Ma(q=1, beta=[1.0, 0.5], var_xi=0.2)))


@pytest.fixture
def hip_config():
    return base_config(skill=Hip(var_psi=1.0, var_delta=0.04, cov_psi_delta=-0.05,
                                 lam={"linear": [[1, 1.0], [20, 0.5]]}, var_nu=0.1))


@pytest.fixture
def occ_config():
    return DgpConfig(years=(1, 12), cohorts=(0, -3), k=2, mu={"linear": [[1, 1.0], [12, 0.7]]},
                     skill=RandomWalk(var_psi=1.0, var_nu=0.05), shock=Ma(q=0, beta=[1.0], var_xi=0.3),
                     occupation=OccupationLayer(
                         occupations=("rout", "cog"),
                         gamma={"rout": 0.0, "cog": {"linear": [[1, 0.2], [12, 0.4]]}},
                         mu_occ={"rout": 1.0, "cog": {"linear": [[1, 1.1], [12, 1.5]]}},
                         transition=[[0.9, 0.1], [0.2, 0.8]], initial=[0.6, 0.4]))


@pytest.fixture
def multi_config():
    return DgpConfig(years=(1, 15), cohorts=(0, -4), k=1, mu=1.0, shock=Ma(q=0, beta=[1.0], var_xi=0.2),
                     skill=MultiSkill(J=2, sigma0=[[1.0, 0.3], [0.3, 0.5]], innov=[[0.05, 0.0], [0.0, 0.02]],
                                      mu_skill=[{"linear": [[1, 1.0], [15, 1.5]]},
                                                {"linear": [[1, 1.0], [15, 0.8]]}]))


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))

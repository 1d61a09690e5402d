"""Specification tests, variance decompositions and the job-stayer correction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .dgp import DgpConfig, Engine
from .estimators import (EstimationError, GrowthEquation, ParamEstimate, balanced_mask,
                         gmm_growth)
from .identify import IdentifiedPath
from .moments import MomentTable
from .panel import Panel, ResidualPanel, design_matrix

# 5% critical values used for the lead/lag comparison
CRITICAL_5PCT = {1: 3.841, 2: 5.991}


def _crit(dof: int) -> float:
    return CRITICAL_5PCT.get(dof, float(stats.chi2.ppf(0.95, dof)))


# ---------------------------------------------------------------------------
# lead / lag instruments

def skill_shock_ratio(est_lag: float, est_lead: float) -> float:
    """var(d2 theta_t) / var(theta_{t-2}) from lag- and lead-instrumented growth."""
    den = 1.0 + est_lag
    if abs(den) < 1e-12:
        raise ZeroDivisionError("degenerate denominator: 1 + est_lag = 0")
    return (est_lead - est_lag) / den


def population_growth_iv(m: MomentTable, group, t: int, z: int, gap: int = 2) -> float:
    """cov(w_t - w_{t-gap}, w_z) / cov(w_{t-gap}, w_z) from a moment table."""
    g = str(group)
    num = m.get(g, t, z) - m.get(g, t - gap, z)
    den = m.get(g, t - gap, z)
    if den == 0:
        raise ZeroDivisionError("instrument uncorrelated with w_{t-gap}")
    return num / den


def lead_lag_j_compare(res: ResidualPanel, windows: Sequence, k: int = 6, lags: Sequence | None = None,
                       leads: Sequence | None = None, sample=None, gap: int = 2,
                       min_persons: int = 50) -> pd.DataFrame:
    """Test lead instruments against lag-only GMM, window by window.

    For each window (a year or list of years) on the sample balanced over
    all required years: two-step GMM with lags only, leads only and both.
    The lead moments are tested with the difference J_both - J_lags, where
    the lags-only J reuses the lag block of the joint first-step moment
    covariance (so the difference is non-negative), against chi2 with
    dof = #lead instruments.  Separately estimated J_lags is also reported.
    """
    lags = [-(k + gap), -(k + gap + 1)] if lags is None else list(lags)
    leads = [k, k + 1] if leads is None else list(leads)
    out = []
    for win in windows:
        win = [int(win)] if np.isscalar(win) else [int(x) for x in win]
        both = GrowthEquation(win, lags + leads, "growth", gap)
        keep = balanced_mask(res, [both])
        if sample is not None:
            keep &= np.asarray(sample, bool)
        if keep.sum() < min_persons:
            raise EstimationError(f"insufficient balanced sample for window {win}: {int(keep.sum())}")
        sub = res.select(keep)
        eb = gmm_growth(sub, [both], return_parts=True)
        el = gmm_growth(sub, [GrowthEquation(win, lags, "growth", gap)])
        ed = gmm_growth(sub, [GrowthEquation(win, leads, "growth", gap)])
        S = eb.extra["S"]
        nl = len(lags)
        W_l = np.linalg.inv(S[:nl, :nl])
        ec = gmm_growth(sub, [GrowthEquation(win, lags, "growth", gap)], weight=W_l)
        diff = max(eb.J - ec.J, 0.0)
        dof = len(leads)
        out.append({
            "window": "-".join(str(x) for x in (win[0], win[-1])) if len(win) > 1 else str(win[0]),
            "persons": int(keep.sum()),
            "est_lags": el.params[0], "se_lags": el.se[0],
            "est_leads": ed.params[0], "se_leads": ed.se[0],
            "est_both": eb.params[0], "se_both": eb.se[0],
            "J_both": eb.J, "J_lags": el.J, "J_lags_common": ec.J,
            "diff_J": diff, "dof_leads": dof,
            "p_value_leads": float(stats.chi2.sf(diff, dof)),
            "reject_leads": bool(diff > _crit(dof)),
            "reject_lags": bool(el.J > _crit(max(el.dof, 1))) if el.dof > 0 else False,
            "skill_shock_ratio": skill_shock_ratio(el.params[0], ed.params[0]),
        })
    return pd.DataFrame(out)


# ---------------------------------------------------------------------------
# heterogeneous growth: scaled-residual covariances

def _zero_test(vals: np.ndarray, infl: np.ndarray) -> dict:
    M = len(vals)
    if M == 0:
        return {"n_cov": 0, "mean": np.nan, "se": np.nan, "t": np.nan, "p_value": np.nan,
                "share_positive": np.nan}
    mean = float(vals.mean())
    se = float(np.sqrt((infl ** 2).sum()))
    t = mean / se if se > 0 else np.nan
    return {"n_cov": M, "mean": mean, "se": se, "t": t,
            "p_value": float(2 * stats.norm.sf(abs(t))) if np.isfinite(t) else np.nan,
            "share_positive": float((vals > 0).mean()),
            "q10": float(np.quantile(vals, .1)), "median": float(np.median(vals)),
            "q90": float(np.quantile(vals, .9))}


def hip_scaled_growth_covs(res: ResidualPanel, mu, k: int, exper: tuple | None = None,
                           step: int = 1, min_count: int = 20) -> dict:
    """Covariances of growth in mu-scaled residuals by entry cohort.

    growth table: cov(D(w_t/mu_t), D(w_s/mu_s) | c) for t - s >= k + 1;
    level table: cov(D(w_t/mu_t), w_s/mu_s | c) for t - s >= k + 1 (both
    vanish without growth heterogeneity).  D is the `step`-year difference.
    `exper` restricts to experience (in t) within the given range.  Each
    table gets a zero-mean test: the mean of its entries divided by a
    standard error built from person-level influence functions.
    """
    w = res.wide()
    if w.get("cohort") is None:
        raise EstimationError("cohort labels required")
    mu = dict(mu.items()) if hasattr(mu, "items") else dict(mu)
    col = {int(y): i for i, y in enumerate(w["years"])}
    ys = [y for y in col if y in mu and y - step in mu and y - step in col]
    R = w["resid"]
    Xs = {y: R[:, col[y]] / mu[y] for y in col if y in mu}
    coh = w["cohort"]
    rows, infl_g, infl_l = [], [], []
    for c in np.unique(coh):
        rc = np.flatnonzero(coh == c)
        for t in ys:
            if exper is not None and not (exper[0] <= t - c <= exper[1]):
                continue
            dt = Xs[t][rc] - Xs[t - step][rc]
            for s in ys:
                if t - s < k + 1:
                    continue
                for kind, zs in (("growth", Xs[s][rc] - Xs[s - step][rc]), ("level", Xs[s][rc])):
                    ok = ~np.isnan(dt) & ~np.isnan(zs)
                    n = int(ok.sum())
                    if n < min_count:
                        continue
                    a = dt[ok] - dt[ok].mean()
                    b = zs[ok] - zs[ok].mean()
                    prod = a * b
                    cov = float(prod.sum() / (n - 1))
                    rows.append((kind, int(c), t, s, t - int(c), cov, n))
                    (infl_g if kind == "growth" else infl_l).append((rc[ok], (prod - cov) / n))
    table = pd.DataFrame(rows, columns=["kind", "cohort", "t", "s", "exper", "cov", "n"])
    summary = {}
    N = R.shape[0]
    for kind, parts in (("growth", infl_g), ("level", infl_l)):
        vals = table.loc[table.kind == kind, "cov"].to_numpy()
        acc = np.zeros(N)
        M = max(len(vals), 1)
        for idx, v in parts:
            np.add.at(acc, idx, v / M)
        summary[kind] = _zero_test(vals, acc)
    return {"table": table, "summary": summary}


# ---------------------------------------------------------------------------
# decompositions

@dataclass
class DecompositionReport:
    """Per (group, year): total = skill + nonskill; skill = initial + accumulated."""
    by_year: pd.DataFrame
    jmp: pd.DataFrame = field(default_factory=pd.DataFrame)

    def max_gap(self) -> float:
        d = self.by_year
        g1 = (d["total"] - d["skill"] - d["nonskill"]).abs().max()
        ok = d["init_skill"].notna()
        g2 = (d.loc[ok, "var_theta"] - d.loc[ok, "init_skill"] - d.loc[ok, "accum_skill"]).abs().max() \
            if ok.any() else 0.0
        return float(max(g1, g2 if np.isfinite(g2) else 0.0))

    def to_csv(self, path) -> None:
        self.by_year.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def _decomp_config(cfg: DgpConfig, ell: int = 1) -> DecompositionReport:
    eng = Engine(cfg)
    rows = []
    for c in cfg.cohort_list:
        c = int(c)
        C = eng.cohort_cov(c)
        Lt = eng.theta_loading(c)[0]
        E = eng.eps_loading(c)
        K = eng.kappa_cov(c)
        for t in cfg.obs_years:
            if not cfg.observed(c, int(t)):
                continue
            g = int(eng.gi(int(t)))
            vt = float(Lt[g] @ Lt[g])
            vinit = float(Lt[g, :eng.n_psi] @ Lt[g, :eng.n_psi])
            mu2 = float(eng.mu[g] ** 2)
            rows.append({"group": str(c), "year": int(t), "total": float(C[g, g]),
                         "skill": mu2 * vt, "nonskill": float(E[g] @ E[g] + K[g, g]),
                         "var_theta": vt, "init_skill": vinit, "accum_skill": vt - vinit})
    df = pd.DataFrame(rows)
    jm = []
    for c in cfg.cohort_list:
        for t in cfg.obs_years:
            try:
                r = jmp_cohort_experience(cfg, int(t), ell, int(c))
            except (KeyError, ValueError):
                continue
            jm.append({"cohort": int(c), "year": int(t), "ell": ell, **r})
    return DecompositionReport(df, pd.DataFrame(jm))


def variance_decomposition(source, ell: int = 1) -> DecompositionReport:
    """Split var(w_t) into mu_t^2 var(theta_t) and var(eps_t), and var(theta_t)
    into initial skill (var psi) and accumulated growth.

    `source`: IdentifiedPath (needs var_theta, var_eps; var_psi optional),
    a DgpConfig (population), or an MD ParamEstimate carrying its ModelSpec.
    """
    if isinstance(source, DgpConfig):
        return _decomp_config(source, ell)
    if isinstance(source, ParamEstimate):
        spec, m = source.extra.get("spec"), source.extra.get("table")
        if spec is None or m is None or spec.kind == "omega":
            raise ValueError("missing blocks: estimate does not carry a structural model")
        return _decomp_config(spec.config(source.params, m), ell)
    if not isinstance(source, IdentifiedPath):
        raise TypeError("expected IdentifiedPath, DgpConfig or ParamEstimate")
    p = source
    if not p.var_theta or not p.var_eps:
        raise ValueError("missing blocks: var_theta and var_eps are required")
    rows = []
    for (g, t), vt in sorted(p.var_theta.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        if (g, t) not in p.var_eps or t not in p.mu:
            continue
        ve = p.var_eps[(g, t)]
        vp = p.var_psi.get(g, p.var_psi.get(str(g))) if p.var_psi else None
        if isinstance(vp, dict):
            vp = vp.get(t)
        skill = p.mu[t] ** 2 * vt
        rows.append({"group": str(g), "year": int(t), "total": skill + ve, "skill": skill,
                     "nonskill": ve, "var_theta": vt,
                     "init_skill": np.nan if vp is None else float(vp),
                     "accum_skill": np.nan if vp is None else vt - float(vp)})
    return DecompositionReport(pd.DataFrame(rows))


def _var_lookup(source, c: int, t: int, eng=None) -> float:
    if isinstance(source, DgpConfig):
        if not source.observed(c, t):
            raise KeyError(f"cohort {c} not observed in {t}")
        C = eng.cohort_cov(c)
        g = int(eng.gi(t))
        return float(C[g, g])
    if isinstance(source, MomentTable):
        return source.get(str(c), t, t)
    if isinstance(source, ResidualPanel):
        w = source.wide()
        col = {int(y): i for i, y in enumerate(w["years"])}
        if t not in col:
            raise KeyError(f"year {t} not in panel")
        x = w["resid"][w["cohort"] == c, col[t]]
        x = x[~np.isnan(x)]
        if len(x) < 2:
            raise KeyError(f"missing cell: cohort {c}, year {t}")
        return float(x.var(ddof=1))
    raise TypeError("source must be a DgpConfig, MomentTable or ResidualPanel")


def jmp_cohort_experience(source, t: int, ell: int, c: int) -> dict:
    """Cohort vs experience variance changes.

    d_c = var(w_{t+l}|c) - var(w_t|c) (same cohort) and
    d_e = var(w_{t+l}|c+l) - var(w_t|c) (same experience); their difference
    is var(w_{t+l}|c+l) - var(w_{t+l}|c).  For a DgpConfig the skill part of
    the difference, mu_{t+l}^2 [var(theta_{t+l}|c+l) - var(theta_{t+l}|c)],
    is added.
    """
    eng = Engine(source) if isinstance(source, DgpConfig) else None
    v0 = _var_lookup(source, c, t, eng)
    v_c = _var_lookup(source, c, t + ell, eng)
    v_e = _var_lookup(source, c + ell, t + ell, eng)
    out = {"delta_c": v_c - v0, "delta_e": v_e - v0, "difference": v_e - v_c}
    if eng is not None:
        g = int(eng.gi(t + ell))
        th = lambda cc: float(eng.theta_loading(cc)[0][g] @ eng.theta_loading(cc)[0][g])  # noqa: E731
        out["skill_difference"] = float(eng.mu[g] ** 2) * (th(c + ell) - th(c))
    return out


# ---------------------------------------------------------------------------
# test-score variance constancy

def _ols_gram(X: np.ndarray, y: np.ndarray, tol: float = 1e-9):
    """OLS through the Gram matrix; collinear columns dropped in input order."""
    sc = np.sqrt((X ** 2).sum(axis=0))
    sc[sc == 0] = 1.0
    G = (X / sc).T @ (X / sc)
    keep = []
    for j in range(X.shape[1]):
        if keep:
            Gk = G[np.ix_(keep, keep)]
            g = G[keep, j]
            r = G[j, j] - g @ np.linalg.solve(Gk, g)
        else:
            r = G[j, j]
        if r > tol:
            keep.append(j)
    keep = np.array(keep, int)
    Xk = X[:, keep]
    coef = np.linalg.solve(Xk.T @ Xk, Xk.T @ y)
    e = y - Xk @ coef
    coef = coef + np.linalg.solve(Xk.T @ Xk, Xk.T @ e)
    return coef, keep, np.setdiff1d(np.arange(X.shape[1]), keep), y - Xk @ coef


def lemieux_constancy_test(panel: Panel, controls: Sequence[str] = ("C(race)", "C(educ)", "C(exper)"),
                           resid_terms: Sequence[str] | None = None) -> dict:
    """Wald test that year effects in squared test-score residuals are zero.

    Scores are residualised on year and control indicators; squared
    residuals are regressed on an intercept, the controls and year
    indicators; the year coefficients are tested jointly with a
    person-clustered covariance.  Collinear columns are dropped and listed.
    """
    panel.require("tscore", "test-score variance test")
    df = panel.frame
    df = df[df["tscore"].notna()].reset_index(drop=True)
    if df["year"].nunique() < 2:
        raise ValueError("test scores needed in at least two years")
    ctrl = [c for c in controls if c.strip("C()") in df.columns and df[c.strip("C()")].nunique() > 1]
    terms = ["1", "C(year)"] + ctrl if resid_terms is None else list(resid_terms)
    _, X0 = design_matrix(df, terms)
    _, _, _, u = _ols_gram(X0, df["tscore"].to_numpy(float))
    names, X = design_matrix(df, ["1"] + ctrl + ["C(year)"])
    y = u ** 2
    coef, keep, dropped, e = _ols_gram(X, y)
    Xk = X[:, keep]
    kn = [names[i] for i in keep]
    XtXi = np.linalg.inv(Xk.T @ Xk)
    pid = df["person_id"].to_numpy()
    _, inv = np.unique(pid, return_inverse=True)
    G = np.zeros((inv.max() + 1, Xk.shape[1]))
    np.add.at(G, inv, Xk * e[:, None])
    V = XtXi @ (G.T @ G) @ XtXi
    yi = [i for i, n in enumerate(kn) if n.startswith("year[")]
    if not yi:
        raise ValueError("no identifiable year coefficients")
    b = coef[yi]
    Vy = V[np.ix_(yi, yi)]
    try:
        W = float(b @ np.linalg.solve(Vy, b))
    except np.linalg.LinAlgError:
        W = float(b @ np.linalg.pinv(Vy) @ b)
    return {"wald": W, "dof": len(yi), "p_value": float(stats.chi2.sf(W, len(yi))),
            "year_coef": dict(zip([kn[i] for i in yi], b)), "dropped": [names[i] for i in dropped],
            "n": len(df)}


# ---------------------------------------------------------------------------
# job stayers and firm effects

def upsilon(var_kappa, cov_kappa_mutheta, var_mutheta):
    """Upsilon = (var kappa + cov) / (var(mu theta) + cov)."""
    num = np.asarray(var_kappa, float) + np.asarray(cov_kappa_mutheta, float)
    den = np.asarray(var_mutheta, float) + np.asarray(cov_kappa_mutheta, float)
    if np.any(den <= 0):
        raise ValueError("nonpositive denominator in Upsilon")
    out = num / den
    return float(out) if out.ndim == 0 else out


@dataclass
class UpsilonPath:
    """Within-period covariance windows and implied Upsilon (step function in years)."""
    windows: pd.DataFrame

    def __post_init__(self):
        d = self.windows.copy()
        d["upsilon"] = upsilon(d["var_kappa"], d["cov_kappa_mutheta"], d["var_mutheta"])
        self.windows = d.sort_values("window_start").reset_index(drop=True)

    @classmethod
    def reference(cls) -> "UpsilonPath":
        return cls(load_reference_upsilon())

    @classmethod
    def constant(cls, value: float, start: int = -10 ** 6, end: int = 10 ** 6) -> "UpsilonPath":
        # var_kappa + cov = value * (var_mutheta + cov) with cov = 0, var_mutheta = 1
        return cls(pd.DataFrame({"window_start": [start], "window_end": [end], "var_kappa": [value],
                                 "cov_kappa_mutheta": [0.0], "var_mutheta": [1.0]}))

    def at(self, year: int) -> float:
        """Upsilon for a year; later windows win on overlaps, ends extend flat."""
        d = self.windows
        hit = d[(d.window_start <= year) & (d.window_end >= year)]
        if len(hit):
            return float(hit["upsilon"].iloc[-1])
        if year < d.window_start.iloc[0]:
            return float(d["upsilon"].iloc[0])
        return float(d["upsilon"].iloc[-1])


def load_reference_upsilon() -> pd.DataFrame:
    """Bundled within-period covariance table with reported Upsilon."""
    with resources.files("skillreturns").joinpath("data/upsilon_reference.csv").open("r") as fh:
        return pd.read_csv(fh)


def stayer_bias_correction(iv_stayer: dict, upsilon_path: UpsilonPath, norm_until: int,
                           instrument_lag: int = 8, gap: int = 2, multiplier: float = 1.0) -> dict:
    """mu path from stayer IV estimates corrected for firm effects.

    iv_stayer[t] estimates (mu_t/mu_{t-gap} - 1) / (1 + (mu_s/mu_{t-gap}) U_s)
    with s = t - instrument_lag.  Inverting recursively,
    mu_t = mu_{t-gap} (1 + b_t (1 + (mu_s/mu_{t-gap}) m U_s)), with mu = 1 for
    years <= norm_until and m the stayer/all-worker sensitivity multiplier.
    """
    mu: dict = {}

    def get(y):
        if y in mu:
            return mu[y]
        if y <= norm_until:
            return 1.0
        raise KeyError(f"mu for year {y} is needed but not available")

    for t in sorted(iv_stayer):
        if t <= norm_until:
            continue
        base = get(t - gap)
        s = t - instrument_lag
        fac = 1.0 + get(s) / base * multiplier * upsilon_path.at(s)
        if fac <= 0:
            raise ValueError(f"nonpositive correction factor in {t}")
        mu[t] = base * (1.0 + iv_stayer[t] * fac)
    return mu


def stayer_iv(res: ResidualPanel, years: Sequence[int], instrument_lag: int = 8, gap: int = 2) -> dict:
    """Growth IV on persons with the same firm in t and t-gap (single lag instrument)."""
    w = res.wide()
    if w.get("firm") is None:
        raise EstimationError("firm identifiers required")
    col = {int(y): i for i, y in enumerate(w["years"])}
    F = w["firm"]
    out = {}
    for t in years:
        if t not in col or t - gap not in col:
            continue
        stay = (F[:, col[t]] == F[:, col[t - gap]]) & (F[:, col[t]] >= 0)
        R = w["resid"]
        y, x = R[:, col[t]] - R[:, col[t - gap]], R[:, col[t - gap]]
        z = R[:, col[t - instrument_lag]] if t - instrument_lag in col else None
        if z is None:
            continue
        ok = stay & ~np.isnan(y) & ~np.isnan(x) & ~np.isnan(z)
        if ok.sum() < 10:
            continue
        zc = z[ok] - z[ok].mean()
        out[int(t)] = float(zc @ (y[ok] - y[ok].mean()) / (zc @ (x[ok] - x[ok].mean())))
    return out

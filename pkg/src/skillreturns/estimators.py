"""Finite-sample estimators: growth 2SLS, multi-equation GMM, minimum distance.

Growth regressions use the moment E[(w_t - w_{t-g} - gamma * w_{t-g}) z] = 0
with z lagged (or led) residuals; gamma = mu_t / mu_{t-g} - 1.  Inference is
clustered by person throughout.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace as dc_replace
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .dgp import (Ar1PlusMa, DgpConfig, Engine, FeAr1, Hip, Ma, RandomWalk,
                  _cohorts_for, vectorized)
from .moments import GroupDef, MomentError, MomentTable, _group_mask, iter_person_contributions
from .panel import Panel, ResidualPanel


class EstimationError(RuntimeError):
    pass


@dataclass
class ParamEstimate:
    names: list
    params: np.ndarray
    cov: np.ndarray
    J: float = np.nan
    dof: int = 0
    first_stage_F: float | None = None
    n: int | np.ndarray | None = None
    objective: float = np.nan
    converged: bool = True
    iterations: int = 0
    grad_norm: float = np.nan
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.atleast_1d(np.asarray(self.params, float))
        k = len(self.params)
        cov = np.asarray(self.cov, float)
        if cov.shape != (k, k):
            raise ValueError(f"covariance must be {k}x{k}, got {cov.shape}")
        self.cov = cov
        if not np.isnan(self.J) and self.J < 0:
            self.J = 0.0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    @property
    def J_pvalue(self) -> float:
        if self.dof <= 0 or np.isnan(self.J):
            return np.nan
        return float(stats.chi2.sf(self.J, self.dof))

    def __getitem__(self, name) -> float:
        return float(self.params[list(self.names).index(name)])

    def ci(self, level: float = 0.95) -> np.ndarray:
        z = stats.norm.ppf(0.5 + level / 2)
        return np.column_stack([self.params - z * self.se, self.params + z * self.se])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"param": list(self.names), "estimate": self.params, "se": self.se})
        if self.first_stage_F is not None:
            df["first_stage_F"] = self.first_stage_F
        df["J"] = self.J
        df["dof"] = self.dof
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


# ---------------------------------------------------------------------------
# growth regressions

def _instr_value(M: np.ndarray, col: dict, t: int, slot) -> np.ndarray:
    """Instrument column for year t; a slot is an offset or a tuple of
    alternative offsets (first non-missing per person wins)."""
    alts = slot if isinstance(slot, (tuple, list)) else (slot,)
    out = np.full(M.shape[0], np.nan)
    for off in alts:
        y = t + int(off)
        if y not in col:
            continue
        v = M[:, col[y]]
        fill = np.isnan(out) & ~np.isnan(v)
        out[fill] = v[fill]
    return out


@dataclass
class _Eq:
    a: np.ndarray          # (N, L) person sums of z*y
    b: np.ndarray          # (N, L) person sums of z*x
    zz: np.ndarray         # (L, L) stacked sum of z z'
    rows: tuple            # (person idx, z rows, x, y) for first-stage F
    n_rows: int


def _stack_equation(w: dict, window, instruments, gap: int, mask=None, demean: bool = True,
                    y_source: np.ndarray | None = None, z_sources: dict | None = None,
                    require: np.ndarray | None = None) -> _Eq:
    R = w["resid"] if y_source is None else y_source
    col = {int(y): i for i, y in enumerate(w["years"])}
    N = R.shape[0]
    L = len(instruments)
    a = np.zeros((N, L))
    b = np.zeros((N, L))
    zz = np.zeros((L, L))
    P, Zr, Xr, Yr = [], [], [], []
    for t in window:
        t = int(t)
        if t not in col or t - gap not in col:
            continue
        y1, x = R[:, col[t]], R[:, col[t - gap]]
        Z = np.column_stack([
            _instr_value((z_sources or {}).get(s[0], R) if isinstance(s, tuple) and isinstance(s[0], str) else R,
                         col, t, s[1] if isinstance(s, tuple) and isinstance(s[0], str) else s)
            for s in instruments])
        ok = ~np.isnan(y1) & ~np.isnan(x) & ~np.isnan(Z).any(axis=1)
        if mask is not None:
            mk = mask(t) if callable(mask) else mask
            ok &= mk
        if require is not None:
            ok &= require
        if ok.sum() < 2:
            continue
        yy = (y1 - x)[ok]
        xx = x[ok]
        Zo = Z[ok]
        if demean:
            yy = yy - yy.mean()
            xx = xx - xx.mean()
            Zo = Zo - Zo.mean(axis=0)
        idx = np.flatnonzero(ok)
        a[idx] += Zo * yy[:, None]
        b[idx] += Zo * xx[:, None]
        zz += Zo.T @ Zo
        P.append(idx)
        Zr.append(Zo)
        Xr.append(xx)
        Yr.append(yy)
    if not P:
        raise EstimationError("insufficient n: no usable observations for the equation")
    rows = (np.concatenate(P), np.vstack(Zr), np.concatenate(Xr), np.concatenate(Yr))
    return _Eq(a, b, zz, rows, len(rows[0]))


def _cluster_meat(idx: np.ndarray, scores: np.ndarray, N: int) -> np.ndarray:
    g = np.zeros((N, scores.shape[1]))
    np.add.at(g, idx, scores)
    return g.T @ g


def first_stage_F(eq: _Eq, N: int) -> float:
    """Cluster-robust Wald F for the excluded instruments in the first stage."""
    idx, Z, x, _ = eq.rows
    ZZ = Z.T @ Z
    try:
        ZZi = np.linalg.inv(ZZ)
    except np.linalg.LinAlgError:
        return 0.0
    pi = ZZi @ (Z.T @ x)
    v = x - Z @ pi
    meat = _cluster_meat(idx, Z * v[:, None], N)
    V = ZZi @ meat @ ZZi
    L = Z.shape[1]
    try:
        return float(pi @ np.linalg.solve(V, pi) / L)
    except np.linalg.LinAlgError:
        return np.inf


def _linear_gmm(A: np.ndarray, B: np.ndarray, W: np.ndarray):
    """theta minimising gbar' W gbar with g_i = A_i - B_i theta.

    A: (N, L); B: (N, L, P).  Returns theta, gbar, per-person g.
    """
    N = A.shape[0]
    a = A.mean(axis=0)
    Bm = B.mean(axis=0)
    H = Bm.T @ W @ Bm
    theta = np.linalg.solve(H, Bm.T @ W @ a)
    g = A - np.einsum("nlp,p->nl", B, theta)
    return theta, g.mean(axis=0), g, Bm


def _robust_inverse(S: np.ndarray, ridge: float, flags: list):
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e12:
        S = S + ridge * np.trace(S) / len(S) * np.eye(len(S))
        flags.append("ridge")
    return np.linalg.inv(S)


def tsls_growth(res: ResidualPanel, window: Sequence[int], instruments: Sequence,
                gap: int = 2, sample=None, k: int | None = None, f_floor: float = 10.0,
                demean: bool = True) -> ParamEstimate:
    """2SLS of w_t - w_{t-gap} on w_{t-gap}, pooled over the years in `window`.

    `instruments` are offsets relative to t (negative = lags, positive =
    leads) or tuples of alternative offsets.  With k given, lags must
    satisfy |offset| >= k + gap and leads offset >= k.  The coefficient is
    mu_t / mu_{t-gap} - 1; SEs are clustered by person.
    """
    if k is not None:
        for s in instruments:
            for off in (s if isinstance(s, (tuple, list)) else (s,)):
                if (off < 0 and -off < k + gap) or (off >= 0 and off < k):
                    raise EstimationError(f"instrument offset {off} violates the exogeneity horizon k={k}")
    w = res.wide()
    mask = _sample_mask(w, sample)
    eq = _stack_equation(w, window, list(instruments), gap, mask, demean)
    N = eq.a.shape[0]
    active = (np.abs(eq.a).sum(1) + np.abs(eq.b).sum(1)) > 0
    n_p = int(active.sum())
    if eq.n_rows < len(instruments) + 2:
        raise EstimationError("insufficient n")
    W = np.linalg.inv(eq.zz / N)
    theta, gbar, g, Bm = _linear_gmm(eq.a, eq.b[:, :, None], W)
    S = g.T @ g / N
    Hinv = np.linalg.inv(Bm.T @ W @ Bm)
    V = Hinv @ (Bm.T @ W @ S @ W @ Bm) @ Hinv / N
    F = first_stage_F(eq, N)
    flags = []
    if F < f_floor:
        warnings.warn(f"weak first stage: F={F:.2f} < {f_floor}", RuntimeWarning)
        flags.append("weak-instrument")
    L = len(instruments)
    J = np.nan
    if L > 1:
        Si = _robust_inverse(S, 1e-8, flags)
        J = float(N * gbar @ Si @ gbar)
    return ParamEstimate(["growth"], theta, V, J=J, dof=L - 1, first_stage_F=F,
                         n=eq.n_rows, flags=flags, extra={"persons": n_p, "window": list(window)})


def _sample_mask(w: dict, sample):
    if sample is None:
        return None
    if isinstance(sample, GroupDef):
        return lambda t: _group_mask(w, sample, t)
    m = np.asarray(sample)
    if m.dtype != bool or len(m) != len(w["person_id"]):
        raise EstimationError("sample must be a GroupDef or a boolean person mask")
    return m


@dataclass
class GrowthEquation:
    window: Sequence[int]
    instruments: Sequence
    param: str | None = None
    gap: int = 2


def balanced_mask(res: ResidualPanel, equations: Sequence[GrowthEquation]) -> np.ndarray:
    """Persons observed in every year any equation needs (incl. all alternatives' first choice)."""
    w = res.wide()
    col = {int(y): i for i, y in enumerate(w["years"])}
    R = w["resid"]
    ok = np.ones(R.shape[0], bool)
    for e in equations:
        for t in e.window:
            need = [t, t - e.gap] + [t + (s[0] if isinstance(s, (tuple, list)) else s) for s in e.instruments]
            for y in need:
                if y not in col:
                    ok[:] = False
                    return ok
                ok &= ~np.isnan(R[:, col[y]])
    return ok


def _equations(eqs) -> list[GrowthEquation]:
    out = []
    for i, e in enumerate(eqs):
        if isinstance(e, GrowthEquation):
            out.append(e)
        else:
            win, ins = e[0], e[1]
            out.append(GrowthEquation(win, ins, e[2] if len(e) > 2 else None))
    return out


def gmm_growth(res: ResidualPanel, equations: Sequence, sample=None, balanced: bool = False,
               ridge: float = 1e-8, weight: np.ndarray | None = None, demean: bool = True,
               return_parts: bool = False) -> ParamEstimate:
    """Two-step GMM for one or several growth equations.

    Each equation is (window, instruments[, parameter name]) or a
    GrowthEquation; equations naming the same parameter share it.  Step one
    uses a diagonal weight (inverse instrument second moments), step two the
    inverse clustered moment covariance.  A supplied `weight` replaces the
    second-step weight (used for nested J comparisons).
    """
    eqs = _equations(equations)
    w = res.wide()
    mask = _sample_mask(w, sample)
    req = balanced_mask(res, eqs) if balanced else None
    if balanced and req.sum() < 10:
        raise EstimationError("insufficient balanced sample")
    names = []
    for i, e in enumerate(eqs):
        nm = e.param or f"growth_{i}"
        if nm not in names:
            names.append(nm)
    stacks = [_stack_equation(w, e.window, list(e.instruments), e.gap, mask, demean, require=req)
              for e in eqs]
    N = stacks[0].a.shape[0]
    Ls = [s.a.shape[1] for s in stacks]
    Lt, P = sum(Ls), len(names)
    A = np.hstack([s.a for s in stacks])
    B = np.zeros((N, Lt, P))
    zz_diag = np.concatenate([np.diag(s.zz) for s in stacks]) / N
    off = 0
    for e, s in zip(eqs, stacks):
        j = names.index(e.param or f"growth_{eqs.index(e)}")
        B[:, off:off + s.a.shape[1], j] = s.b
        off += s.a.shape[1]
    flags = []
    W1 = np.diag(1.0 / np.where(zz_diag > 0, zz_diag, 1.0))
    th1, gb1, g1, _ = _linear_gmm(A, B, W1)
    S1 = g1.T @ g1 / N
    W2 = _robust_inverse(S1, ridge, flags) if weight is None else weight
    th2, gb2, g2, Bm = _linear_gmm(A, B, W2)
    S2 = g2.T @ g2 / N
    Hinv = np.linalg.inv(Bm.T @ W2 @ Bm)
    V = Hinv @ (Bm.T @ W2 @ S2 @ W2 @ Bm) @ Hinv / N
    J = float(N * gb2 @ W2 @ gb2)
    est = ParamEstimate(names, th2, V, J=J, dof=Lt - P, n=np.array([s.n_rows for s in stacks]),
                        iterations=2, flags=flags,
                        extra={"persons": int(((np.abs(A).sum(1)) > 0).sum())})
    if return_parts:
        est.extra.update({"S": S1, "A": A, "B": B, "N": N, "L": Ls})
    return est


# ---------------------------------------------------------------------------
# test-score dynamics

def _pivot(panel: Panel, column: str):
    panel.require(column, "test-score moments")
    df = panel.frame[["person_id", "year", column]].dropna()
    wide = df.pivot(index="person_id", columns="year", values=column).sort_index(axis=1)
    return wide.index.to_numpy(), wide.columns.to_numpy().astype(int), wide.to_numpy(float)


def varrho_test(panel: Panel, lags: Sequence[int], mode: str = "score", years: Sequence[int] | None = None,
                wage: ResidualPanel | None = None, gap: int = 2) -> ParamEstimate:
    """GMM estimate of varrho in E[(T_{t+g} - T_t - varrho T_t) T_{t-l}] = 0.

    Scores are demeaned by year.  mode "score+wage" adds wage residuals at
    the same lags as instruments.  Adds the implied rho = sqrt(1 + varrho)
    (with delta-method SE) to ``extra``.
    """
    pids, ys, T = _pivot(panel, "tscore")
    T = T - np.nanmean(T, axis=0)
    if len(ys) < 2:
        raise EstimationError("insufficient score panel length")
    w = {"person_id": pids, "years": ys, "resid": T}
    z_sources = {}
    ins = [("T", -(gap + l)) for l in lags]
    if mode == "score+wage":
        if wage is None:
            raise EstimationError("wage residuals required for score+wage mode")
        ww = wage.wide()
        wy = {int(y): i for i, y in enumerate(ww["years"])}
        rows = {p: i for i, p in enumerate(ww["person_id"])}
        Wm = np.full(T.shape, np.nan)
        ri = np.array([rows.get(p, -1) for p in pids])
        for j, y in enumerate(ys):
            if int(y) in wy:
                have = ri >= 0
                Wm[have, j] = ww["resid"][ri[have], wy[int(y)]]
        z_sources["W"] = Wm
        ins += [("W", -(gap + l)) for l in lags]
    elif mode != "score":
        raise ValueError(f"unknown mode {mode!r}")
    z_sources["T"] = T
    window = [int(y) for y in ys if y - gap in set(ys)] if years is None else [int(y) + gap for y in years]
    eq = _stack_equation(w, window, ins, gap, None, True, z_sources=z_sources)
    N = eq.a.shape[0]
    flags = []
    W1 = np.diag(1.0 / np.diag(eq.zz / N))
    th1, _, g1, _ = _linear_gmm(eq.a, eq.b[:, :, None], W1)
    W2 = _robust_inverse(g1.T @ g1 / N, 1e-8, flags)
    th, gb, g, Bm = _linear_gmm(eq.a, eq.b[:, :, None], W2)
    S = g.T @ g / N
    Hinv = np.linalg.inv(Bm.T @ W2 @ Bm)
    V = Hinv @ (Bm.T @ W2 @ S @ W2 @ Bm) @ Hinv / N
    L = eq.a.shape[1]
    est = ParamEstimate(["varrho"], th, V, J=float(N * gb @ W2 @ gb), dof=L - 1, n=eq.n_rows, flags=flags)
    r = rho_from_varrho(float(th[0]))
    est.extra["rho"] = r
    est.extra["rho_se"] = float(est.se[0] / (2 * r)) if r > 0 else np.nan
    return est


def rho_from_varrho(varrho):
    """Implied skill persistence rho = sqrt(1 + varrho)."""
    v = np.asarray(varrho, float)
    if np.any(v < -1):
        raise ValueError("varrho < -1 has no real rho")
    out = np.sqrt(1.0 + v)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# minimum distance

def _poly(x, coef):
    out = np.zeros_like(np.asarray(x, float))
    for j, a in enumerate(coef):
        out = out + a * np.asarray(x, float) ** j
    return out


@dataclass
class ModelSpec:
    """Covariance model for minimum distance.

    kind: "omega" (long covariances mu_t * Omega_{C,t2}, analytic Jacobian),
    or a structural process "baseline" | "fear1" | "hip" | "arma" evaluated
    by the population engine.  Variances are optimised on the log scale.

    var_psi: "const" | "cohort_cubic"; var_nu: "const" | "by_year" |
    "time_exper" (log-additive cubic in time + quadratic in experience);
    var_xi: "none" | "const" | "by_year" with MA order ma_q; rho: "const" |
    "cubic" (skill rho for fear1, shock rho for arma); lam: "const" (=1) |
    "by_year" (hip).  mu: "free" (one per year, mu[t_star] = 1) or "fixed"
    (taken from `base`).
    """
    kind: str = "baseline"
    base: DgpConfig | None = None
    t_star: int | None = None
    k: int | None = None
    var_psi: str = "const"
    var_nu: str = "const"
    var_xi: str = "none"
    ma_q: int = 0
    rho: str = "const"
    lam: str = "const"
    mu: str = "free"

    # ------------------------------------------------------------------
    def layout(self, m: MomentTable) -> list[tuple[str, object]]:
        """Ordered (block, key) parameter names for the table."""
        ys = sorted(int(y) for y in m.years())
        t_star = self.t_star if self.t_star is not None else ys[0]
        out = []
        if self.kind == "omega":
            k = self.k or 0
            if self.mu == "free":
                ts = sorted({t for _, t, t2 in m.keys() if t - t2 >= k})
                out += [("mu", t) for t in ts if t != t_star]
            bases = sorted({(g, t2) for g, t, t2 in m.keys() if t - t2 >= k})
            out += [("omega", b) for b in bases]
            return out
        if self.mu == "free":
            out += [("mu", t) for t in ys if t != t_star]
        if self.base is None:
            raise EstimationError("structural ModelSpec needs a base DgpConfig")
        out += [("log_var_psi", j) for j in range(1 if self.var_psi == "const" else 4)]
        if self.var_nu == "const":
            out += [("log_var_nu", 0)]
        elif self.var_nu == "by_year":
            out += [("log_var_nu", t) for t in range(self.base.cohort_list.min() + 1, self.base.t_hi + 1)]
        elif self.var_nu == "time_exper":
            out += [("log_var_nu", j) for j in range(6)]   # 4 time + 2 exper (no 2nd intercept)
        if self.kind == "fear1":
            out += [("rho", j) for j in range(1 if self.rho == "const" else 4)]
        if self.kind == "hip":
            out += [("log_var_delta", 0), ("atanh_corr", 0)]
            if self.lam == "by_year":
                out += [("log_lam", t) for t in ys[1:]]
        if self.kind == "arma":
            out += [("atanh_rho_eps", j) for j in range(1 if self.rho == "const" else 4)]
            out += [("log_var_nu_eps", 0)]
        if self.var_xi != "none":
            out += [("log_var_xi", 0)] if self.var_xi == "const" else \
                [("log_var_xi", t) for t in range(self.base.cohort_list.min() + 1, self.base.t_hi + 1)]
            out += [("beta", j) for j in range(1, self.ma_q + 1)]
        return out

    def names(self, m: MomentTable) -> list[str]:
        return [f"{b}[{k}]" for b, k in self.layout(m)]

    def default_init(self, m: MomentTable) -> np.ndarray:
        lay = self.layout(m)
        scale = float(np.median(np.abs(m.vector()))) or 1.0
        v = []
        for b, key in lay:
            if b == "mu":
                v.append(1.0)
            elif b == "omega":
                g, t2 = key
                v.append(m.get(g, t2, t2) if m.has(g, t2, t2) else scale)
            elif b == "log_var_psi":
                v.append(np.log(scale) if key == 0 else 0.0)
            elif b in ("log_var_nu", "log_var_xi"):
                v.append(np.log(0.02 * scale) if key in (0,) or isinstance(key, (int, np.integer)) and key > 10 else 0.0)
            elif b == "rho":
                v.append(0.9 if key == 0 else 0.0)
            elif b == "atanh_rho_eps":
                v.append(np.arctanh(0.5) if key == 0 else 0.0)
            elif b == "log_var_nu_eps":
                v.append(np.log(0.05 * scale))
            elif b == "log_var_delta":
                v.append(np.log(0.01 * scale))
            else:
                v.append(0.0)
        return np.array(v, float)

    # ------------------------------------------------------------------
    def config(self, theta: np.ndarray, m: MomentTable) -> DgpConfig:
        """DgpConfig implied by a structural parameter vector."""
        lay = self.layout(m)
        P: dict = {}
        for (b, key), v in zip(lay, theta):
            P.setdefault(b, {})[key] = float(v)
        base = self.base
        cfg = base.replace()
        ys = sorted(int(y) for y in m.years())
        t_star = self.t_star if self.t_star is not None else ys[0]
        lo = int(base.cohort_list.min()) + 1
        if self.mu == "free":
            mu_arr = np.ones(base.t_hi - lo + 1)
            for t, v in P.get("mu", {}).items():
                mu_arr[t - lo] = v
            mu_arr[t_star - lo] = 1.0
            cfg.mu = vectorized(lambda t, c, a=mu_arr, lo=lo: a[np.clip(np.asarray(t, int) - lo, 0, len(a) - 1)])
        cl = base.cohort_list.astype(float)
        cm, cs = cl.mean(), (cl.std() or 1.0)
        tl = np.arange(lo, base.t_hi + 1)
        tm, ts = tl.mean(), (tl.std() or 1.0)
        lp = [P["log_var_psi"][j] for j in sorted(P["log_var_psi"])]
        var_psi = vectorized(lambda t, c, lp=lp: np.exp(_poly((np.asarray(c, float) - cm) / cs, lp)))
        nu = P.get("log_var_nu", {})
        if self.var_nu == "const":
            var_nu = math.exp(nu[0])
        elif self.var_nu == "by_year":
            arr = np.array([nu[t] for t in sorted(nu)])
            t0 = min(nu)
            var_nu = vectorized(lambda t, c, a=arr, t0=t0: np.exp(a[np.clip(np.asarray(t, int) - t0, 0, len(a) - 1)]))
        else:
            ct = [nu[j] for j in range(4)]
            ce = [0.0, nu[4], nu[5]]
            var_nu = vectorized(lambda t, c, ct=ct, ce=ce: np.exp(
                _poly((np.asarray(t, float) - tm) / ts, ct) + _poly((np.asarray(t, float) - np.asarray(c, float)) / 10.0, ce)))
        if self.kind in ("baseline", "arma"):
            cfg.skill = RandomWalk(var_psi=var_psi, var_nu=var_nu)
        elif self.kind == "fear1":
            rc = [P["rho"][j] for j in sorted(P["rho"])]
            rho = rc[0] if len(rc) == 1 else vectorized(lambda t, c, rc=rc: _poly((np.asarray(t, float) - tm) / ts, rc))
            cfg.skill = FeAr1(var_psi=var_psi, rho=rho, var_nu=var_nu)
        elif self.kind == "hip":
            vd = math.exp(P["log_var_delta"][0])
            r = math.tanh(P["atanh_corr"][0])
            cov = vectorized(lambda t, c, vd=vd, r=r: r * np.sqrt(var_psi(t, c) * vd))
            if self.lam == "by_year":
                lam_t = {ys[0]: 1.0}
                lam_t.update({t: math.exp(v) for t, v in P["log_lam"].items()})
                arr = np.array([lam_t.get(t, lam_t[ys[0]] if t < ys[0] else lam_t[max(k_ for k_ in lam_t if k_ <= t)])
                                for t in range(lo, base.t_hi + 1)])
                lam = vectorized(lambda t, c, a=arr: a[np.clip(np.asarray(t, int) - lo, 0, len(a) - 1)])
            else:
                lam = 1.0
            cfg.skill = Hip(var_psi=var_psi, var_delta=vd, cov_psi_delta=cov, lam=lam, var_nu=var_nu)
        else:
            raise EstimationError(f"unknown model kind {self.kind!r}")
        if self.var_xi != "none":
            xi = P["log_var_xi"]
            if self.var_xi == "const":
                var_xi = math.exp(xi[0])
            else:
                arr = np.array([xi[t] for t in sorted(xi)])
                t0 = min(xi)
                var_xi = vectorized(lambda t, c, a=arr, t0=t0: np.exp(a[np.clip(np.asarray(t, int) - t0, 0, len(a) - 1)]))
            beta = [1.0] + [P["beta"][j] for j in range(1, self.ma_q + 1)]
            ma = Ma(q=self.ma_q, beta=beta, var_xi=var_xi)
        else:
            ma = Ma(q=0, beta=[1.0], var_xi=0.0)
        if self.kind == "arma":
            rc = [P["atanh_rho_eps"][j] for j in sorted(P["atanh_rho_eps"])]
            rho_e = math.tanh(rc[0]) if len(rc) == 1 else vectorized(
                lambda t, c, rc=rc: np.tanh(_poly((np.asarray(t, float) - tm) / ts, rc)))
            cfg.shock = Ar1PlusMa(rho=rho_e, var_nu=math.exp(P["log_var_nu_eps"][0]), beta=[1.0], ma=ma)
        else:
            cfg.shock = ma
        return cfg

    def natural(self, theta: np.ndarray, m: MomentTable):
        """Natural-scale values and the Jacobian d natural / d theta (diagonal)."""
        nat, d = [], []
        for (b, _), v in zip(self.layout(m), theta):
            if b.startswith("log_"):
                nat.append(math.exp(v))
                d.append(math.exp(v))
            elif b.startswith("atanh_"):
                nat.append(math.tanh(v))
                d.append(1 - math.tanh(v) ** 2)
            else:
                nat.append(v)
                d.append(1.0)
        return np.array(nat), np.diag(d)


class _Evaluator:
    """Model covariances for a fixed set of table rows."""

    def __init__(self, spec: ModelSpec, m: MomentTable):
        self.spec, self.m = spec, m
        self.keys = m.keys()
        self.lay = spec.layout(m)
        if spec.kind == "omega":
            k = spec.k or 0
            bad = [r for r in self.keys if r[1] - r[2] < k]
            if bad:
                raise EstimationError(f"omega model needs t - t2 >= k; offending rows e.g. {bad[0]}")
            pos = {key: i for i, key in enumerate(self.lay)}
            self.i_mu = np.array([pos.get(("mu", t), -1) for _, t, _ in self.keys])
            self.i_om = np.array([pos[("omega", (g, t2))] for g, t, t2 in self.keys])
            return
        base = spec.base
        self.cohorts = [int(c) for c in base.cohort_list]
        ci = {c: j for j, c in enumerate(self.cohorts)}
        Wt = np.zeros((len(self.keys), len(self.cohorts)))
        for r, (g, t, t2) in enumerate(self.keys):
            sel = m.groups.get(g)
            if sel is None:
                try:
                    sel = int(g)
                except ValueError:
                    raise EstimationError(f"cannot map group {g!r} to cohorts") from None
            for c in _cohorts_for(base, sel, max(t, t2)):
                if base.observed(c, t) and base.observed(c, t2) and base.n_cohort(c) > 0:
                    Wt[r, ci[c]] = base.n_cohort(c)
        s = Wt.sum(axis=1, keepdims=True)
        if np.any(s == 0):
            raise EstimationError("some table rows have no cohort in the model base")
        self.Wt = Wt / s
        g0 = int(base.cohort_list.min()) + 1
        self.it = np.array([t - g0 for _, t, _ in self.keys])
        self.it2 = np.array([t2 - g0 for _, _, t2 in self.keys])

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        if self.spec.kind == "omega":
            mu = np.where(self.i_mu >= 0, theta[np.maximum(self.i_mu, 0)], 1.0)
            return mu * theta[self.i_om]
        cfg = self.spec.config(theta, self.m)
        eng = Engine(cfg)
        out = np.zeros(len(self.keys))
        for j, c in enumerate(self.cohorts):
            wj = self.Wt[:, j]
            if not wj.any():
                continue
            C = eng.cohort_cov(c)
            out += wj * C[self.it, self.it2]
        return out

    def jac(self, theta: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
        if self.spec.kind == "omega":
            J = np.zeros((len(self.keys), len(theta)))
            r = np.arange(len(self.keys))
            mu = np.where(self.i_mu >= 0, theta[np.maximum(self.i_mu, 0)], 1.0)
            has = self.i_mu >= 0
            J[r[has], self.i_mu[has]] = theta[self.i_om[has]]
            J[r, self.i_om] = mu
            return J
        J = np.empty((len(self.keys), len(theta)))
        for i in range(len(theta)):
            h = rel_step * max(abs(theta[i]), 1.0)
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            J[:, i] = (self(tp) - self(tm)) / (2 * h)
        return J


def model_covariances(spec: ModelSpec, theta: np.ndarray, m: MomentTable) -> np.ndarray:
    return _Evaluator(spec, m)(np.asarray(theta, float))


def md_fit(m: MomentTable, spec: ModelSpec, init: np.ndarray | None = None,
           weights: np.ndarray | str | None = None, n_starts: int = 5, perturb: float = 0.2,
           seed: int = 0, max_iter: int = 500, gtol: float = 1e-10) -> ParamEstimate:
    """Minimum-distance fit of model covariances to the table.

    Minimises sum_m w_m (m_m - p_m(theta))^2 with unit weights by default
    ("counts" weights by N_m).  Damped least squares (Levenberg-Marquardt),
    analytic Jacobian for the omega model, central differences otherwise;
    multi-start from +-`perturb` relative perturbations of `init`.
    """
    ev = _Evaluator(spec, m)
    target = m.vector()
    if len(ev.lay) >= len(target):
        raise EstimationError(f"{len(ev.lay)} parameters for {len(target)} moments")
    if weights is None:
        sw = np.ones(len(target))
    elif isinstance(weights, str) and weights == "counts":
        n = m.df["n"].to_numpy(float)
        sw = np.sqrt(n / n.mean())
    else:
        sw = np.sqrt(np.asarray(weights, float))
    x0 = spec.default_init(m) if init is None else np.asarray(init, float)
    rng = np.random.default_rng(seed)
    starts = [x0] + [x0 * (1 + perturb * rng.uniform(-1, 1, len(x0))) for _ in range(max(n_starts - 1, 0))]

    def fun(th):
        return sw * (ev(th) - target)

    def jac(th):
        return sw[:, None] * ev.jac(th)

    best = None
    for x in starts:
        try:
            r = optimize.least_squares(fun, x, jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                                       gtol=gtol, max_nfev=max_iter * (1 if spec.kind == "omega" else 1))
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as err:
            warnings.warn(f"start failed: {err}", RuntimeWarning)
            continue
        if best is None or r.cost < best.cost:
            best = r
    if best is None:
        raise EstimationError("all starts failed")
    obj = float(2 * best.cost)
    grad = float(np.abs(best.jac.T @ best.fun).max())
    scale = float(np.sum((sw * target) ** 2))
    flags = []
    if not best.success:
        flags.append("not-converged")
    if m.provenance == "population" and obj > 1e-8 * scale:
        flags.append("poor-fit")
    K = len(best.x)
    est = ParamEstimate(spec.names(m), best.x, np.full((K, K), np.nan), dof=len(target) - K,
                        n=m.df["n"].to_numpy(),
                        objective=obj, converged=bool(best.success), iterations=int(best.nfev),
                        grad_norm=grad, flags=flags,
                        extra={"scale": scale, "spec": spec, "table": m, "fitted": ev(best.x), "dof_md": len(target) - K})
    return est


def md_standard_errors(fit: ParamEstimate, m: MomentTable, contributions, W: np.ndarray | None = None,
                       spec: ModelSpec | None = None, jac: np.ndarray | None = None) -> np.ndarray:
    """Sandwich covariance of the MD estimator (clustered by person).

    Moments are g_m = (1/N) sum_i d_im (x_im - p_m).  With H = -(N_m/N) dp/dtheta
    and Omega = (1/N) sum_i h_i h_i', V = (H'WH)^-1 H'W Omega W H (H'WH)^-1 and
    Var(theta_hat) = V / N.  Default W = diag((N/N_m)^2), i.e. the equally
    weighted distance written as GMM.  `contributions` is (P, D) from
    person_contributions or a ResidualPanel (accumulated in person blocks).
    """
    spec = spec or fit.extra.get("spec")
    ev = _Evaluator(spec, m)
    p = ev(fit.params)
    Jp = ev.jac(fit.params) if jac is None else jac
    M = len(p)
    if isinstance(contributions, ResidualPanel):
        blocks = iter_person_contributions(contributions, m)
    else:
        blocks = [contributions]
    Om = np.zeros((M, M))
    Nm = np.zeros(M)
    N = 0
    for P, D in blocks:
        D = np.asarray(D, bool)
        h = np.where(D, P - p[None, :], 0.0)
        Om += h.T @ h
        Nm += D.sum(axis=0)
        N += P.shape[0]
    Om /= N
    if np.any(Nm == 0):
        raise EstimationError("some moments have no contributing persons")
    H = -(Nm / N)[:, None] * Jp
    if W is None:
        W = np.diag((N / Nm) ** 2)
    A = H.T @ W @ H
    u, sv, vt = np.linalg.svd(A)
    small = sv < 1e-12 * sv.max()
    if small.any():
        names = sorted({fit.names[i] for i in np.argmax(np.abs(vt[small]), axis=1)})
        raise EstimationError(f"Jacobian rank-deficient; null directions load on {names}")
    Ai = np.linalg.inv(A)
    V = Ai @ (H.T @ W @ Om @ W @ H) @ Ai / N
    return 0.5 * (V + V.T)


def with_cov(fit: ParamEstimate, V: np.ndarray) -> ParamEstimate:
    out = dc_replace(fit, cov=V, flags=list(fit.flags), extra=dict(fit.extra))
    spec = fit.extra.get("spec")
    m = fit.extra.get("table")
    if spec is not None and m is not None:
        nat, G = spec.natural(fit.params, m)
        out.extra["natural"] = pd.DataFrame({"param": fit.names, "value": nat,
                                             "se": np.sqrt(np.clip(np.diag(G @ V @ G.T), 0, None))})
    return out


# ---------------------------------------------------------------------------
# occupation GMM

def _spline_basis(t: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Hat-function basis of a linear spline (flat beyond the end knots)."""
    t = np.asarray(t, float)
    B = np.zeros((len(t), len(knots)))
    for j in range(len(knots)):
        e = np.zeros(len(knots))
        e[j] = 1.0
        B[:, j] = np.interp(t, knots, e)
    return B


def _occ_components(occs, edges):
    parent = {o: o for o in occs}

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x
    for a, b in edges:
        parent[find(a)] = find(b)
    comp = {}
    for o in occs:
        comp.setdefault(find(o), []).append(o)
    return list(comp.values())


def occ_gmm(res: ResidualPanel, lags: Sequence[int] = (8,), n_knots: int = 14, t_star: int | None = None,
            o_star=None, gap: int = 2, years: Sequence[int] | None = None, min_cell: int = 20,
            restricted: bool = False, intercepts: bool = True, weight: np.ndarray | None = None,
            knots: Sequence[float] | None = None) -> ParamEstimate:
    """Two-step GMM for occupation-specific returns and intercepts.

    Moments, per cell (t, o_t = a, o_{t-g} = b) with >= `min_cell` persons:
    E[z (dw - mu_t^a (g~_t^a - g~_{t-g}^b) - (r - 1) w_{t-g})] = 0 with
    r = mu_t^a / mu_{t-g}^b, z = (1, w_{t-g-l}...) and g~ = gamma / mu.
    log mu^o and g~^o are linear splines with equally spaced knots (t_star
    is always a knot); normalisation mu_{t*}^{o*} = 1, gamma_{t*}^{o*} = 0.
    `restricted` imposes one mu path for all occupations.
    """
    w = res.wide()
    if w.get("occ") is None:
        raise MomentError("occupation column required")
    R, O = w["resid"], w["occ"]
    col = {int(y): i for i, y in enumerate(w["years"])}
    ys = sorted(col) if years is None else sorted(int(y) for y in years if int(y) in col)
    occs = sorted({o for o in O.ravel() if o is not None and not (isinstance(o, float) and np.isnan(o))}, key=str)
    o_star = occs[0] if o_star is None else o_star
    t_star = ys[0] if t_star is None else t_star
    if knots is None:
        kn = np.linspace(min(ys), max(ys), max(2, min(n_knots, len(ys))))
    else:
        kn = np.asarray(knots, float)
    if not np.any(np.isclose(kn, t_star)):
        kn = np.sort(np.append(kn, t_star))
    K = len(kn)
    cells, dropped = [], []
    for t in ys:
        if t - gap not in col:
            continue
        zs = [t - gap - l for l in lags]
        if any(z not in col for z in zs):
            continue
        y1, x = R[:, col[t]], R[:, col[t - gap]]
        Z = np.column_stack([R[:, col[z]] for z in zs])
        ok = ~np.isnan(y1) & ~np.isnan(x) & ~np.isnan(Z).any(axis=1)
        oa, ob = O[:, col[t]], O[:, col[t - gap]]
        for a in occs:
            for b in occs:
                idx = np.flatnonzero(ok & (oa == a) & (ob == b))
                if len(idx) < min_cell:
                    if len(idx):
                        dropped.append((t, a, b, len(idx)))
                    continue
                Zc = Z[idx]
                if intercepts:
                    Zc = np.column_stack([np.ones(len(idx)), Zc])
                dy = y1[idx] - x[idx]
                xx = x[idx]
                if not intercepts:
                    dy, xx, Zc = dy - dy.mean(), xx - xx.mean(), Zc - Zc.mean(0)
                cells.append((t, a, b, idx, Zc, dy, xx))
    if not cells:
        raise EstimationError("no occupation cells with enough observations")
    comps = _occ_components(occs, [(a, b) for t, a, b, *_ in cells if a != b])
    if len(comps) > 1:
        raise EstimationError(f"occupation graph is disconnected: {comps}")
    Bt = {t: _spline_basis([t], kn)[0] for t in ys}
    ks = int(np.argmin(np.abs(kn - t_star)))
    io = {o: i for i, o in enumerate(occs)}
    nmu = 1 if restricted else len(occs)
    # parameter layout: log-mu knots (one path or per occ), then g~ knots per occ
    mu_free = [(j, kk) for j in range(nmu) for kk in range(K) if not (j == (0 if restricted else io[o_star]) and kk == ks)]
    g_free = [(io[o], kk) for o in occs for kk in range(K) if not (o == o_star and kk == ks)] if intercepts else []
    names = [f"log_mu[{'all' if restricted else occs[j]},{kn[kk]:g}]" for j, kk in mu_free] + \
            [f"gtilde[{occs[j]},{kn[kk]:g}]" for j, kk in g_free]

    def unpack(th):
        LM = np.zeros((nmu, K))
        G = np.zeros((len(occs), K))
        for v, (j, kk) in zip(th[:len(mu_free)], mu_free):
            LM[j, kk] = v
        for v, (j, kk) in zip(th[len(mu_free):], g_free):
            G[j, kk] = v
        return LM, G

    N = R.shape[0]
    Ls = [c[4].shape[1] for c in cells]
    Mtot = sum(Ls)
    stats_ = [(c[4].T @ c[6], c[4].T @ c[5], c[4].sum(0)) for c in cells]   # Szx, Szy, Sz

    def cell_par(th):
        LM, G = unpack(th)
        out = []
        for t, a, b, *_ in cells:
            la = LM[0 if restricted else io[a]] @ Bt[t]
            lb = LM[0 if restricted else io[b]] @ Bt[t - gap]
            r = math.exp(la - lb)
            alpha = math.exp(la) * (G[io[a]] @ Bt[t] - G[io[b]] @ Bt[t - gap]) if intercepts else 0.0
            out.append((r, alpha))
        return out

    def gbar(th):
        parts = []
        for (Szx, Szy, Sz), (r, al) in zip(stats_, cell_par(th)):
            parts.append((Szy - al * Sz - (r - 1) * Szx) / N)
        return np.concatenate(parts)

    def person_g(th):
        g = np.zeros((N, Mtot))
        off = 0
        for (t, a, b, idx, Zc, dy, xx), (r, al) in zip(cells, cell_par(th)):
            u = dy - al - (r - 1) * xx
            g[idx, off:off + Zc.shape[1]] += Zc * u[:, None]
            off += Zc.shape[1]
        return g

    npar = len(names)
    if npar >= Mtot:
        raise EstimationError(f"{npar} parameters for {Mtot} moments")
    flags = []
    scale = np.concatenate([np.sqrt((c[4] ** 2).sum(axis=0) / N) for c in cells])
    W1 = np.diag(1.0 / scale ** 2)

    def solve(W, x0):
        Lw = np.linalg.cholesky(W)
        f = lambda th: np.sqrt(N) * (Lw.T @ gbar(th))      # noqa: E731
        return optimize.least_squares(f, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=4000)

    x0 = np.zeros(npar)
    r1 = solve(W1, x0)
    g1 = person_g(r1.x)
    S = g1.T @ g1 / N
    W2 = _robust_inverse(S, 1e-8, flags) if weight is None else weight
    r2 = solve(W2, r1.x)
    gb = gbar(r2.x)
    J = float(N * gb @ W2 @ gb)
    # Jacobian of gbar by central differences
    Hm = np.empty((Mtot, npar))
    for i in range(npar):
        h = 1e-6 * max(abs(r2.x[i]), 1.0)
        tp, tm = r2.x.copy(), r2.x.copy()
        tp[i] += h
        tm[i] -= h
        Hm[:, i] = (gbar(tp) - gbar(tm)) / (2 * h)
    g2 = person_g(r2.x)
    S2 = g2.T @ g2 / N
    A = Hm.T @ W2 @ Hm
    try:
        Ai = np.linalg.inv(A)
        V = Ai @ (Hm.T @ W2 @ S2 @ W2 @ Hm) @ Ai / N
    except np.linalg.LinAlgError:
        V = np.full((npar, npar), np.nan)
        flags.append("singular-jacobian")
    LM, G = unpack(r2.x)
    mu_path = {(o, t): math.exp(LM[0 if restricted else io[o]] @ Bt[t]) for o in occs for t in ys}
    gam = {(o, t): mu_path[(o, t)] * (G[io[o]] @ Bt[t]) for o in occs for t in ys} if intercepts else {}
    if not r2.success:
        flags.append("not-converged")
    return ParamEstimate(names, r2.x, V, J=J, dof=Mtot - npar, n=np.array([len(c[3]) for c in cells]),
                         objective=float(gb @ W2 @ gb), converged=bool(r2.success), iterations=int(r2.nfev),
                         flags=flags, extra={"mu": mu_path, "gamma": gam, "knots": kn, "dropped": dropped,
                                             "S": S, "occupations": occs, "cells": [(c[0], c[1], c[2]) for c in cells]})


def occ_equal_mu_test(res: ResidualPanel, **kw) -> dict:
    """Difference-J test of equal mu paths across occupations (common weight)."""
    un = occ_gmm(res, **kw)
    W = _robust_inverse(un.extra["S"], 1e-8, [])
    un_w = occ_gmm(res, weight=W, **kw)
    rs = occ_gmm(res, restricted=True, weight=W, **kw)
    d = max(rs.J - un_w.J, 0.0)
    dof = len(un_w.params) - len(rs.params)
    return {"J_unrestricted": un_w.J, "J_restricted": rs.J, "diff_J": d, "dof": dof,
            "p_value": float(stats.chi2.sf(d, dof)), "unrestricted": un, "restricted": rs}

"""Closed-form identification of skill returns and skill/shock variances.

All functions take covariances from a MomentTable: population tables give
exact answers (the oracle), sample tables give method-of-moments estimates.
Ratios whose denominator is negligible relative to the moments involved
come back as NaN carrying a ``flag`` instead of an arbitrarily large number.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .moments import MomentError, MomentTable

REL_TOL = 1e-8


class IdentificationError(ValueError):
    pass


class Flagged(float):
    """A float that may carry an identification flag (value NaN when flagged)."""

    def __new__(cls, value, flag: str | None = None, detail: str = ""):
        obj = float.__new__(cls, value)
        obj.flag = flag
        obj.detail = detail
        return obj

    @property
    def ok(self) -> bool:
        return self.flag is None


def _ratio(num: float, den: float, scale: float, what: str) -> Flagged:
    if abs(den) <= REL_TOL * max(abs(scale), abs(num), 1e-300):
        return Flagged(np.nan, "small-denominator", f"{what}: |den|={abs(den):.3g}")
    return Flagged(num / den)


@dataclass
class IdentifiedPath:
    """Identified objects; every block is optional.

    Dict-valued blocks are keyed by year or by (group, year).
    """
    mu: dict = field(default_factory=dict)
    t_star: int | None = None
    omega: dict = field(default_factory=dict)
    var_theta: dict = field(default_factory=dict)
    var_eps: dict = field(default_factory=dict)
    var_dtheta: dict = field(default_factory=dict)
    rho: dict = field(default_factory=dict)
    rho_tilde: dict = field(default_factory=dict)
    var_psi: dict = field(default_factory=dict)
    var_phi: dict = field(default_factory=dict)
    var_nu: dict = field(default_factory=dict)
    hip: dict = field(default_factory=dict)
    occ: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)

    def mu_series(self) -> pd.Series:
        return pd.Series(self.mu).sort_index()

    def negative_variances(self, tol: float = 1e-10) -> list:
        bad = []
        for name in ("var_theta", "var_eps", "var_psi", "var_phi", "var_nu"):
            for k, v in getattr(self, name).items():
                if v < -tol:
                    bad.append((name, k, v))
        return bad

    def to_csv(self, out_dir) -> list[str]:
        """Write one delimited file per non-empty block with a normalization header."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        head = f"# normalization: mu[{self.t_star}] = 1\n"
        for name in ("mu", "omega", "var_theta", "var_eps", "var_dtheta", "rho", "rho_tilde",
                     "var_psi", "var_phi", "var_nu"):
            block = getattr(self, name)
            if not block:
                continue
            rows = []
            for k, v in sorted(block.items(), key=lambda kv: str(kv[0])):
                key = k if isinstance(k, tuple) else (k,)
                rows.append(list(key) + [v])
            ncols = len(rows[0]) - 1
            cols = ["year"] if ncols == 1 else ["group", "year"][:ncols] + [f"k{i}" for i in range(ncols - 2)]
            df = pd.DataFrame(rows, columns=cols + ["value"])
            path = out / f"{name}.csv"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(head)
                df.to_csv(fh, index=False, lineterminator="\n", float_format="%.17g")
            written.append(str(path))
        return written


# ---------------------------------------------------------------------------
# baseline: growth IV, mu path, variances

def _single_group(m: MomentTable, group):
    if group is not None:
        return str(group)
    names = m.group_names()
    if len(names) != 1:
        raise MomentError(f"table has groups {names}; pass group=")
    return names[0]


def _prev_year(m: MomentTable, group, t: int) -> int:
    ys = m.years(group)
    earlier = ys[ys < t]
    if len(earlier) == 0:
        raise MomentError(f"no year before {t} in group {group}")
    return int(earlier.max())


def mu_growth_iv(m: MomentTable, t: int, t2: int, group=None, t0: int | None = None,
                 k: int | None = None) -> Flagged:
    """cov(w_t - w_t0, w_t2) / cov(w_t0, w_t2), t0 the previous observed year.

    Equals mu_t/mu_t0 - 1 when t2 is a valid (lagged) instrument.
    """
    g = _single_group(m, group)
    t0 = _prev_year(m, g, t) if t0 is None else t0
    if k is not None and not (t0 - t2 >= k or t2 - t >= k):
        raise IdentificationError(f"instrument year {t2} too close to ({t0}, {t}) for k={k}")
    a, b = m.get(g, t, t2), m.get(g, t0, t2)
    return _ratio(a - b, b, max(abs(a), abs(b)), f"growth IV {t}/{t0} with {t2}")


def future_iv_bias(mu_t: float, mu_t0: float, var_dtheta: float, var_theta_t0: float) -> float:
    """Lead-minus-lag IV gap: (mu_t/mu_t0) * var(dtheta) / var(theta_t0)."""
    return (mu_t / mu_t0) * var_dtheta / var_theta_t0


def _growth_pooled(m: MomentTable, groups: Sequence[str], t: int, t0: int, instr: Callable) -> Flagged:
    num = den = scale = 0.0
    used = 0
    for g in groups:
        t2 = instr(g)
        if t2 is None or not (m.has(g, t, t2) and m.has(g, t0, t2)):
            continue
        a, b = m.get(g, t, t2), m.get(g, t0, t2)
        num += a - b
        den += b
        scale = max(scale, abs(a), abs(b))
        used += 1
    if used == 0:
        return Flagged(np.nan, "no-moments", f"no instrument for {t}")
    return _ratio(num, den, scale, f"growth {t}")


def mu_path(m: MomentTable, t_star: int, k: int, groups: Sequence | None = None,
            years: Sequence[int] | None = None, omega_tol: float = 1e-6) -> IdentifiedPath:
    """Chain lagged-instrument growth ratios into mu with mu[t_star] = 1.

    Each step t0 -> t uses, per group, the latest instrument year
    t2 <= t0 - k; groups are pooled by summing numerators and denominators.
    Omega(C, t2) = cov(w_t, w_t2 | C) / mu_t from the earliest valid t, with
    the spread across all valid t recorded in ``checks['omega_rel_spread']``.
    """
    groups = [str(g) for g in (groups or m.group_names())]
    ys = np.array(sorted(years)) if years is not None else m.years()
    if t_star not in ys:
        raise IdentificationError(f"t_star {t_star} not among years")
    gy = {g: m.years(g) for g in groups}

    def lag_instr(t0):
        def f(g):
            cand = gy[g][gy[g] <= t0 - k]
            return int(cand.max()) if len(cand) else None
        return f

    growth = {}
    for i in range(1, len(ys)):
        t, t0 = int(ys[i]), int(ys[i - 1])
        growth[t] = _growth_pooled(m, groups, t, t0, lag_instr(t0))
    path = IdentifiedPath(t_star=t_star)
    mu = {t_star: 1.0}
    i_star = int(np.flatnonzero(ys == t_star)[0])
    for i in range(i_star + 1, len(ys)):
        g_ = growth[int(ys[i])]
        if not g_.ok:
            path.flags.append(("broken-chain", int(ys[i]), g_.flag))
            break
        mu[int(ys[i])] = mu[int(ys[i - 1])] * (1.0 + g_)
    for i in range(i_star, 0, -1):
        g_ = growth[int(ys[i])]
        if not g_.ok:
            if g_.flag != "no-moments":
                path.flags.append(("broken-chain", int(ys[i]), g_.flag))
            break
        mu[int(ys[i - 1])] = mu[int(ys[i])] / (1.0 + g_)
    path.mu = dict(sorted(mu.items()))
    path.checks["growth"] = {t: float(v) for t, v in growth.items()}
    # Omega factorisation
    spread = 0.0
    for g in groups:
        for t2 in gy[g]:
            vals = [m.get(g, t, t2) / path.mu[t] for t in gy[g]
                    if t - t2 >= k and t in path.mu and m.has(g, t, t2)]
            if not vals:
                continue
            path.omega[(g, int(t2))] = vals[0]
            if len(vals) > 1:
                ref = max(abs(v) for v in vals)
                if ref > 0:
                    spread = max(spread, (max(vals) - min(vals)) / ref)
    path.checks["omega_rel_spread"] = spread
    if spread > omega_tol and m.provenance == "population":
        path.flags.append(("omega-inconsistent", spread))
    return path


def recover_variances(m: MomentTable, path: IdentifiedPath, k: int, group=None,
                      years: Sequence[int] | None = None) -> IdentifiedPath:
    """var(theta_t), var(eps_t), var(dtheta_t) for t in [t_lo + k, t_hi - k].

    var(theta_t) = cov(w_{t+k}, w_t) / (mu_{t+k} mu_t);
    var(eps_t) = var(w_t) - mu_t^2 var(theta_t).
    """
    g = _single_group(m, group)
    gy = m.years(g)
    lo, hi = int(gy.min()) + k, int(gy.max()) - k
    want = range(lo, hi + 1) if years is None else years
    out = path
    prev = None
    for t in want:
        if t < lo or t > hi:
            raise IdentificationError(f"year {t} outside identified range [{lo}, {hi}] for k={k}")
        if t not in gy:
            continue
        later = [s for s in gy if s >= t + k and s in path.mu and m.has(g, s, t)]
        if not later or t not in path.mu:
            raise IdentificationError(f"mu or lagged moment missing for {t}")
        s = min(later)
        vt = m.get(g, s, t) / (path.mu[s] * path.mu[t])
        out.var_theta[(g, int(t))] = vt
        out.var_eps[(g, int(t))] = m.get(g, t, t) - path.mu[t] ** 2 * vt
        if prev is not None and (g, prev) in out.var_theta:
            out.var_dtheta[(g, int(t))] = vt - out.var_theta[(g, prev)]
        prev = int(t)
    return out


def early_mu_cohort_diff(m: MomentTable, c, c_tilde, t: int, t2: int, k: int | None = None,
                         t0: int | None = None) -> Flagged:
    """mu_t/mu_t0 from cohort differences of lead covariances (t2 >= t + k)."""
    c, ct = str(c), str(c_tilde)
    t0 = t - 1 if t0 is None else t0
    if k is not None and t2 - t < k:
        raise IdentificationError("instrument must lead t by at least k")
    num = m.get(c, t, t2) - m.get(ct, t, t2)
    den = m.get(c, t0, t2) - m.get(ct, t0, t2)
    scale = max(abs(m.get(c, t0, t2)), abs(m.get(ct, t0, t2)))
    r = _ratio(num, den, scale, "cohort difference")
    if not r.ok:
        return Flagged(np.nan, "cohorts-indistinguishable", r.detail)
    return r


# ---------------------------------------------------------------------------
# fixed effect + AR(1) skills

@dataclass
class RootReport:
    A: float
    B: float
    C: float
    roots: tuple
    selected: float
    flag: str | None = None


def _select(roots, prior):
    roots = [float(r) for r in roots]
    return min(roots, key=lambda r: abs(r - prior)) if roots else np.nan


def solve_quadratic(A: float, B: float, C: float, prior: float = 1.0,
                    eps_a: float = 1e-10, eps_d: float = 1e-10) -> RootReport:
    """Roots of A x^2 + B x + C = 0 with the documented selection rule."""
    scale = max(abs(A), abs(B), abs(C))
    if scale == 0:
        raise IdentificationError("all quadratic coefficients vanish: unidentified")
    if abs(A) < eps_a * scale:
        if abs(B) < eps_a * scale:
            raise IdentificationError("A and B both vanish: unidentified")
        r = -C / B
        return RootReport(A, B, C, (r,), r, "linear")
    disc = B * B - 4 * A * C
    if abs(disc) < eps_d * B * B or abs(disc) < eps_d * scale * scale:
        r = -B / (2 * A)
        return RootReport(A, B, C, (r,), r, "double")
    if disc < 0:
        return RootReport(A, B, C, (), np.nan, "complex")
    sq = np.sqrt(disc)
    # numerically stable pair
    q = -0.5 * (B + np.copysign(sq, B))
    r1, r2 = q / A, (C / q if q != 0 else -B / A - q / A)
    roots = tuple(sorted((r1, r2)))
    return RootReport(A, B, C, roots, _select(roots, prior))


def solve_rho_tilde(m: MomentTable, c, c_tilde, t: int, t1: int, t2: int,
                    prior: float = 1.0, k: int | None = None, t0: int | None = None) -> RootReport:
    """Quadratic for rho~_t = rho_t mu_t / mu_{t-1} from two cohorts and two lags t1, t2."""
    c, ct = str(c), str(c_tilde)
    t0 = t - 1 if t0 is None else t0
    if k is not None and (t1 > t - k - 1 or t2 > t - k - 1):
        raise IdentificationError("lags must satisfy t' <= t-k-1")
    a = lambda g, s: m.get(g, s, t)      # noqa: E731
    b = lambda g, s: m.get(g, s, t0)     # noqa: E731
    A = b(c, t1) * b(ct, t2) - b(c, t2) * b(ct, t1)
    B = (a(c, t2) * b(ct, t1) + b(c, t2) * a(ct, t1)
         - a(c, t1) * b(ct, t2) - b(c, t1) * a(ct, t2))
    C = a(c, t1) * a(ct, t2) - a(c, t2) * a(ct, t1)
    return solve_quadratic(A, B, C, prior)


def common_root(reports: Sequence[RootReport], prior: float = 1.0, amb_tol: float = 1e-7) -> Flagged:
    """Root of the first quadratic closest to the roots of all the others.

    Spurious roots usually move with the moments used, the true root does
    not.  When every equation shares both roots the prior decides and the
    result is flagged "ambiguous".
    """
    reps = [r for r in reports if len(r.roots)]
    if not reps:
        return Flagged(np.nan, "no-root")
    if len(reps[0].roots) == 1:
        return Flagged(reps[0].selected)
    if len(reps) == 1:
        return Flagged(_select(reps[0].roots, prior), "ambiguous")
    scores = [sum(min(abs(r - x) for x in o.roots) for o in reps[1:]) for r in reps[0].roots]
    i = int(np.argmin(scores))
    if max(scores) <= amb_tol * max(abs(r) for r in reps[0].roots) * len(reps):
        return Flagged(_select(reps[0].roots, prior), "ambiguous")
    return Flagged(reps[0].roots[i])


def rho_tilde_path(m: MomentTable, cohorts: Sequence, k: int, prior: float = 1.0,
                   years: Sequence[int] | None = None, max_eq: int = 6,
                   keep_ambiguous: bool = False) -> dict:
    """rho~_t for every t with two admissible lags.

    Quadratics are formed for cohort pairs (c0, cj) and lag pairs; the
    common root is selected.  Years where the equations cannot tell the two
    roots apart (typically the first year, with a single lag pair) are
    dropped unless `keep_ambiguous`, in which case the prior decides.
    """
    cs = [str(c) for c in cohorts]
    if len(cs) < 2:
        raise IdentificationError("need at least two cohorts")
    ys = m.years(cs[0])
    for c in cs[1:]:
        ys = np.intersect1d(ys, m.years(c))
    out = {}
    for t in (ys if years is None else years):
        t = int(t)
        lags = sorted((int(s) for s in ys if s <= t - k - 1), reverse=True)
        if len(lags) < 2 or t - 1 not in ys:
            continue
        lag_pairs = [(lags[0], l2) for l2 in lags[1:3]]
        reps = []
        for cj in cs[1:]:
            for t1, t2 in lag_pairs:
                try:
                    reps.append(solve_rho_tilde(m, cs[0], cj, t, t1, t2, prior))
                except IdentificationError:
                    continue
                if len(reps) >= max_eq:
                    break
        if reps:
            r = common_root(reps, prior)
            if r.flag == "ambiguous" and not keep_ambiguous:
                continue
            out[t] = float(r) if r.flag is None else r
    return out


def mu_quasi_diff(m: MomentTable, rho_tilde: dict, group=None, t_star: int | None = None,
                  k: int = 1) -> IdentifiedPath:
    """mu path from quasi-differenced covariance ratios.

    Forward ratio (t <= t' - k - 1):
        mu_t/mu_{t-1} = [c(t,t') - r~_{t'} c(t,t'-1)] / [c(t-1,t') - r~_{t'} c(t-1,t'-1)]
    Late years (t' <= t - k - 2), with R the quasi-differenced ratio:
        mu_t = R (mu_{t-1} - r~_{t-1} mu_{t-2}) + r~_t mu_{t-1}
    Then rho_t = r~_t mu_{t-1}/mu_t and var(psi) from the quasi-differenced
    covariance.  var(psi) = 0 makes every ratio 0/0 and is flagged.
    """
    g = _single_group(m, group)
    ys = [int(y) for y in m.years(g)]
    path = IdentifiedPath(rho_tilde=dict(rho_tilde))
    ratio = {}
    for t in ys[1:]:
        cands = [tp for tp in ys if tp >= t + k + 1 and tp in rho_tilde and tp - 1 in ys]
        if not cands:
            continue
        tp = min(cands)
        r = rho_tilde[tp]
        num = m.get(g, t, tp) - r * m.get(g, t, tp - 1)
        den = m.get(g, t - 1, tp) - r * m.get(g, t - 1, tp - 1)
        ratio[t] = _ratio(num, den, max(abs(m.get(g, t, tp)), abs(m.get(g, t - 1, tp))), f"quasi ratio {t}")
    if ratio and all(not v.ok for v in ratio.values()):
        path.flags.append(("unidentified", "quasi-differenced covariances vanish (var_psi = 0?)"))
        return path
    mu = {ys[0]: 1.0}
    for t in ys[1:]:
        if t in ratio and ratio[t].ok and t - 1 in mu:
            mu[t] = mu[t - 1] * ratio[t]
        elif t - 1 in mu and t - 2 in mu and t in rho_tilde and t - 1 in rho_tilde:
            lags = [tp for tp in ys if tp <= t - k - 2]
            if not lags:
                break
            tp = max(lags)
            num = m.get(g, tp, t) - rho_tilde[t] * m.get(g, tp, t - 1)
            den = m.get(g, tp, t - 1) - rho_tilde[t - 1] * m.get(g, tp, t - 2)
            R = _ratio(num, den, abs(m.get(g, tp, t)), f"late ratio {t}")
            if not R.ok:
                path.flags.append(("broken-chain", t, R.flag))
                break
            mu[t] = R * (mu[t - 1] - rho_tilde[t - 1] * mu[t - 2]) + rho_tilde[t] * mu[t - 1]
        else:
            if mu:
                path.flags.append(("broken-chain", t, "no ratio"))
            break
    t_star = ys[0] if t_star is None else t_star
    if t_star not in mu:
        raise IdentificationError(f"t_star {t_star} outside identified mu range")
    s = mu[t_star]
    path.mu = {t: v / s for t, v in mu.items()}
    path.t_star = t_star
    for t, r in rho_tilde.items():
        if t in path.mu and t - 1 in path.mu:
            path.rho[t] = r * path.mu[t - 1] / path.mu[t]
    return path


def fear1_variances(m: MomentTable, path: IdentifiedPath, group=None, k: int = 1) -> IdentifiedPath:
    """var(psi), var(phi_t), var(nu_t) given mu, rho~ and rho.

    var(psi) = [c(t',t) - r~_t c(t',t-1)] / [mu_{t'} (mu_t - r~_t mu_{t-1})], t' <= t-k-1;
    var(phi_t) = [c(t,t')/(mu_t mu_{t'}) - var(psi)] / prod_{j=t+1}^{t'} rho_j, t' >= t+k;
    var(nu_t) = var(phi_t) - rho_t^2 var(phi_{t-1}).
    """
    g = _single_group(m, group)
    ys = [int(y) for y in m.years(g)]
    mu, rt = path.mu, path.rho_tilde
    vals = []
    for t in ys:
        if t not in rt or t not in mu or t - 1 not in mu:
            continue
        lags = [tp for tp in ys if tp <= t - k - 1 and tp in mu]
        for tp in lags:
            num = m.get(g, tp, t) - rt[t] * m.get(g, tp, t - 1)
            den = mu[tp] * (mu[t] - rt[t] * mu[t - 1])
            r = _ratio(num, den, abs(m.get(g, tp, t)) / max(abs(mu[tp]), 1e-300), "var_psi")
            if r.ok:
                vals.append(float(r))
    if not vals:
        path.flags.append(("unidentified", f"var_psi for {g}"))
        return path
    vpsi = float(np.median(vals))
    path.var_psi[g] = vpsi
    for t in ys:
        leads = [tp for tp in ys if tp >= t + k and tp in mu]
        if t not in mu or not leads:
            continue
        tp = min(leads)
        prod = 1.0
        ok = True
        for j in range(t + 1, tp + 1):
            if j not in path.rho:
                ok = False
                break
            prod *= path.rho[j]
        if not ok or prod == 0:
            continue
        path.var_phi[(g, t)] = (m.get(g, t, tp) / (mu[t] * mu[tp]) - vpsi) / prod
    for (gg, t), v in list(path.var_phi.items()):
        if gg == g and (g, t - 1) in path.var_phi and t in path.rho:
            path.var_nu[(g, t)] = v - path.rho[t] ** 2 * path.var_phi[(g, t - 1)]
    return path


# ---------------------------------------------------------------------------
# ARMA(1, q) transitory shocks

@dataclass
class BilinearReport:
    coef: np.ndarray            # rows (A, B, C, D) for the two equations
    solutions: list             # all real (rho_t', rho_t'') pairs
    selected: tuple | None
    branch: str
    flag: str | None = None


def bilinear_coefficients(m: MomentTable, c, c_tilde, t: int, t1: int, t2: int) -> np.ndarray:
    """(A, B, C, D) of A r1 r2 + B r1 + C r2 + D = 0 for rho at t1, t2 (both >= t+k+1)."""
    c, ct = str(c), str(c_tilde)
    cv = lambda g, s: m.get(g, t, s)      # noqa: E731
    A = cv(c, t1 - 1) * cv(ct, t2 - 1) - cv(c, t2 - 1) * cv(ct, t1 - 1)
    B = cv(ct, t1 - 1) * cv(c, t2) - cv(c, t1 - 1) * cv(ct, t2)
    C = cv(ct, t1) * cv(c, t2 - 1) - cv(c, t1) * cv(ct, t2 - 1)
    D = cv(c, t1) * cv(ct, t2) - cv(ct, t1) * cv(c, t2)
    return np.array([A, B, C, D])


def solve_bilinear(E1: np.ndarray, E2: np.ndarray, prior: float = 0.0, bound: float = 0.99,
                   tol: float = 1e-9) -> BilinearReport:
    """Intersect two rectangular hyperbolas A x y + B x + C y + D = 0."""
    coef = np.vstack([E1, E2])
    scale = np.abs(coef).max()
    if scale == 0:
        return BilinearReport(coef, [], None, "none", "unidentified: all coefficients vanish")
    (A1, B1, C1, D1), (A2, B2, C2, D2) = coef
    sols = []
    if abs(A1) < tol * scale and abs(A2) < tol * scale:
        M = np.array([[B1, C1], [B2, C2]])
        if abs(np.linalg.det(M)) <= tol * scale ** 2:
            return BilinearReport(coef, [], None, "linear", "rank-deficient linear system")
        x = -np.linalg.solve(M, [D1, D2])
        sols = [(float(x[0]), float(x[1]))]
        branch = "linear"
    else:
        branch = "hyperbola"
        qa = A2 * B1 - A1 * B2
        qb = B1 * C2 + A2 * D1 - B2 * C1 - A1 * D2
        qc = C2 * D1 - C1 * D2
        s = max(abs(qa), abs(qb), abs(qc))
        if s <= tol * scale ** 2:
            return BilinearReport(coef, [], None, branch,
                                  "unidentified: equations proportional (same curve)")
        if abs(qa) < tol * s:
            xs = [-qc / qb] if abs(qb) > tol * s else []
        else:
            disc = qb * qb - 4 * qa * qc
            if disc < -tol * qb * qb:
                xs = []
            else:
                sq = np.sqrt(max(disc, 0.0))
                xs = [(-qb + sq) / (2 * qa), (-qb - sq) / (2 * qa)]
        for x in xs:
            d1, d2 = A1 * x + C1, A2 * x + C2
            if abs(d1) >= abs(d2):
                y = -(B1 * x + D1) / d1
            else:
                y = -(B2 * x + D2) / d2
            sols.append((float(x), float(y)))
    if not sols:
        return BilinearReport(coef, [], None, branch, "no real intersection")
    adm = [s for s in sols if abs(s[0]) < bound and abs(s[1]) < bound] or sols
    sel = min(adm, key=lambda s: abs(s[0] - prior) + abs(s[1] - prior))
    return BilinearReport(coef, sols, sel, branch)


def solve_rho_arma(m: MomentTable, eq1: tuple, eq2: tuple, prior: float = 0.0,
                   eq3: tuple | None = None) -> BilinearReport:
    """Solve for (rho_t', rho_t'') from two (c, c~, t, t', t'') tuples.

    With two admissible intersections, an optional third equation picks the
    one it satisfies best.
    """
    E1 = bilinear_coefficients(m, *eq1)
    E2 = bilinear_coefficients(m, *eq2)
    rep = solve_bilinear(E1, E2, prior)
    if eq3 is not None and len(rep.solutions) > 1:
        A, B, C, D = bilinear_coefficients(m, *eq3)
        resid = [abs(A * x * y + B * x + C * y + D) for x, y in rep.solutions]
        rep.selected = rep.solutions[int(np.argmin(resid))]
    return rep


def solve_rho_arma_constant(m: MomentTable, eqs: Sequence[tuple], prior: float = 0.0) -> float:
    """Time-constant rho from several (c, c~, t, t', t'') equations.

    Imposing rho_t' = rho_t'' turns each bilinear equation into a quadratic
    A r^2 + (B + C) r + D = 0; its spurious root moves with (t', t''), the
    true one does not.
    """
    reps = []
    for eq in eqs:
        A, B, C, D = bilinear_coefficients(m, *eq)
        try:
            reps.append(solve_quadratic(A, B + C, D, prior))
        except IdentificationError:
            continue
    if not reps:
        raise IdentificationError("no usable rho equation")
    return common_root(reps, prior)


def arma_recover(m: MomentTable, cohorts: Sequence, k: int, t_star: int | None = None,
                 prior: float = 0.0, rho_mode: str = "constant") -> IdentifiedPath:
    """rho, mu_t and var(theta_t | c) for ARMA(1, q) transitory shocks.

    rho_mode "constant": one rho for all years, common root of quadratics
    over several (t', t'') pairs.  rho_mode "free": year-specific rho from
    pairs of bilinear equations; these are proportional whenever the
    persistent shock's long autocovariances factor as K_c(t) R(s), which
    holds for every random-walk-skill model, so the result is flagged.
    """
    cs = [str(c) for c in cohorts]
    if len(cs) < 2:
        raise IdentificationError("need at least two cohorts")
    ys = m.years(cs[0])
    for c in cs[1:]:
        ys = np.intersect1d(ys, m.years(c))
    ys = [int(y) for y in ys]
    c, ct = cs[0], cs[1]
    path = IdentifiedPath()
    first = ys[0] + k + 1
    if rho_mode == "constant":
        t = ys[0]
        eqs = [(c, cj, t, s1, s2) for cj in cs[1:] for s1, s2 in
               ((first + 1, first + 2), (first + 1, first + 3), (first + 2, first + 4))
               if s2 in ys and s1 - 1 in ys and s2 - 1 in ys]
        r = solve_rho_arma_constant(m, eqs, prior)
        path.rho = {t: r for t in ys if t >= first}
    elif rho_mode == "free":
        rho = {}
        for s in ys:
            if s + 1 not in ys:
                continue
            ts = sorted(t for t in ys if t <= s - k - 1)
            if not ts:
                continue
            eqs = [(c, cj, tt, s, s + 1) for cj in cs[1:] for tt in ts[-2:]]
            if len(eqs) < 2:
                continue
            rep = solve_rho_arma(m, eqs[0], eqs[-1], prior, eq3=eqs[1] if len(eqs) > 2 else None)
            if rep.selected is None:
                path.flags.append(("rho", s, rep.flag))
                continue
            rho.setdefault(s, []).append(rep.selected[0])
            rho.setdefault(s + 1, []).append(rep.selected[1])
        path.rho = {t: float(np.mean(v)) for t, v in sorted(rho.items())}
    else:
        raise ValueError(f"unknown rho_mode {rho_mode!r}")
    if not path.rho:
        path.flags.append(("unidentified", "no rho solved"))
        return path

    def q(g, s, tp):
        return m.get(g, s, tp) - path.rho[tp] * m.get(g, s, tp - 1)

    ratio = {}
    for t in ys[1:]:
        cands = [tp for tp in ys if tp >= t + k + 1 and tp in path.rho and tp - 1 in ys]
        if not cands or t - 1 not in ys:
            continue
        tp = min(cands)
        num = q(c, t, tp) - q(ct, t, tp)
        den = q(c, t - 1, tp) - q(ct, t - 1, tp)
        ratio[t] = _ratio(num, den, abs(m.get(c, t - 1, tp)), f"arma ratio {t}")
    mu = {ys[0]: 1.0}
    for t in ys[1:]:
        if t in ratio and ratio[t].ok and t - 1 in mu:
            mu[t] = mu[t - 1] * ratio[t]
        elif t - 1 in mu and t - 2 in mu and t in path.rho and t - 1 in path.rho:
            lags = [tp for tp in ys if tp <= t - k - 2]
            if not lags:
                break
            tp = max(lags)
            num = m.get(c, tp, t) - path.rho[t] * m.get(c, tp, t - 1)
            den = m.get(c, tp, t - 1) - path.rho[t - 1] * m.get(c, tp, t - 2)
            R = _ratio(num, den, abs(m.get(c, tp, t)), f"late ratio {t}")
            if not R.ok:
                path.flags.append(("broken-chain", t, R.flag))
                break
            mu[t] = R * (mu[t - 1] - path.rho[t - 1] * mu[t - 2]) + path.rho[t] * mu[t - 1]
        else:
            break
    t_star = ys[0] if t_star is None else t_star
    if t_star not in mu:
        raise IdentificationError(f"t_star {t_star} outside identified mu range")
    sc = mu[t_star]
    path.mu = {t: v / sc for t, v in mu.items()}
    path.t_star = t_star
    for g in cs:
        for t in m.years(g):
            t = int(t)
            cands = [tp for tp in m.years(g)
                     if tp >= t + k + 1 and tp in path.rho and tp in path.mu and tp - 1 in path.mu]
            if t not in path.mu or not cands:
                continue
            tp = int(min(cands))
            den = path.mu[t] * (path.mu[tp] - path.rho[tp] * path.mu[tp - 1])
            path.var_theta[(g, t)] = q(g, t, tp) / den
    return path


# ---------------------------------------------------------------------------
# heterogeneous income profiles

def hip_scaled_tables(m: MomentTable, mu: dict, group, k: int):
    """Growth covariances of mu-scaled residuals.

    g[(t, s)] = cov(d(w_t/mu_t), d(w_s/mu_s)) for |t - s| >= k+1 and
    h[(t, s)] = cov(w_t/mu_t, d(w_s/mu_s)) for s - t >= k+1 (annual steps).
    """
    g_ = str(group)
    ys = [int(y) for y in m.years(g_) if int(y) in mu]
    S = lambda a, b: m.get(g_, a, b) / (mu[a] * mu[b])   # noqa: E731
    has = lambda a, b: a in mu and b in mu and m.has(g_, a, b)  # noqa: E731
    gt, ht = {}, {}
    for t in ys:
        for s in ys:
            if abs(t - s) >= k + 1 and all(has(a, b) for a in (t, t - 1) for b in (s, s - 1)):
                gt[(t, s)] = S(t, s) - S(t - 1, s) - S(t, s - 1) + S(t - 1, s - 1)
            if s - t >= k + 1 and has(t, s) and has(t, s - 1):
                ht[(t, s)] = S(t, s) - S(t, s - 1)
    return gt, ht, S


def hip_recover(m: MomentTable, mu: dict, k: int, group, cohort: int | None = None,
                anchor: int | None = None, lambda_entry: float | dict | None = None,
                zero_tol: float = 1e-12) -> IdentifiedPath:
    """lambda_t (anchor = 1), var(delta), cov(psi, delta), var(theta_t), var(nu_t).

    lambda for years before the first observed growth (the entry year and,
    for cohorts older than the sample, earlier years) is not identified;
    `lambda_entry` supplies it (default: flat extrapolation of the first
    identified value, flagged).
    """
    g_ = str(group)
    gt, ht, S = hip_scaled_tables(m, mu, g_, k)
    path = IdentifiedPath(mu=dict(mu))
    years = sorted({t for t, _ in gt} | {s for _, s in gt})
    scale = max([abs(S(t, t)) for t in m.years(g_) if int(t) in mu] or [1.0])
    if not gt or max(abs(v) for v in gt.values()) <= zero_tol * scale:
        path.flags.append(("no-hip", "scaled growth covariances vanish"))
        lam = {t: 0.0 for t in years}
        vdelta = 0.0
    else:
        # ratios lambda_t / lambda_{t-1}
        ratio = {}
        for t in years:
            num = sum(v for (a, s), v in gt.items() if a == t and (t - 1, s) in gt)
            den = sum(gt[(t - 1, s)] for (a, s) in gt if a == t and (t - 1, s) in gt)
            if den != 0 and (t - 1) in years:
                ratio[t] = num / den
        lam_years = sorted(ratio)
        first = min([lam_years[0] - 1] + lam_years) if lam_years else years[0]
        rel = {first: 1.0}
        for t in range(first + 1, max(years) + 1):
            if t in ratio and t - 1 in rel:
                rel[t] = rel[t - 1] * ratio[t]
        a = first if anchor is None else anchor
        if a not in rel or rel[a] == 0:
            raise IdentificationError(f"lambda anchor {a} is zero or unidentified")
        lam = {t: v / rel[a] for t, v in rel.items()}
        num = sum(v for (t, s), v in gt.items() if t in lam and s in lam)
        den = sum(lam[t] * lam[s] for (t, s) in gt if t in lam and s in lam)
        vdelta = num / den
    path.hip["lambda"] = dict(lam)
    path.hip["var_delta"] = vdelta
    # cov(theta_t, delta) = h(t, s) / lambda_s
    ctd = {}
    for t in sorted({t for t, _ in ht}):
        pairs = [(v, lam.get(s, 0.0)) for (a, s), v in ht.items() if a == t and s in lam]
        den = sum(l for _, l in pairs)
        if den != 0:
            ctd[t] = sum(v for v, _ in pairs) / den
        elif not path.flags or path.flags[0][0] != "no-hip":
            continue
        else:
            ctd[t] = 0.0
    path.hip["cov_theta_delta"] = ctd
    # cumulative Lambda from entry
    if cohort is None:
        try:
            cohort = int(g_)
        except ValueError:
            raise IdentificationError("cohort needed to accumulate lambda from entry") from None
    lam_full = dict(lam)
    known = sorted(lam)
    if known:
        for r in range(cohort + 1, known[0]):
            if isinstance(lambda_entry, dict):
                lam_full[r] = float(lambda_entry[r])
            elif lambda_entry is not None:
                lam_full[r] = float(lambda_entry)
            else:
                lam_full[r] = lam[known[0]]
        if known[0] > cohort + 1 and lambda_entry is None and vdelta != 0:
            path.flags.append(("lambda-entry-extrapolated", cohort + 1, known[0] - 1))
    Lam, acc = {}, 0.0
    for r in range(cohort + 1, max(lam_full, default=cohort) + 1):
        acc += lam_full.get(r, 0.0)
        Lam[r] = acc
    cpd = {t: v - vdelta * Lam.get(t, 0.0) for t, v in ctd.items()}
    path.hip["cov_psi_delta_by_t"] = cpd
    path.hip["cov_psi_delta"] = float(np.mean(list(cpd.values()))) if cpd else np.nan
    # var(theta_t) = S(t, t') - cov(theta_t, delta) * sum_{r=t+1}^{t'} lambda_r
    for t in sorted(ctd):
        tp = t + k
        if not m.has(g_, tp, t) or tp not in mu:
            continue
        lsum = sum(lam_full.get(r, 0.0) for r in range(t + 1, tp + 1))
        path.var_theta[(g_, t)] = S(tp, t) - ctd[t] * lsum
    for (gg, t), v in list(path.var_theta.items()):
        if (gg, t - 1) in path.var_theta and t in lam_full and (t - 1) in ctd:
            path.var_nu[(gg, t)] = (v - path.var_theta[(gg, t - 1)] - vdelta * lam_full[t] ** 2
                                    - 2 * ctd[t - 1] * lam_full[t])
    return path


# ---------------------------------------------------------------------------
# multiple skills

def multi_skill_iv_check(config, t: int, t2: int, group=None, t0: int | None = None) -> dict:
    """Population IV versus the weighted average of skill-specific growth.

    Returns iv_value, weights (omega_j), growth (per-skill growth), and
    weighted_avg = sum_j omega_j * growth_j.
    """
    from .dgp import Engine, MultiSkill, _cohorts_for, population_autocov
    eng = Engine(config)
    t0 = t - 1 if t0 is None else t0
    iv = (population_autocov(config, group, t, t2, eng) - population_autocov(config, group, t0, t2, eng)) \
        / population_autocov(config, group, t0, t2, eng)
    J = eng.J
    mu_e = eng.mu[None, :] * eng.mu_skill             # effective skill-specific returns
    g2, g0, gt = eng.gi(t2), eng.gi(t0), eng.gi(t)
    # cov(theta_j, theta_l) at t2, pooled over cohorts with count weights
    Sig = np.zeros((J, J))
    wsum = 0.0
    for c in _cohorts_for(config, group, max(t, t2)):
        if not (config.observed(c, t) and config.observed(c, t2) and config.observed(c, t0)):
            continue
        M = eng.theta_loading(c)
        n = config.n_cohort(c)
        lo = min(g2, g0)
        Sig += n * np.einsum("jk,lk->jl", M[:, lo], M[:, lo])
        wsum += n
    Sig /= wsum
    a = Sig @ mu_e[:, g2]                              # cov(theta_j, theta_bar_t2)
    raw = a * mu_e[:, g0]
    omega = raw / raw.sum()
    growth = (mu_e[:, gt] - mu_e[:, g0]) / mu_e[:, g0]
    return {"iv_value": float(iv), "weights": omega, "growth": growth,
            "weighted_avg": float(omega @ growth)}


# ---------------------------------------------------------------------------
# occupations

def _components(nodes, edges):
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x
    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    comps = {}
    for n in nodes:
        comps.setdefault(find(n), []).append(n)
    return list(comps.values())


def occ_params(m_cond: MomentTable, means: pd.DataFrame, t_star: int, o_star, k: int,
               occupations: Sequence | None = None) -> IdentifiedPath:
    """Occupation-specific returns and intercepts.

    `m_cond` groups are named ``"a|b@t"`` (o_t = a, o_{t-1} = b) and hold
    cov(w_t, w_t2) and cov(w_{t-1}, w_t2) for a lag t2 <= t-1-k.  `means`
    has columns group, year, mean with E[w_year | group] for year t, t-1.
    The IV ratio gives mu_t^a / mu_{t-1}^b; mean-residual growth scaled by
    these returns gives gamma_t^a/mu_t^a - gamma_{t-1}^b/mu_{t-1}^b.
    Normalisation: mu_{t*}^{o*} = 1, gamma_{t*}^{o*} = 0.
    """
    edges, log_r, dx = [], [], []
    mean_idx = {(str(g), int(y)): float(v) for g, y, v in zip(means["group"], means["year"], means["mean"])}
    for gname in m_cond.group_names():
        ab, t = gname.split("@")
        a, b = ab.split("|")
        t = int(t)
        lags = [int(s) for s in m_cond.years(gname) if s <= t - 1 - k]
        if not lags:
            continue
        t2 = max(lags)
        if not (m_cond.has(gname, t, t2) and m_cond.has(gname, t - 1, t2)):
            continue
        r = _ratio(m_cond.get(gname, t, t2), m_cond.get(gname, t - 1, t2),
                   abs(m_cond.get(gname, t, t2)), gname)
        if not r.ok or r <= 0:
            continue
        edges.append(((t, a), (t - 1, b)))
        log_r.append(np.log(r))
        if (gname, t) in mean_idx and (gname, t - 1) in mean_idx:
            dx.append((len(edges) - 1, gname))
    nodes = sorted({n for e in edges for n in e})
    star = (int(t_star), str(o_star))
    if star not in nodes:
        raise IdentificationError(f"normalisation cell {star} has no switcher/stayer moments")
    comps = _components(nodes, edges)
    if len(comps) > 1:
        raise IdentificationError(
            "occupation graph is disconnected; components: " +
            "; ".join(str(sorted(c)) for c in comps))
    idx = {n: i for i, n in enumerate(nodes)}
    X = np.zeros((len(edges) + 1, len(nodes)))
    for e, ((n1, n2), lr) in enumerate(zip(edges, log_r)):
        X[e, idx[n1]] += 1.0
        X[e, idx[n2]] -= 1.0
    X[-1, idx[star]] = 1.0
    y = np.append(log_r, 0.0)
    logm = np.linalg.lstsq(X, y, rcond=None)[0]
    mu_occ = {n: float(np.exp(v)) for n, v in zip(nodes, logm)}
    # gamma/mu differences along the same edges
    rows, rhs = [], []
    for e, gname in dx:
        (n1, n2) = edges[e]
        rows.append((idx[n1], idx[n2]))
        rhs.append(mean_idx[(gname, n1[0])] / mu_occ[n1] - mean_idx[(gname, n2[0])] / mu_occ[n2])
    Xg = np.zeros((len(rows) + 1, len(nodes)))
    for r, (i1, i2) in enumerate(rows):
        Xg[r, i1] += 1.0
        Xg[r, i2] -= 1.0
    Xg[-1, idx[star]] = 1.0
    xg = np.linalg.lstsq(Xg, np.append(rhs, 0.0), rcond=None)[0]
    gamma = {n: float(xg[idx[n]] * mu_occ[n]) for n in nodes}
    path = IdentifiedPath(t_star=int(t_star))
    path.occ = {"mu_occ": mu_occ, "gamma": gamma, "o_star": str(o_star)}
    return path


def occ_mean_skill(mean_resid: pd.DataFrame, occ_block: dict, tol: float = 1e-12) -> pd.DataFrame:
    """E[theta_t | o_t] = (E[w_t | o_t] - gamma_t^o) / mu_t^o.

    `mean_resid` has columns year, occ, mean; `occ_block` is IdentifiedPath.occ.
    """
    out = []
    mu, gam = occ_block["mu_occ"], occ_block["gamma"]
    for y, o, v in zip(mean_resid["year"], mean_resid["occ"], mean_resid["mean"]):
        key = (int(y), str(o))
        if key not in mu:
            continue
        if abs(mu[key]) < tol:
            raise IdentificationError(f"mu_occ near zero at {key}")
        out.append({"year": int(y), "occ": str(o), "mean_skill": (v - gam[key]) / mu[key]})
    return pd.DataFrame(out)

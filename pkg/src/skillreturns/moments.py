"""Grouped residual autocovariances and descriptive residual statistics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .dgp import DgpConfig, Engine, population_mean, population_pair
from .panel import PanelError, ResidualPanel

# observed calendar years of the annual-then-biennial survey layout
PSID_YEARS = tuple(list(range(1970, 1997)) + list(range(1998, 2013, 2)))


class MomentError(ValueError):
    pass


@dataclass(frozen=True)
class GroupDef:
    """A set of persons defining a covariance group.

    ``cohorts``: entry cohorts (inclusive range) or None; ``exper``: experience
    range measured in the later year t; ``educ``: education label or None.
    ``t_range``/``t2_range`` restrict the later/earlier years; ``max_gap``
    bounds t - t2 (may be None).  ``occ`` is an optional {year: occupation
    index} conditioning used for population moments.
    """
    name: str
    cohorts: tuple | None = None
    exper: tuple | None = None
    educ: str | None = None
    t_range: tuple | None = None
    t2_range: tuple | None = None
    min_gap: int = 0
    max_gap: int | None = None
    occ: dict | None = None

    def allows(self, t: int, t2: int) -> bool:
        gap = t - t2
        if gap < self.min_gap or (self.max_gap is not None and gap > self.max_gap):
            return False
        if self.t_range is not None and not (self.t_range[0] <= t <= self.t_range[1]):
            return False
        if self.t2_range is not None and not (self.t2_range[0] <= t2 <= self.t2_range[1]):
            return False
        return True

    def members(self, cohort: np.ndarray | None, educ: np.ndarray | None, t: int) -> np.ndarray:
        n = len(cohort) if cohort is not None else len(educ)
        m = np.ones(n, bool)
        if self.cohorts is not None:
            if cohort is None:
                raise MomentError("cohort labels required for cohort groups")
            m &= (cohort >= self.cohorts[0]) & (cohort <= self.cohorts[1])
        if self.exper is not None:
            if cohort is None:
                raise MomentError("cohort labels required for experience groups")
            e = t - cohort
            m &= (e >= self.exper[0]) & (e <= self.exper[1])
        if self.educ is not None:
            if educ is None:
                raise MomentError("education labels required")
            m &= educ == self.educ
        return m

    def cohorts_at(self, cohort_list: np.ndarray, t: int) -> np.ndarray:
        m = self.members(np.asarray(cohort_list), None, t) if self.educ is None else \
            self.members(np.asarray(cohort_list), np.full(len(cohort_list), self.educ, object), t)
        return np.asarray(cohort_list)[m]


def cohort_group_windows(groups: dict, exper=(21, 40), min_gap: int = 6,
                         educ: str | None = None) -> list[GroupDef]:
    """Cohort groups whose every member has experience in `exper` in year t.

    For group [c_lo, c_hi] the later year runs over [c_hi + e_lo, c_lo + e_hi];
    the earlier year over the same window shifted back by `min_gap`.
    """
    out = []
    for name, (c_lo, c_hi) in groups.items():
        t_lo, t_hi = c_hi + exper[0], c_lo + exper[1]
        out.append(GroupDef(name=str(name), cohorts=(c_lo, c_hi), educ=educ,
                            t_range=(t_lo, t_hi), t2_range=(t_lo - min_gap, t_hi - min_gap),
                            min_gap=min_gap))
    return out


def experience_group_windows(bounds: Sequence[tuple], min_gap: int = 6,
                             educ: str | None = None, prefix: str = "E") -> list[GroupDef]:
    """Experience groups [a, b] (in year t) with min_gap <= t - t2 <= a - 1.

    The upper gap bound keeps every member at experience >= 1 in t2.
    """
    return [GroupDef(name=f"{prefix}{i + 1}" + (f":{educ}" if educ else ""), exper=(a, b),
                     educ=educ, min_gap=min_gap, max_gap=a - 1)
            for i, (a, b) in enumerate(bounds)]


DECADE_COHORT_GROUPS = {"C1": (1942, 1951), "C2": (1952, 1961), "C3": (1962, 1971), "C4": (1972, 1981)}
TEN_YEAR_EXPER = [(1, 10), (11, 20), (21, 30), (31, 40)]


def design_rows(groups: Sequence[GroupDef], years: Iterable[int]) -> list[tuple[str, int, int]]:
    """All (group, t, t2) admissible under the group windows on the given years."""
    ys = sorted(int(y) for y in years)
    rows = []
    for g in groups:
        for t in ys:
            for t2 in ys:
                if t2 <= t and g.allows(t, t2):
                    rows.append((g.name, t, t2))
    return rows


# ---------------------------------------------------------------------------

class MomentTable:
    """Rows of grouped autocovariances {group, t, t2, cov, n} with t >= t2."""

    COLS = ["group", "t", "t2", "cov", "n", "provenance"]

    def __init__(self, rows: pd.DataFrame | Sequence | None = None, provenance: str = "sample",
                 groups: dict | None = None, skipped: list | None = None):
        if rows is None:
            df = pd.DataFrame(columns=self.COLS)
        elif isinstance(rows, pd.DataFrame):
            df = rows.copy()
        else:
            df = pd.DataFrame(list(rows), columns=self.COLS[:5])
        if "provenance" not in df:
            df["provenance"] = provenance
        if len(df):
            df["group"] = df["group"].astype(str)
            t = df["t"].astype(int).to_numpy()
            t2 = df["t2"].astype(int).to_numpy()
            df["t"], df["t2"] = np.maximum(t, t2), np.minimum(t, t2)
            df["cov"] = df["cov"].astype(float)
            df["n"] = df["n"].astype(float)
            if df.duplicated(["group", "t", "t2"]).any():
                raise MomentError("duplicate (group, t, t2) rows")
            df = df.sort_values(["group", "t", "t2"], kind="stable").reset_index(drop=True)
        self.df = df[self.COLS]
        self.groups = dict(groups or {})
        self.skipped = list(skipped or [])
        self._index = {(g, int(a), int(b)): i for i, (g, a, b) in
                       enumerate(zip(df["group"], df["t"], df["t2"]))} if len(df) else {}

    def __len__(self) -> int:
        return len(self.df)

    def __repr__(self) -> str:
        return f"MomentTable({len(self)} rows, groups={sorted(self.df['group'].unique())})"

    @property
    def provenance(self) -> str:
        return str(self.df["provenance"].iloc[0]) if len(self) else "sample"

    def has(self, group, t: int, t2: int) -> bool:
        a, b = max(t, t2), min(t, t2)
        return (str(group), a, b) in self._index

    def get(self, group, t: int, t2: int) -> float:
        a, b = max(int(t), int(t2)), min(int(t), int(t2))
        try:
            return float(self.df["cov"].iat[self._index[(str(group), a, b)]])
        except KeyError:
            raise MomentError(f"moment ({group}, {a}, {b}) not in table") from None

    def count(self, group, t: int, t2: int) -> float:
        a, b = max(int(t), int(t2)), min(int(t), int(t2))
        return float(self.df["n"].iat[self._index[(str(group), a, b)]])

    def cov_fn(self, group):
        return lambda t, t2: self.get(group, t, t2)

    def group_names(self) -> list[str]:
        return sorted(self.df["group"].unique())

    def years(self, group=None) -> np.ndarray:
        d = self.df if group is None else self.df[self.df["group"] == str(group)]
        return np.unique(np.concatenate([d["t"].to_numpy(), d["t2"].to_numpy()])).astype(int)

    def vector(self) -> np.ndarray:
        return self.df["cov"].to_numpy(float)

    def keys(self) -> list[tuple[str, int, int]]:
        return list(zip(self.df["group"], self.df["t"].astype(int), self.df["t2"].astype(int)))

    def subset(self, mask) -> "MomentTable":
        return MomentTable(self.df.loc[np.asarray(mask)], groups=self.groups)

    def with_cov(self, cov: np.ndarray) -> "MomentTable":
        df = self.df.copy()
        df["cov"] = np.asarray(cov, float)
        return MomentTable(df, groups=self.groups)

    def to_csv(self, path, sep: str = ",") -> None:
        out = self.df.copy()
        out["cov"] = ["%.17g" % v for v in out["cov"]]
        out["n"] = ["%.17g" % v for v in out["n"]]
        out.to_csv(path, sep=sep, index=False, lineterminator="\n")

    @classmethod
    def from_csv(cls, path, sep: str = ",") -> "MomentTable":
        df = pd.read_csv(path, sep=sep, dtype={"group": str})
        missing = set(cls.COLS[:5]) - set(df.columns)
        if missing:
            raise MomentError(f"moment file lacks columns {sorted(missing)}")
        return cls(df)

    @classmethod
    def concat(cls, tables: Sequence["MomentTable"]) -> "MomentTable":
        groups = {}
        for t in tables:
            groups.update(t.groups)
        return cls(pd.concat([t.df for t in tables], ignore_index=True), groups=groups)


# ---------------------------------------------------------------------------
# sample moments

def _pair_cov(x: np.ndarray, y: np.ndarray) -> tuple[float, int]:
    ok = ~(np.isnan(x) | np.isnan(y))
    n = int(ok.sum())
    if n < 2:
        return np.nan, n
    a, b = x[ok], y[ok]
    return float(((a - a.mean()) * (b - b.mean())).sum() / (n - 1)), n


def sample_autocov(res: ResidualPanel, group, t: int, t2: int) -> tuple[float, int]:
    """Pairwise-complete covariance of residuals in years t and t2 within group.

    `group` may be None (all persons), a GroupDef, or a boolean person mask
    aligned with ``res.wide()["person_id"]``.
    """
    w = res.wide()
    years = list(w["years"])
    if t not in years or t2 not in years:
        raise MomentError(f"insufficient overlap: year {t if t not in years else t2} not in panel")
    i, j = years.index(t), years.index(t2)
    mask = _group_mask(w, group, max(t, t2))
    R = w["resid"]
    # symmetric in (t, t2): products commute and both years use the same persons
    lo, hi = min(i, j), max(i, j)
    cov, n = _pair_cov(R[mask, lo], R[mask, hi])
    if n < 2:
        raise MomentError(f"insufficient overlap for ({t}, {t2}): n={n}")
    return cov, n


def _group_mask(w: dict, group, t: int) -> np.ndarray:
    npers = len(w["person_id"])
    if group is None:
        return np.ones(npers, bool)
    if isinstance(group, GroupDef):
        return group.members(w.get("cohort"), w.get("educ"), t)
    m = np.asarray(group)
    if m.dtype == bool and len(m) == npers:
        return m
    raise MomentError("group must be None, a GroupDef or a person mask")


def long_autocov_set(res: ResidualPanel, groups: Sequence[GroupDef], min_gap: int = 1,
                     years: Iterable[int] | None = None, min_count: int = 20) -> MomentTable:
    """All within-group covariances with t - t2 >= min_gap satisfying the windows.

    Cells with fewer than `min_count` overlapping persons are skipped and
    listed in ``table.skipped``.
    """
    if min_gap < 0:
        raise MomentError("min_gap must be >= 0")
    w = res.wide()
    ys = list(w["years"]) if years is None else sorted(set(int(y) for y in years) & set(w["years"]))
    col = {y: k for k, y in enumerate(w["years"])}
    R = w["resid"]
    obs = ~np.isnan(R)
    rows, skipped = [], []
    for g in groups:
        for t in ys:
            mask = _group_mask(w, g, t)
            if not mask.any():
                continue
            Rt = R[mask]
            Ot = obs[mask]
            for t2 in ys:
                if t - t2 < min_gap or not g.allows(t, t2):
                    continue
                i, j = col[t], col[t2]
                ok = Ot[:, i] & Ot[:, j]
                n = int(ok.sum())
                if n < max(min_count, 2):
                    skipped.append((g.name, t, t2, n))
                    continue
                a, b = Rt[ok, i], Rt[ok, j]
                rows.append((g.name, t, t2, float(((a - a.mean()) * (b - b.mean())).sum() / (n - 1)), n))
    return MomentTable(rows, provenance="sample", groups={g.name: g for g in groups}, skipped=skipped)


def population_moment_table(config: DgpConfig, groups: Sequence[GroupDef] | dict,
                            rows: Sequence[tuple] | None = None, years: Iterable[int] | None = None,
                            min_gap: int = 0, engine: Engine | None = None) -> MomentTable:
    """Exact model-implied MomentTable.

    `groups` is a list of GroupDef or a dict name -> selector accepted by
    population_autocov (cohort, list of cohorts, dict).  With `rows` absent,
    every admissible (group, t, t2) over `years` (default: observed years) is
    emitted.  n holds expected counts.
    """
    eng = engine or Engine(config)
    if isinstance(groups, dict):
        sel = dict(groups)
        gdefs = {}
    else:
        sel = {g.name: g for g in groups}
        gdefs = dict(sel)
    if rows is None:
        ys = config.obs_years if years is None else np.asarray(sorted(years))
        rows = []
        for name, g in sel.items():
            for t in ys:
                for t2 in ys:
                    if t2 > t or t - t2 < min_gap:
                        continue
                    if isinstance(g, GroupDef) and not g.allows(t, t2):
                        continue
                    rows.append((name, int(t), int(t2)))
    out = []
    for name, t, t2 in rows:
        try:
            cov, n = population_pair(config, sel[name], t, t2, eng)
        except ValueError:
            continue
        out.append((name, t, t2, cov, n))
    return MomentTable(out, provenance="population", groups=gdefs)


def quartile_prediction(res: ResidualPanel, base_year: int, horizons: Sequence[int],
                        group=None) -> pd.DataFrame:
    """Mean residual by base-year residual quartile at each horizon.

    Quartile cut points are empirical (linear interpolation) quartiles of
    base-year residuals; values equal to a cut point fall in the lower
    quartile.  Cells with no persons give NaN.
    """
    w = res.wide()
    years = list(w["years"])
    if base_year not in years:
        raise MomentError(f"base year {base_year} not in panel")
    mask = _group_mask(w, group, base_year)
    R = w["resid"][mask]
    x = R[:, years.index(base_year)]
    have = ~np.isnan(x)
    if not have.any():
        raise MomentError(f"base year {base_year} has no observations")
    cuts = np.quantile(x[have], [0.25, 0.5, 0.75])
    q = np.full(len(x), -1)
    q[have] = np.searchsorted(cuts, x[have], side="left")
    out = []
    for h in horizons:
        ty = base_year + h
        for k in range(4):
            sel = q == k
            if ty in years:
                v = R[sel, years.index(ty)]
                v = v[~np.isnan(v)]
            else:
                v = np.array([])
            out.append({"quartile": k + 1, "horizon": h, "mean": v.mean() if len(v) else np.nan,
                        "n": len(v), "se": v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else np.nan})
    return pd.DataFrame(out)


def _contribution_plan(res: ResidualPanel, table: MomentTable, center: bool):
    w = res.wide()
    col = {y: k for k, y in enumerate(w["years"])}
    R = w["resid"]
    n = R.shape[0]
    masks, cols, means = [], [], []
    cache: dict = {}
    for g, t, t2 in table.keys():
        gd = table.groups.get(g)
        if gd is None:
            try:
                gd = GroupDef(g, cohorts=(int(g), int(g)))
            except ValueError:
                gd = None
        key = (g, t)
        if key not in cache:
            cache[key] = _group_mask(w, gd, t) if gd is not None else np.ones(n, bool)
        a, b = R[:, col[t]], R[:, col[t2]]
        ok = cache[key] & ~np.isnan(a) & ~np.isnan(b)
        masks.append(key)
        cols.append((col[t], col[t2]))
        means.append((a[ok].mean(), b[ok].mean()) if center and ok.any() else (0.0, 0.0))
    return R, cache, masks, np.array(cols, int).reshape(-1, 2), np.array(means, float).reshape(-1, 2)


def iter_person_contributions(res: ResidualPanel, table: MomentTable, center: bool = True,
                              chunk: int = 4000):
    """Yield (products, indicators) for consecutive blocks of persons.

    Same content as person_contributions without holding the full
    persons x moments matrix.
    """
    R, cache, masks, cols, means = _contribution_plan(res, table, center)
    n = R.shape[0]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        A = R[lo:hi][:, cols[:, 0]] - means[:, 0]
        B = R[lo:hi][:, cols[:, 1]] - means[:, 1]
        M = np.column_stack([cache[k][lo:hi] for k in masks]) if masks else np.zeros((hi - lo, 0), bool)
        D = M & ~np.isnan(A) & ~np.isnan(B)
        yield np.where(D, A * B, 0.0), D


def person_contributions(res: ResidualPanel, table: MomentTable, center: bool = True):
    """Per-person moment contributions d_im * (w_it - mean_t)(w_it2 - mean_t2).

    Returns (products n_persons x M, indicator d n_persons x M).  Means are
    taken over the persons contributing to each moment.  Group names absent
    from ``table.groups`` are read as single entry cohorts when numeric.
    """
    parts = list(iter_person_contributions(res, table, center, chunk=10 ** 9))
    return parts[0] if parts else (np.zeros((0, len(table))), np.zeros((0, len(table)), bool))


# ---------------------------------------------------------------------------
# occupation-transition moments

def _occ_group(a, b, t) -> str:
    return f"{a}|{b}@{t}"


def population_occupation_tables(config: DgpConfig, k: int, years: Iterable[int] | None = None,
                                 engine: Engine | None = None, min_prob: float = 1e-12):
    """Moments conditional on (o_t, o_{t-1}) = (a, b) implied by the model.

    Returns (MomentTable, means) where the table has groups ``"a|b@t"`` with
    rows (t, t2) and (t-1, t2) for the latest lag t2 <= t-1-k, and `means`
    holds E[w | a, b] in t and t-1.
    """
    eng = engine or Engine(config)
    occs = list(config.occupation.occupations)
    ys = [int(y) for y in (config.obs_years if years is None else years)]
    rows, means = [], []
    for t in ys:
        if t - 1 not in ys:
            continue
        lags = [s for s in ys if s <= t - 1 - k]
        if not lags:
            continue
        t2 = max(lags)
        for ia, a in enumerate(occs):
            for ib, b in enumerate(occs):
                sel = {"occ": {t: ia, t - 1: ib}}
                try:
                    c1, n1 = population_pair(config, sel, t, t2, eng)
                    c0, n0 = population_pair(config, sel, t - 1, t2, eng)
                except ValueError:
                    continue
                if n1 < min_prob:
                    continue
                name = _occ_group(a, b, t)
                rows += [(name, t, t2, c1, n1), (name, t - 1, t2, c0, n0)]
                means += [(name, t, population_mean(config, sel, t, eng)),
                          (name, t - 1, population_mean(config, sel, t - 1, eng))]
    return (MomentTable(rows, provenance="population"),
            pd.DataFrame(means, columns=["group", "year", "mean"]))


def occupation_tables(res: ResidualPanel, k: int, years: Iterable[int] | None = None,
                      min_count: int = 20):
    """Sample analogue of population_occupation_tables from residuals with occupations."""
    w = res.wide()
    if w.get("occ") is None:
        raise MomentError("residual panel has no occupation column")
    R, O = w["resid"], w["occ"]
    allys = [int(y) for y in w["years"]]
    ys = allys if years is None else [y for y in allys if y in set(years)]
    col = {y: i for i, y in enumerate(allys)}
    rows, means = [], []
    for t in ys:
        if t - 1 not in col:
            continue
        lags = [s for s in allys if s <= t - 1 - k]
        if not lags:
            continue
        t2 = max(lags)
        i1, i0, i2 = col[t], col[t - 1], col[t2]
        ok = ~np.isnan(R[:, i1]) & ~np.isnan(R[:, i0]) & ~np.isnan(R[:, i2])
        oa, ob = O[:, i1], O[:, i0]
        pairs = {(x, y) for x, y in zip(oa[ok], ob[ok]) if x is not None and y is not None}
        for a, b in sorted(pairs, key=str):
            msk = ok & (oa == a) & (ob == b)
            n = int(msk.sum())
            if n < max(min_count, 2):
                continue
            name = _occ_group(a, b, t)
            c1, _ = _pair_cov(R[msk, i1], R[msk, i2])
            c0, _ = _pair_cov(R[msk, i0], R[msk, i2])
            rows += [(name, t, t2, c1, n), (name, t - 1, t2, c0, n)]
            means += [(name, t, float(R[msk, i1].mean())), (name, t - 1, float(R[msk, i0].mean()))]
    return (MomentTable(rows, provenance="sample"),
            pd.DataFrame(means, columns=["group", "year", "mean"]))

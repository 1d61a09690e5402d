"""Worker panels, wage trimming and cell-wise residualization."""
from __future__ import annotations

import io
import re
import warnings
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

COLUMNS = ["person_id", "year", "cohort", "educ", "race", "exper", "occ",
           "firm", "logw", "tscore"]
OPTIONAL = ("occ", "firm", "tscore")
REAL_FMT = "%.12g"

# accepted header spellings for each canonical column
_ALIASES = {
    "person_id": ("person_id", "id", "pid", "person"),
    "year": ("year", "t"),
    "cohort": ("cohort", "c", "entry"),
    "educ": ("educ", "education", "education_group"),
    "race": ("race", "race_group"),
    "exper": ("exper", "experience", "e"),
    "occ": ("occ", "occupation", "occupation_id"),
    "firm": ("firm", "firm_id"),
    "logw": ("logw", "log_wage", "lnw"),
    "tscore": ("tscore", "test_score"),
}


class PanelError(ValueError):
    """Invalid panel input or a request the panel cannot serve."""


class MissingColumnError(PanelError):
    def __init__(self, column: str, what: str = "operation"):
        super().__init__(f"column '{column}' is required by {what} but is missing")
        self.column = column


@dataclass(frozen=True)
class PanelObservation:
    person_id: int
    year: int
    cohort: int
    educ: str
    race: str
    exper: int
    logw: float
    occ: str | None = None
    firm: int | None = None
    tscore: float | None = None


def _empty_frame() -> pd.DataFrame:
    return pd.DataFrame({
        "person_id": pd.Series([], dtype="int64"),
        "year": pd.Series([], dtype="int64"),
        "cohort": pd.Series([], dtype="int64"),
        "educ": pd.Series([], dtype="object"),
        "race": pd.Series([], dtype="object"),
        "exper": pd.Series([], dtype="int64"),
        "occ": pd.Series([], dtype="object"),
        "firm": pd.Series([], dtype="Int64"),
        "logw": pd.Series([], dtype="float64"),
        "tscore": pd.Series([], dtype="float64"),
    })


def _normalize(df: pd.DataFrame) -> pd.DataFrame:
    out = _empty_frame() if len(df) == 0 else pd.DataFrame(index=df.index)
    n = len(df)
    if n == 0:
        return out
    out["person_id"] = df["person_id"].astype("int64")
    out["year"] = df["year"].astype("int64")
    if "cohort" not in df and "exper" not in df:
        raise PanelError("either cohort or exper is required")
    if "cohort" in df:
        out["cohort"] = df["cohort"].astype("int64")
    else:
        out["cohort"] = out["year"] - df["exper"].astype("int64")
    out["educ"] = df["educ"].astype(str) if "educ" in df else "all"
    out["race"] = df["race"].astype(str) if "race" in df else "0"
    if "exper" in df:
        out["exper"] = df["exper"].astype("int64")
    else:
        out["exper"] = out["year"] - out["cohort"]
    out["occ"] = df["occ"].astype(object).where(df["occ"].notna(), None) if "occ" in df else None
    out["firm"] = df["firm"].astype("Int64") if "firm" in df else pd.array([pd.NA] * n, dtype="Int64")
    out["logw"] = df["logw"].astype("float64")
    out["tscore"] = df["tscore"].astype("float64") if "tscore" in df else np.nan
    return out.reset_index(drop=True)


def _validate(df: pd.DataFrame, lines: np.ndarray | None = None) -> None:
    def where(mask):
        i = int(np.flatnonzero(mask)[0])
        return f"line {int(lines[i])}" if lines is not None else f"row {i}"

    bad = (df["exper"] != df["year"] - df["cohort"]).to_numpy()
    if bad.any():
        raise PanelError(f"experience inconsistent with year - cohort at {where(bad)}")
    bad = (df["exper"] < 1).to_numpy()
    if bad.any():
        raise PanelError(f"experience < 1 at {where(bad)}")
    bad = ~np.isfinite(df["logw"].to_numpy())
    if bad.any():
        raise PanelError(f"non-finite log wage at {where(bad)}")
    dup = df.duplicated(["person_id", "year"]).to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise PanelError(
            f"duplicate (person, year) = ({df['person_id'].iat[i]}, {df['year'].iat[i]}) at {where(dup)}")


class Panel:
    """Immutable collection of worker-year observations.

    Backed by a DataFrame with the canonical columns; operations return new
    panels rather than mutating.
    """

    def __init__(self, df: pd.DataFrame, validate: bool = True, _lines=None):
        frame = _normalize(df)
        if validate:
            _validate(frame, _lines)
        self._df = frame

    @classmethod
    def from_records(cls, records: Sequence[PanelObservation | dict]) -> "Panel":
        rows = [r.__dict__ if isinstance(r, PanelObservation) else dict(r) for r in records]
        return cls(pd.DataFrame(rows) if rows else _empty_frame())

    @property
    def df(self) -> pd.DataFrame:
        return self._df.copy()

    @property
    def frame(self) -> pd.DataFrame:
        # read-only by convention; avoids a copy on hot paths
        return self._df

    def __len__(self) -> int:
        return len(self._df)

    def __repr__(self) -> str:
        return f"Panel(n_obs={len(self)}, n_persons={self._df['person_id'].nunique()})"

    def observations(self) -> Iterator[PanelObservation]:
        for r in self._df.itertuples(index=False):
            yield PanelObservation(
                person_id=int(r.person_id), year=int(r.year), cohort=int(r.cohort),
                educ=r.educ, race=r.race, exper=int(r.exper), logw=float(r.logw),
                occ=r.occ, firm=None if pd.isna(r.firm) else int(r.firm),
                tscore=None if pd.isna(r.tscore) else float(r.tscore))

    @property
    def years(self) -> np.ndarray:
        return np.sort(self._df["year"].unique())

    def has(self, column: str) -> bool:
        if column not in OPTIONAL:
            return column in self._df
        col = self._df[column]
        return bool(col.notna().any())

    def require(self, column: str, what: str = "operation") -> None:
        if not self.has(column):
            raise MissingColumnError(column, what)

    def subset(self, mask) -> "Panel":
        return Panel(self._df.loc[np.asarray(mask)], validate=False)

    def equals(self, other: "Panel", sig: int = 12) -> bool:
        """Field-by-field equality, reals compared at `sig` significant digits."""
        a = self._df.sort_values(["person_id", "year"]).reset_index(drop=True)
        b = other.frame.sort_values(["person_id", "year"]).reset_index(drop=True)
        if len(a) != len(b):
            return False
        for c in ("person_id", "year", "cohort", "exper"):
            if not np.array_equal(a[c].to_numpy(), b[c].to_numpy()):
                return False
        for c in ("educ", "race"):
            if not (a[c].astype(str).to_numpy() == b[c].astype(str).to_numpy()).all():
                return False
        oa = a["occ"].map(lambda v: None if v is None or (isinstance(v, float) and np.isnan(v)) else str(v))
        ob = b["occ"].map(lambda v: None if v is None or (isinstance(v, float) and np.isnan(v)) else str(v))
        if list(oa) != list(ob):
            return False
        if not a["firm"].equals(b["firm"]):
            return False
        for c in ("logw", "tscore"):
            x, y = a[c].to_numpy(float), b[c].to_numpy(float)
            if not np.array_equal(np.isnan(x), np.isnan(y)):
                return False
            m = ~np.isnan(x)
            if not np.allclose(x[m], y[m], rtol=10.0 ** (1 - sig), atol=0):
                return False
        return True


# ---------------------------------------------------------------------------
# text IO

def _format_frame(df: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    out = pd.DataFrame(index=df.index)
    for c in columns:
        s = df[c]
        if c in ("logw", "tscore", "resid") or s.dtype.kind == "f":
            v = s.to_numpy(dtype=float)
            out[c] = [("" if np.isnan(x) else REAL_FMT % x) for x in v]
        elif c == "firm":
            out[c] = ["" if pd.isna(x) else str(int(x)) for x in s]
        else:
            out[c] = ["" if x is None or (isinstance(x, float) and np.isnan(x)) else str(x) for x in s]
    return out


def write_panel(panel: Panel, path, sep: str = ",") -> None:
    """Write the canonical delimited format (header + one row per observation)."""
    df = panel.frame.sort_values(["person_id", "year"]) if len(panel) else panel.frame
    text = _format_frame(df, COLUMNS)
    text.to_csv(path, sep=sep, index=False, lineterminator="\n")


def load_panel(source, schema: dict | None = None, sep: str = ",") -> Panel:
    """Load a delimited text panel.

    `source` is a path, a file object or a string of CSV text. `schema` maps
    canonical column names to header names in the file; otherwise common
    spellings are recognised. Empty fields are missing values.
    """
    if isinstance(source, str) and ("\n" in source) and not source.endswith((".csv", ".txt")):
        source = io.StringIO(source)
    elif isinstance(source, (str, PathLike)):
        source = open(source, "r", encoding="utf-8")
    try:
        raw = pd.read_csv(source, sep=sep, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        m = re.search(r"line (\d+)", str(exc))
        line = m.group(1) if m else "?"
        raise PanelError(f"malformed row at line {line}: {exc}") from exc
    headers = {h.strip(): h for h in raw.columns}
    colmap = {}
    for canon, aliases in _ALIASES.items():
        names = (schema[canon],) if schema and canon in schema else aliases
        for a in names:
            if a in headers:
                colmap[canon] = headers[a]
                break
    for req in ("person_id", "year", "logw"):
        if req not in colmap:
            raise PanelError(f"required column '{req}' not found in header")
    if "cohort" not in colmap and "exper" not in colmap:
        raise PanelError("required column 'cohort' (or 'exper') not found in header")

    lines = np.arange(len(raw)) + 2  # header is line 1
    data = {}
    for canon, col in colmap.items():
        s = raw[col].str.strip()
        if canon in ("person_id", "year", "cohort", "exper", "firm"):
            empty = s == ""
            if canon != "firm" and empty.any():
                i = int(np.flatnonzero(empty.to_numpy())[0])
                raise PanelError(f"malformed row at line {lines[i]}: empty {canon}")
            vals = pd.to_numeric(s.where(~empty), errors="coerce")
            bad = vals.isna() & ~empty
            if bad.any() or (vals.dropna() % 1 != 0).any():
                i = int(np.flatnonzero((bad | (vals % 1 != 0) & vals.notna()).to_numpy())[0])
                raise PanelError(f"malformed row at line {lines[i]}: bad integer in {canon}")
            data[canon] = vals.astype("Int64") if canon == "firm" else vals.astype("int64")
        elif canon in ("logw", "tscore"):
            empty = s == ""
            if canon == "logw" and empty.any():
                i = int(np.flatnonzero(empty.to_numpy())[0])
                raise PanelError(f"malformed row at line {lines[i]}: empty logw")
            vals = pd.to_numeric(s.where(~empty), errors="coerce")
            bad = vals.isna() & ~empty
            if bad.any():
                i = int(np.flatnonzero(bad.to_numpy())[0])
                raise PanelError(f"malformed row at line {lines[i]}: bad real in {canon}")
            data[canon] = vals.astype(float)
        else:
            data[canon] = s.where(s != "", None) if canon == "occ" else s
    df = pd.DataFrame(data)
    if "cohort" in df and "exper" not in df:
        df["exper"] = df["year"] - df["cohort"]
    return Panel(df, _lines=lines)


# ---------------------------------------------------------------------------
# trimming

def _cell_keys(df: pd.DataFrame, cells: Sequence[str]) -> list[str]:
    keys = []
    for c in cells:
        if c == "exper10":
            if "exper10" not in df:
                df["exper10"] = (df["exper"] - 1) // 10
        elif c not in df:
            raise MissingColumnError(c, "cell definition")
        keys.append(c)
    return keys


def trim_bounds(panel: Panel, lower: float, upper: float,
                cells: Sequence[str] = ("year", "educ", "exper10")) -> pd.DataFrame:
    """Per-cell lower/upper log-wage cutoffs (linear-interpolation quantiles)."""
    if not (0 <= lower < 0.5 and 0 <= upper < 0.5):
        raise PanelError("trim fractions must satisfy 0 <= lower, upper < 0.5")
    df = panel.df
    keys = _cell_keys(df, cells)
    g = df.groupby(keys, sort=True)["logw"]
    lo = g.quantile(lower, interpolation="linear")
    hi = g.quantile(1.0 - upper, interpolation="linear")
    return pd.DataFrame({"lo": lo, "hi": hi})


def apply_trim_bounds(panel: Panel, bounds: pd.DataFrame,
                      cells: Sequence[str] = ("year", "educ", "exper10")) -> Panel:
    """Drop observations strictly outside the given per-cell cutoffs (ties kept)."""
    df = panel.df
    keys = _cell_keys(df, cells)
    b = bounds.reset_index()
    m = df.merge(b, on=keys, how="left")
    keep = ~((m["logw"] < m["lo"]) | (m["logw"] > m["hi"]))
    out = df.loc[keep.to_numpy()].drop(columns=[c for c in ("exper10",) if c in df])
    before = df.groupby(keys).size()
    after = df.loc[keep.to_numpy()].groupby(keys).size()
    emptied = before.index.difference(after.index)
    if len(emptied):
        warnings.warn(f"{len(emptied)} cell(s) empty after trimming; dropped", stacklevel=2)
    return Panel(out, validate=False)


def trim_wages(panel: Panel, lower: float = 0.01, upper: float = 0.01,
               cells: Sequence[str] = ("year", "educ", "exper10")) -> Panel:
    """Remove log wages strictly below/above the cell quantiles.

    Quantiles use linear interpolation; observations equal to a cutoff are
    retained. lower = upper = 0 leaves the panel unchanged.
    """
    if len(panel) == 0:
        return panel
    bounds = trim_bounds(panel, lower, upper, cells)
    return apply_trim_bounds(panel, bounds, cells)


# ---------------------------------------------------------------------------
# residualization

_TERM_RE = re.compile(r"^(C\((\w+)\)|(\w+)(\^(\d+))?|1)$")


@dataclass
class ResidualizeSpec:
    """Cell partition and regressor recipe for the first-stage wage regression.

    Regressors are written as terms: ``"1"`` (intercept), ``"exper"`` or
    ``"exper^2"`` (powers of a numeric column), ``"C(race)"`` (indicators,
    first level dropped) and ``":"``-joined products such as
    ``"C(race):exper^3"``.
    """
    cells: tuple = ("year", "educ")
    regressors: tuple = ("1", "C(exper)", "C(race)",
                         "C(race):exper", "C(race):exper^2", "C(race):exper^3")
    min_cell_size: int | None = None
    on_small: str = "skip"          # "skip" (warn) or "error"
    rank_tol: float = 1e-10


def _factor_columns(df: pd.DataFrame, term: str) -> tuple[list[str], np.ndarray]:
    parts = term.split(":")
    names, cols = [""], [np.ones(len(df))]
    for p in parts:
        m = _TERM_RE.match(p.strip())
        if not m:
            raise PanelError(f"cannot parse regressor term '{p}'")
        if m.group(1) == "1":
            new_names, new_cols = ["1"], [np.ones(len(df))]
        elif m.group(2):
            col = m.group(2)
            if col not in df:
                raise MissingColumnError(col, "residualize")
            levels = sorted(df[col].dropna().unique(), key=lambda v: (str(type(v)), v))
            v = df[col].to_numpy()
            new_names = [f"{col}[{lv}]" for lv in levels[1:]]
            new_cols = [(v == lv).astype(float) for lv in levels[1:]]
        else:
            col, power = m.group(3), int(m.group(5) or 1)
            if col not in df:
                raise MissingColumnError(col, "residualize")
            new_names = [col if power == 1 else f"{col}^{power}"]
            new_cols = [df[col].to_numpy(dtype=float) ** power]
        names = [":".join(x for x in (a, b) if x) for a in names for b in new_names]
        cols = [a * b for a in cols for b in new_cols]
    return names, (np.column_stack(cols) if cols else np.empty((len(df), 0)))


def design_matrix(df: pd.DataFrame, regressors: Sequence[str]) -> tuple[list[str], np.ndarray]:
    names, blocks = [], []
    for term in regressors:
        n, x = _factor_columns(df, term)
        names += n
        blocks.append(x)
    if not blocks:
        return [], np.empty((len(df), 0))
    return names, np.column_stack(blocks)


def ols_drop_collinear(X: np.ndarray, y: np.ndarray, tol: float = 1e-10):
    """OLS with collinear columns dropped in input order.

    Uses an unpivoted QR: |R_jj| measures the part of column j orthogonal to
    the columns before it, so a small value means j is redundant.
    Returns (coef over kept columns, kept index, dropped index, residual).
    """
    n, p = X.shape
    if p == 0:
        return np.empty(0), np.array([], int), np.array([], int), y.copy()
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    keep = []
    Q = np.empty((n, 0))
    for j in range(p):
        v = Xs[:, j] - Q @ (Q.T @ Xs[:, j])
        v = v - Q @ (Q.T @ v)   # re-orthogonalise
        nv = np.linalg.norm(v)
        if nv > tol * np.sqrt(n) and nv > 1e-8:
            keep.append(j)
            Q = np.column_stack([Q, v / nv])
    keep = np.array(keep, int)
    dropped = np.setdiff1d(np.arange(p), keep)
    Xk = X[:, keep]
    q, r = np.linalg.qr(Xk)
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - Xk @ coef
    # one refinement step keeps orthogonality at the 1e-12 level
    coef2 = np.linalg.solve(r, q.T @ resid)
    coef = coef + coef2
    resid = y - Xk @ coef
    return coef, keep, dropped, resid


@dataclass
class CellFit:
    key: tuple
    n: int
    p: int
    rank: int
    r2: float
    dropped: list = field(default_factory=list)


class ResidualPanel:
    """Log-wage residuals keyed by (person_id, year) with grouping labels.

    Holds a long frame (`frame`) and lazily a wide person x year matrix used
    by the moment and estimation code.
    """

    def __init__(self, frame: pd.DataFrame | None, cells: dict | None = None, _wide=None):
        self._frame = frame
        self.cells = cells or {}
        self._wide = _wide

    @classmethod
    def from_wide(cls, person_id, years, resid, cohort=None, occ=None, firm=None,
                  educ=None):
        """Build directly from a persons x years array (NaN = unobserved)."""
        person_id = np.asarray(person_id, dtype=np.int64)
        years = np.asarray(years, dtype=np.int64)
        resid = np.asarray(resid, dtype=float)
        wide = {"person_id": person_id, "years": years, "resid": resid,
                "cohort": None if cohort is None else np.asarray(cohort, dtype=np.int64),
                "occ": occ, "firm": firm,
                "educ": None if educ is None else np.asarray(educ)}
        return cls(None, {}, _wide=wide)

    @classmethod
    def raw(cls, panel: Panel) -> "ResidualPanel":
        """Use log wages as residuals without any regression."""
        df = panel.df
        df["resid"] = df["logw"]
        return cls(df)

    @property
    def frame(self) -> pd.DataFrame:
        if self._frame is None:
            self._frame = self._long_from_wide()
        return self._frame

    def _long_from_wide(self) -> pd.DataFrame:
        w = self._wide
        R = w["resid"]
        ii, jj = np.nonzero(~np.isnan(R))
        years = w["years"][jj]
        df = pd.DataFrame({"person_id": w["person_id"][ii], "year": years})
        if w["cohort"] is not None:
            df["cohort"] = w["cohort"][ii]
            df["exper"] = years - df["cohort"].to_numpy()
        df["educ"] = "all" if w.get("educ") is None else w["educ"][ii]
        if w.get("occ") is not None:
            df["occ"] = w["occ"][ii, jj]
        if w.get("firm") is not None:
            df["firm"] = w["firm"][ii, jj]
        df["resid"] = R[ii, jj]
        return df

    def __len__(self) -> int:
        if self._frame is not None:
            return len(self._frame)
        return int((~np.isnan(self._wide["resid"])).sum())

    def wide(self, value: str = "resid") -> dict:
        """Person x year arrays: {'person_id', 'years', 'resid', 'cohort', ...}."""
        if self._wide is None:
            df = self._frame
            pids, pinv = np.unique(df["person_id"].to_numpy(), return_inverse=True)
            years, yinv = np.unique(df["year"].to_numpy(), return_inverse=True)
            R = np.full((len(pids), len(years)), np.nan)
            R[pinv, yinv] = df["resid"].to_numpy(float)
            cohort = None
            if "cohort" in df:
                cohort = np.zeros(len(pids), np.int64)
                cohort[pinv] = df["cohort"].to_numpy()
            educ = None
            if "educ" in df:
                educ = np.empty(len(pids), dtype=object)
                educ[pinv] = df["educ"].to_numpy()
            occ = firm = None
            if "occ" in df and df["occ"].notna().any():
                occ = np.full((len(pids), len(years)), None, dtype=object)
                occ[pinv, yinv] = df["occ"].to_numpy()
            if "firm" in df and df["firm"].notna().any():
                firm = np.full((len(pids), len(years)), -1, dtype=np.int64)
                f = df["firm"].to_numpy()
                ok = pd.notna(f)
                firm[pinv[ok], yinv[ok]] = f[ok].astype(np.int64)
            self._wide = {"person_id": pids, "years": years, "resid": R,
                          "cohort": cohort, "occ": occ, "firm": firm, "educ": educ}
        if value != "resid":
            return {**self._wide, "resid": self._wide[value]}
        return self._wide

    def select(self, mask_persons) -> "ResidualPanel":
        w = self.wide()
        m = np.asarray(mask_persons, bool)
        sub = {k: (v[m] if isinstance(v, np.ndarray) and k not in ("years",) and v.ndim >= 1
                   and v.shape[0] == len(m) else v) for k, v in w.items()}
        return ResidualPanel(None, self.cells, _wide=sub)

    def duplicated(self, offset: int | None = None) -> "ResidualPanel":
        """Every person appears twice (ids shifted for the copy)."""
        w = self.wide()
        off = offset if offset is not None else int(w["person_id"].max()) + 1
        dup = {}
        for k, v in w.items():
            if k == "years" or v is None:
                dup[k] = v
            elif k == "person_id":
                dup[k] = np.concatenate([v, v + off])
            else:
                dup[k] = np.concatenate([v, v], axis=0)
        return ResidualPanel(None, self.cells, _wide=dup)

    def to_csv(self, path, sep: str = ",") -> None:
        df = self.frame.copy()
        for c in COLUMNS:
            if c not in df:
                df[c] = np.nan if c in ("logw", "tscore") else None
        if "cohort" in df and df["exper"].isna().any():
            df["exper"] = df["year"] - df["cohort"]
        text = _format_frame(df.sort_values(["person_id", "year"]), COLUMNS + ["resid"])
        text.to_csv(path, sep=sep, index=False, lineterminator="\n")


def residualize(panel: Panel, spec: ResidualizeSpec | None = None) -> ResidualPanel:
    """Cell-wise OLS of log wages on the regressor recipe; residual = observed - fitted."""
    spec = spec or ResidualizeSpec()
    df = panel.df
    keys = _cell_keys(df, spec.cells)
    out, cells, skipped = [], {}, []
    for key, sub in df.groupby(keys, sort=True):
        key = key if isinstance(key, tuple) else (key,)
        names, X = design_matrix(sub, spec.regressors)
        n, p = X.shape
        min_n = spec.min_cell_size if spec.min_cell_size is not None else p + 5
        if n < min_n or n <= p:
            if spec.on_small == "error":
                raise PanelError(f"cell {key} has {n} observations; need at least {max(min_n, p + 1)}")
            skipped.append(key)
            continue
        y = sub["logw"].to_numpy(float)
        coef, keep, dropped, resid = ols_drop_collinear(X, y, spec.rank_tol)
        tss = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else np.nan
        cells[key] = CellFit(key, n, p, len(keep), r2, [names[j] for j in dropped])
        part = sub.copy()
        part["resid"] = resid
        out.append(part)
    if skipped:
        warnings.warn(f"skipped {len(skipped)} cell(s) below minimum size: {skipped[:5]}", stacklevel=2)
    frame = pd.concat(out, ignore_index=True) if out else df.iloc[:0].assign(resid=np.array([], float))
    frame = frame.drop(columns=[c for c in ("exper10",) if c in frame])
    return ResidualPanel(frame, cells)


def load_residuals(path, sep: str = ",") -> ResidualPanel:
    raw = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False)
    if "resid" not in raw:
        raise PanelError("residual file needs a 'resid' column")
    resid = pd.to_numeric(raw["resid"].replace("", np.nan))
    pan = load_panel(io.StringIO(raw.drop(columns=["resid"]).to_csv(index=False)), sep=",")
    df = pan.df
    df["resid"] = resid.to_numpy(float)
    return ResidualPanel(df)

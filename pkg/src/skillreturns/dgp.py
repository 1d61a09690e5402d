"""Synthetic worker panels and exact model-implied autocovariances.

Every latent process is written as a linear map from independent standard
normal primitives to per-year latent values.  The same loading matrices drive
both the simulator and the analytic covariance engine, so simulated and
population moments are consistent by construction.

Timing convention: a cohort ``c`` enters the labour market in year ``c`` and
is first observed in ``c + 1`` (experience 1).  Skill innovations, shock
innovations and the first job all start in ``c + 1``; AR states are zero in
year ``c``.

Seeding: draws for person ``pid`` come from row ``pid % 4096`` of a block
generated by ``SeedSequence(seed, spawn_key=(component, pid // 4096))``, so a
person's draws depend only on (seed, pid, config) and never on how persons
are split among workers.
"""
from __future__ import annotations

import copy
import itertools
import json
from dataclasses import asdict, dataclass, field, is_dataclass
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from .panel import Panel, ResidualPanel, write_panel

BLOCK = 4096
_COMP = {"theta": 1, "eps": 2, "kappa": 3, "stay": 4, "occ": 5, "eta": 6, "x": 7}


class ConfigError(ValueError):
    """Invalid DGP configuration; message names the offending field."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


# ---------------------------------------------------------------------------
# schedules: scalars, year/cohort tables, piecewise-linear paths or callables

def schedule(spec) -> Callable:
    """Turn a schedule spec into a vectorized f(t, c).

    Accepted forms: a number; ``{"by_year": {t: v}, "default": v}``;
    ``{"by_cohort": {c: v}, "default": v}``; ``{"linear": [[t0, v0], ...]}``
    (piecewise linear in t, flat outside); ``{"linear_cohort": [...]}``; a
    callable ``f(t, c)`` (called on whole arrays when it has a true
    ``vectorized`` attribute, element-wise otherwise).
    """
    if callable(spec) and getattr(spec, "vectorized", False):
        def fv(t, c=0):
            t, c = np.broadcast_arrays(np.asarray(t), np.asarray(c))
            return np.asarray(spec(t, c), float) * np.ones(t.shape)
        return fv
    if callable(spec):
        def f(t, c=0):
            t, c = np.broadcast_arrays(np.asarray(t), np.asarray(c))
            return np.vectorize(spec, otypes=[float])(t, c)
        return f
    if isinstance(spec, (int, float, np.floating, np.integer)):
        v = float(spec)
        return lambda t, c=0: np.broadcast_to(np.float64(v), np.broadcast(np.asarray(t), np.asarray(c)).shape).astype(float)
    if isinstance(spec, dict):
        if "by_year" in spec or "by_cohort" in spec:
            key = "by_year" if "by_year" in spec else "by_cohort"
            table = {int(k): float(v) for k, v in spec[key].items()}
            default = spec.get("default")

            def look(x):
                x = int(x)
                if x in table:
                    return table[x]
                if default is None:
                    raise ConfigError(key, f"no value for {x} and no default")
                return float(default)
            if key == "by_year":
                return lambda t, c=0: np.vectorize(look, otypes=[float])(np.broadcast_arrays(np.asarray(t), np.asarray(c))[0])
            return lambda t, c=0: np.vectorize(look, otypes=[float])(np.broadcast_arrays(np.asarray(t), np.asarray(c))[1])
        if "linear" in spec or "linear_cohort" in spec:
            key = "linear" if "linear" in spec else "linear_cohort"
            pts = np.asarray(spec[key], float)
            xs, ys = pts[:, 0], pts[:, 1]
            if key == "linear":
                return lambda t, c=0: np.interp(np.broadcast_arrays(np.asarray(t, float), np.asarray(c, float))[0], xs, ys)
            return lambda t, c=0: np.interp(np.broadcast_arrays(np.asarray(t, float), np.asarray(c, float))[1], xs, ys)
    raise ConfigError("schedule", f"unrecognised schedule {spec!r}")


def vectorized(fn: Callable) -> Callable:
    """Mark an array-aware schedule callable f(t, c)."""
    fn.vectorized = True
    return fn


def _sched_json(spec):
    if callable(spec):
        return "<callable>"
    return spec


# ---------------------------------------------------------------------------
# processes and layers

@dataclass
class RandomWalk:
    var_psi: Any = 1.0      # by cohort
    var_nu: Any = 0.0       # by (t, c)
    kind: str = "random_walk"


@dataclass
class Hip:
    var_psi: Any = 1.0
    var_delta: Any = 0.0
    cov_psi_delta: Any = 0.0
    lam: Any = 1.0          # lambda_t(c)
    var_nu: Any = 0.0
    kind: str = "hip"


@dataclass
class FeAr1:
    var_psi: Any = 1.0
    rho: Any = 1.0          # by year
    var_nu: Any = 0.0
    kind: str = "fe_ar1"


@dataclass
class MultiSkill:
    """J random-walk skills; theta_j = psi_j + sum of innovations.

    sigma0: J x J covariance of initial skills (or {"by_cohort": ...} of
    matrices via callable); innov: J x J innovation covariance (constant or
    callable t -> matrix); mu_skill: J schedules of skill-specific returns.
    """
    J: int = 1
    sigma0: Any = None
    innov: Any = None
    mu_skill: Any = None
    kind: str = "multi_skill"


@dataclass
class Ma:
    q: int = 0
    beta: Sequence[float] = (1.0,)
    var_xi: Any = 0.0
    kind: str = "ma"


@dataclass
class Ar1PlusMa:
    """eps = AR(1)-with-MA-innovations component + independent MA(q) part."""
    rho: Any = 0.0          # by year
    var_nu: Any = 0.0       # AR innovation variance by (t, c)
    beta: Sequence[float] = (1.0,)
    ma: Ma = field(default_factory=Ma)
    kind: str = "ar1_ma"


@dataclass
class FirmLayer:
    var_kappa: float = 0.0
    stay_prob: Any = 1.0


@dataclass
class OccupationLayer:
    occupations: Sequence[str] = ("o1",)
    gamma: dict | None = None       # occ -> schedule(t)
    mu_occ: dict | None = None      # occ -> schedule(t)
    transition: Any = None          # n x n row-stochastic
    initial: Any = None
    alpha: dict | None = None       # occ -> list of J schedules
    sorting: float = 0.0            # entry choice tilted on initial skill
    switch_on_shock: float = 0.0    # transitions tilted on skill innovation


@dataclass
class TestLayer:
    tau: float = 1.0
    var_eta: float = 0.0
    years: Sequence[int] | None = None


@dataclass
class DgpConfig:
    years: tuple = (1, 30)
    cohorts: Sequence[int] = (0,)
    n_per_cohort: Any = 1000
    mu: Any = 1.0
    t_star: int | None = None
    skill: Any = field(default_factory=RandomWalk)
    shock: Any = field(default_factory=Ma)
    firm: FirmLayer | None = None
    occupation: OccupationLayer | None = None
    test: TestLayer | None = None
    k: int = 1
    observed_years: Sequence[int] | None = None
    min_exper: int = 1
    max_exper: int | None = None
    educ_shares: dict = field(default_factory=lambda: {"all": 1.0})
    race_shares: dict = field(default_factory=lambda: {"0": 1.0})
    fpart: dict = field(default_factory=dict)

    # ----- derived helpers
    @property
    def t_lo(self) -> int:
        return int(self.years[0])

    @property
    def t_hi(self) -> int:
        return int(self.years[1])

    @property
    def obs_years(self) -> np.ndarray:
        if self.observed_years is not None:
            return np.array(sorted(int(y) for y in self.observed_years))
        return np.arange(self.t_lo, self.t_hi + 1)

    @property
    def cohort_list(self) -> np.ndarray:
        return np.array(sorted(int(c) for c in self.cohorts))

    def n_cohort(self, c: int) -> int:
        n = self.n_per_cohort
        if isinstance(n, dict):
            return int(n.get(c, n.get(str(c), 0)))
        return int(n)

    def observed(self, c: int, t) -> np.ndarray:
        e = np.asarray(t) - c
        ok = e >= max(self.min_exper, 1)
        if self.max_exper is not None:
            ok &= e <= self.max_exper
        return ok & np.isin(t, self.obs_years)

    def replace(self, **kw) -> "DgpConfig":
        new = copy.copy(self)
        for k, v in kw.items():
            setattr(new, k, v)
        return new

    def validate(self) -> None:
        if self.t_hi < self.t_lo:
            raise ConfigError("years", "t_hi < t_lo")
        if self.k < 1:
            raise ConfigError("k", "must be >= 1")
        if len(self.cohort_list) == 0:
            raise ConfigError("cohorts", "no cohorts")
        yrs = np.arange(self.cohort_list.min() + 1, self.t_hi + 1)
        mu = schedule(self.mu)(yrs, 0)
        if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
            raise ConfigError("mu", "skill returns must be positive")
        s = self.skill
        for c in self.cohort_list:
            cy = yrs[yrs > c]
            for name in ("var_psi", "var_nu", "var_delta"):
                if hasattr(s, name):
                    v = schedule(getattr(s, name))(cy if name == "var_nu" else c, c)
                    if np.any(np.asarray(v) < 0):
                        raise ConfigError(f"skill.{name}", "variance must be >= 0")
            if isinstance(s, Hip):
                vp = float(schedule(s.var_psi)(0, c))
                vd = float(schedule(s.var_delta)(0, c))
                cpd = float(schedule(s.cov_psi_delta)(0, c))
                if abs(cpd) > np.sqrt(vp * vd) + 1e-12:
                    raise ConfigError("skill.cov_psi_delta", "exceeds sqrt(var_psi*var_delta)")
                if np.any(schedule(s.lam)(cy, c) < 0):
                    raise ConfigError("skill.lam", "lambda must be >= 0")
        if isinstance(s, MultiSkill):
            for name in ("sigma0", "innov"):
                m = _as_matrix_fn(getattr(s, name), s.J)
                for t in (yrs[0], yrs[-1]):
                    A = m(t)
                    if not np.allclose(A, A.T) or np.linalg.eigvalsh(A).min() < -1e-12:
                        raise ConfigError(f"skill.{name}", "must be symmetric PSD")
        sh = self.shock
        ma = sh.ma if isinstance(sh, Ar1PlusMa) else sh
        if ma.q < 0 or len(ma.beta) != ma.q + 1 or abs(ma.beta[0] - 1.0) > 0:
            raise ConfigError("shock.beta", "need q+1 coefficients with beta_0 = 1")
        if np.any(schedule(ma.var_xi)(yrs, 0) < 0):
            raise ConfigError("shock.var_xi", "variance must be >= 0")
        if isinstance(sh, Ar1PlusMa):
            if np.any(np.abs(schedule(sh.rho)(yrs, 0)) >= 1):
                raise ConfigError("shock.rho", "|rho_eps| must be < 1")
            if abs(sh.beta[0] - 1.0) > 0:
                raise ConfigError("shock.beta", "beta_0 must be 1")
        if self.firm is not None:
            if self.firm.var_kappa < 0:
                raise ConfigError("firm.var_kappa", "variance must be >= 0")
            p = schedule(self.firm.stay_prob)(yrs, 0)
            if np.any((p < 0) | (p > 1)):
                raise ConfigError("firm.stay_prob", "must be a probability")
        if self.occupation is not None:
            o = self.occupation
            P = _transition(o)
            if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
                raise ConfigError("occupation.transition", "rows must be probabilities summing to 1")
            init = _initial(o)
            if np.any(init < 0) or abs(init.sum() - 1) > 1e-12:
                raise ConfigError("occupation.initial", "must sum to 1")
            for oc in o.occupations:
                m = schedule((o.mu_occ or {}).get(oc, 1.0))(yrs, 0)
                if np.any(m <= 0):
                    raise ConfigError("occupation.mu_occ", f"must be > 0 for {oc}")
        if self.test is not None:
            if self.test.tau <= 0:
                raise ConfigError("test.tau", "must be > 0")
            if self.test.var_eta < 0:
                raise ConfigError("test.var_eta", "must be >= 0")

    # ----- (de)serialisation
    def to_dict(self) -> dict:
        def conv(x):
            if is_dataclass(x):
                return {k: conv(v) for k, v in asdict(x).items()}
            if isinstance(x, dict):
                return {str(k): conv(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [conv(v) for v in x]
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, (np.integer,)):
                return int(x)
            if isinstance(x, (np.floating,)):
                return float(x)
            return _sched_json(x)
        return conv(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        d = dict(d)
        kinds = {"random_walk": RandomWalk, "hip": Hip, "fe_ar1": FeAr1,
                 "multi_skill": MultiSkill, "ma": Ma, "ar1_ma": Ar1PlusMa}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config key")

        def build(sub, default_kind, name):
            if sub is None:
                return kinds[default_kind]()
            sub = dict(sub)
            kind = sub.pop("kind", default_kind)
            if kind not in kinds:
                raise ConfigError(f"{name}.kind", f"unknown process '{kind}'")
            klass = kinds[kind]
            if kind == "ar1_ma" and isinstance(sub.get("ma"), dict):
                m = dict(sub["ma"])
                m.pop("kind", None)
                sub["ma"] = Ma(**m)
            try:
                return klass(**sub)
            except TypeError as exc:
                raise ConfigError(name, str(exc)) from None

        d["skill"] = build(d.get("skill"), "random_walk", "skill")
        d["shock"] = build(d.get("shock"), "ma", "shock")
        for key, klass in (("firm", FirmLayer), ("occupation", OccupationLayer), ("test", TestLayer)):
            if d.get(key) is not None:
                try:
                    d[key] = klass(**d[key])
                except TypeError as exc:
                    raise ConfigError(key, str(exc)) from None
        if "years" in d:
            d["years"] = tuple(d["years"])
        if isinstance(d.get("cohorts"), dict):
            r = d["cohorts"]
            d["cohorts"] = list(range(int(r["from"]), int(r["to"]) + 1))
        if isinstance(d.get("n_per_cohort"), dict):
            d["n_per_cohort"] = {int(k): int(v) for k, v in d["n_per_cohort"].items()}
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "DgpConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _as_matrix_fn(spec, J: int, default: str = "zero") -> Callable:
    if spec is None:
        A0 = np.eye(J) if default == "eye" else np.zeros((J, J))
        return lambda t, c=0: A0
    if callable(spec):
        return lambda t, c=0: np.asarray(spec(t, c) if spec.__code__.co_argcount > 1 else spec(t), float)
    A = np.asarray(spec, float)
    if A.ndim == 0:
        A = A * np.eye(J)
    return lambda t, c=0: A


def _transition(o: OccupationLayer) -> np.ndarray:
    n = len(o.occupations)
    return np.eye(n) if o.transition is None else np.asarray(o.transition, float)


def _initial(o: OccupationLayer) -> np.ndarray:
    n = len(o.occupations)
    return np.full(n, 1.0 / n) if o.initial is None else np.asarray(o.initial, float)


def _hip_factor(vpsi: float, cpd: float, vd: float) -> np.ndarray:
    """Lower-triangular factor of cov(psi, delta); psi loads on its own draw only."""
    if vpsi <= 0:
        return np.array([[0.0, 0.0], [0.0, np.sqrt(vd)]])
    a = np.sqrt(vpsi)
    b = cpd / a
    return np.array([[a, 0.0], [b, np.sqrt(max(vd - b * b, 0.0))]])


def _psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Factor F with F F' = A for PSD A (lower Cholesky when possible)."""
    A = np.asarray(A, float)
    if A.shape == (1, 1):
        return np.sqrt(np.maximum(A, 0.0))
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(A)
        return V * np.sqrt(np.clip(w, 0, None))


# ---------------------------------------------------------------------------
# loading engine

class Engine:
    """Loading matrices on the latent year grid for every cohort.

    Grid runs from min(cohort) + 1 to t_hi.  theta primitives are laid out
    globally (psi block, delta, then one innovation block per grid year) so
    that simulation draws do not depend on the cohort.
    """

    def __init__(self, config: DgpConfig):
        config.validate()
        self.cfg = config
        self.g0 = int(config.cohort_list.min()) + 1
        self.grid = np.arange(self.g0, config.t_hi + 1)
        self.G = len(self.grid)
        s = config.skill
        self.J = s.J if isinstance(s, MultiSkill) else 1
        self.has_delta = isinstance(s, Hip)
        # theta layout
        self.n_psi = self.J
        self.i_nu = self.n_psi
        # delta sits last so the psi/nu draws line up with the nested random walk
        self.i_delta = self.i_nu + self.J * self.G if self.has_delta else None
        self.K_theta = self.i_nu + self.J * self.G + (1 if self.has_delta else 0)
        # eps layout: MA xi per year, then AR innovations per year
        self.is_ar = isinstance(config.shock, Ar1PlusMa)
        self.K_eps = self.G * (2 if self.is_ar else 1)
        self.mu = schedule(config.mu)(self.grid, 0).astype(float)
        if isinstance(s, MultiSkill):
            if s.mu_skill is None:
                self.mu_skill = np.ones((self.J, self.G))
            else:
                self.mu_skill = np.vstack([schedule(m)(self.grid, 0) for m in s.mu_skill])
        else:
            self.mu_skill = np.ones((1, self.G))
        occ = config.occupation
        self.occ = occ
        if occ is not None:
            self.n_occ = len(occ.occupations)
            self.P = _transition(occ)
            self.init = _initial(occ)
            self.gamma = np.vstack([schedule((occ.gamma or {}).get(o, 0.0))(self.grid, 0)
                                    for o in occ.occupations])
            self.mu_occ = np.vstack([schedule((occ.mu_occ or {}).get(o, 1.0))(self.grid, 0)
                                     for o in occ.occupations])
            al = np.ones((self.n_occ, self.J, self.G))
            if occ.alpha:
                for i, o in enumerate(occ.occupations):
                    if o in occ.alpha:
                        for j, a in enumerate(occ.alpha[o]):
                            al[i, j] = schedule(a)(self.grid, 0)
            self.alpha = al
        else:
            self.n_occ = 1
            self.P = np.eye(1)
            self.init = np.ones(1)
            self.gamma = np.zeros((1, self.G))
            self.mu_occ = np.ones((1, self.G))
            self.alpha = np.ones((1, self.J, self.G))
        self._theta_cache: dict = {}
        self._eps_cache: dict = {}
        self._cov_cache: dict = {}

    def gi(self, t) -> np.ndarray:
        return np.asarray(t) - self.g0

    # theta loadings: shape (J, G, K_theta), rows for years <= c are zero
    def theta_loading(self, c: int) -> np.ndarray:
        if c in self._theta_cache:
            return self._theta_cache[c]
        cfg, s, G = self.cfg, self.cfg.skill, self.G
        M = np.zeros((self.J, G, self.K_theta))
        live = self.grid > c
        if isinstance(s, MultiSkill):
            F0 = _psd_sqrt(_as_matrix_fn(s.sigma0, self.J, "eye")(c + 1, c))
            Q = _as_matrix_fn(s.innov, self.J)
            for j in range(self.J):
                M[j][:, :self.J] = F0[j]
            acc = np.zeros((self.J, self.K_theta))
            for g in range(G):
                if not live[g]:
                    continue
                Fq = _psd_sqrt(Q(self.grid[g], c))
                base = self.i_nu + g * self.J
                acc[:, base:base + self.J] = Fq
                M[:, g, self.J:] = acc[:, self.J:]
            M[:, ~live] = 0.0
            self._theta_cache[c] = M
            return M
        vpsi = float(schedule(s.var_psi)(0, c))
        vnu = schedule(s.var_nu)(self.grid, c)
        sd_nu = np.sqrt(np.where(live, vnu, 0.0))
        if isinstance(s, Hip):
            vd = float(schedule(s.var_delta)(0, c))
            cpd = float(schedule(s.cov_psi_delta)(0, c))
            L = _hip_factor(vpsi, cpd, vd)
            lam = np.where(live, schedule(s.lam)(self.grid, c), 0.0)
            Lam = np.cumsum(lam)
            # theta = psi + Lambda_t delta + sum nu ; (psi, delta) = L (z_psi, z_delta)
            M[0][:, 0] = L[0, 0] + Lam * L[1, 0]
            M[0][:, self.i_delta] = L[0, 1] + Lam * L[1, 1]
            for g in range(G):
                M[0, g:, self.i_nu + g] = sd_nu[g]
        elif isinstance(s, FeAr1):
            rho = schedule(s.rho)(self.grid, 0)
            M[0][:, 0] = np.sqrt(vpsi)
            phi = np.zeros(self.K_theta)
            for g in range(G):
                if not live[g]:
                    continue
                phi = rho[g] * phi
                phi[self.i_nu + g] += sd_nu[g]
                M[0, g, self.i_nu:] = phi[self.i_nu:]
        else:
            M[0][:, 0] = np.sqrt(vpsi)
            for g in range(G):
                M[0, g:, self.i_nu + g] = sd_nu[g]
        M[:, ~live] = 0.0
        self._theta_cache[c] = M
        return M

    def eps_loading(self, c: int) -> np.ndarray:
        if c in self._eps_cache:
            return self._eps_cache[c]
        sh, G = self.cfg.shock, self.G
        ma = sh.ma if self.is_ar else sh
        E = np.zeros((G, self.K_eps))
        live = self.grid > c
        sd_xi = np.sqrt(np.where(live, schedule(ma.var_xi)(self.grid, c), 0.0))
        beta = np.asarray(ma.beta, float)
        for g in range(G):
            if not live[g]:
                continue
            for j, b in enumerate(beta):
                r = g - j
                if r < 0 or not live[r]:
                    break
                E[g, r] += b * sd_xi[r]
        if self.is_ar:
            rho = schedule(sh.rho)(self.grid, 0)
            sd_nu = np.sqrt(np.where(live, schedule(sh.var_nu)(self.grid, c), 0.0))
            ba = np.asarray(sh.beta, float)
            state = np.zeros(self.K_eps)
            for g in range(G):
                if not live[g]:
                    continue
                state = rho[g] * state
                for j, b in enumerate(ba):
                    r = g - j
                    if r < 0 or not live[r]:
                        break
                    state[G + r] += b * sd_nu[r]
                E[g] += state
        self._eps_cache[c] = E
        return E

    def kappa_cov(self, c: int) -> np.ndarray:
        G = self.G
        f = self.cfg.firm
        if f is None or f.var_kappa == 0:
            return np.zeros((G, G))
        stay = schedule(f.stay_prob)(self.grid, 0)
        logs = np.cumsum(np.log(np.clip(stay, 1e-300, None)))
        # cov(kappa_t, kappa_s) = vk * prod_{r=s+1}^{t} stay_r
        D = np.exp(-np.abs(logs[:, None] - logs[None, :]))
        live = self.grid > c
        D = D * f.var_kappa
        D[~live] = 0.0
        D[:, ~live] = 0.0
        return D

    def index_loading(self, c: int) -> np.ndarray:
        """Loadings of the full skill term mu_t * mu_occ * sum_j alpha mu_j theta_j.

        Shape (n_occ, G, K_theta).
        """
        M = self.theta_loading(c)
        w = self.alpha * self.mu_skill[None]             # (n_occ, J, G)
        L = np.einsum("ojg,jgk->ogk", w, M)
        return L * (self.mu[None, :, None] * self.mu_occ[:, :, None])

    # ----- population covariances
    def cohort_cov(self, c: int) -> np.ndarray:
        """Full G x G covariance of w (no occupation conditioning)."""
        if c in self._cov_cache:
            return self._cov_cache[c]
        if self.occ is not None and self.n_occ > 1:
            raise ConfigError("occupation", "use conditional moments with several occupations")
        L = self.index_loading(c)[0]
        E = self.eps_loading(c)
        C = L @ L.T + E @ E.T + self.kappa_cov(c)
        self._cov_cache[c] = C
        return C

    def theta_cov(self, c: int) -> np.ndarray:
        M = self.theta_loading(c)
        return np.einsum("jgk,lhk->jlgh", M, M)

    # ----- occupation distributions
    def occ_joint(self, c: int, dates: Sequence[int]) -> np.ndarray:
        """Joint distribution of occupations at sorted distinct dates (all > c)."""
        first = c + 1
        out = None
        prev = None
        for d in dates:
            if d < first:
                raise ConfigError("occupation", f"date {d} precedes entry of cohort {c}")
            if out is None:
                pi = self.init @ np.linalg.matrix_power(self.P, d - first)
                out = pi
            else:
                step = np.linalg.matrix_power(self.P, d - prev)
                out = out[..., None] * step.reshape((1,) * (out.ndim - 1) + step.shape)
            prev = d
        return out

    def cond_pair(self, c: int, t: int, s: int, cond: dict | None):
        """(prob(cond), E w_t, E w_s, E w_t w_s) for cohort c under exogenous mobility."""
        o = self.occ
        if o is not None and (o.sorting or o.switch_on_shock):
            raise ConfigError("occupation", "population moments require exogenous mobility")
        cond = {int(k): int(v) for k, v in (cond or {}).items()}
        dates = sorted(set(cond) | {t, s})
        J = self.occ_joint(c, dates) if self.n_occ > 1 else np.ones((1,) * len(dates))
        idx = []
        for d in dates:
            idx.append(cond[d] if d in cond else slice(None))
        sub = J[tuple(idx)]
        free = [d for d in dates if d not in cond]
        pc = float(sub.sum())
        if pc <= 0:
            return 0.0, np.nan, np.nan, np.nan
        sub = sub / pc

        def occ_of(d):
            return ("fixed", cond[d]) if d in cond else ("free", free.index(d))
        gt, gs = self.gi(t), self.gi(s)
        L = self.index_loading(c)
        E = self.eps_loading(c)
        Kc = self.kappa_cov(c)
        base = float(E[gt] @ E[gs] + Kc[gt, gs])
        # enumerate the free occupations at t and s
        kt, vt = occ_of(t)
        ks, vs = occ_of(s)
        if sub.ndim == 0:
            sub = np.asarray(sub)
        Ewt = Ews = Eww = 0.0
        rng_t = [vt] if kt == "fixed" else range(self.n_occ)
        rng_s = [vs] if ks == "fixed" else range(self.n_occ)
        for a in rng_t:
            for b in rng_s:
                if kt == "free" and ks == "free" and t == s and a != b:
                    continue
                key = [slice(None)] * sub.ndim
                if kt == "free":
                    key[vt] = a
                if ks == "free":
                    key[vs] = b
                p = float(np.sum(sub[tuple(key)]))
                if p == 0:
                    continue
                Eww += p * (self.gamma[a, gt] * self.gamma[b, gs] + L[a, gt] @ L[b, gs])
        for a in rng_t:
            key = [slice(None)] * sub.ndim
            if kt == "free":
                key[vt] = a
            Ewt += float(np.sum(sub[tuple(key)])) * self.gamma[a, gt]
        for b in rng_s:
            key = [slice(None)] * sub.ndim
            if ks == "free":
                key[vs] = b
            Ews += float(np.sum(sub[tuple(key)])) * self.gamma[b, gs]
        return pc, Ewt, Ews, Eww + base


# ---------------------------------------------------------------------------
# group selectors for population moments

def _cohorts_for(config: DgpConfig, group, t: int) -> list[int]:
    """Cohorts belonging to `group` for a moment whose later year is t."""
    cl = config.cohort_list
    if group is None:
        return list(cl)
    if isinstance(group, (int, np.integer)):
        return [int(group)]
    if isinstance(group, dict):
        out = cl
        if "cohort" in group:
            out = out[out == int(group["cohort"])]
        if "cohorts" in group:
            out = out[np.isin(out, np.asarray(group["cohorts"], int))]
        if "exper" in group:
            a, b = group["exper"]
            e = t - out
            out = out[(e >= a) & (e <= b)]
        return [int(c) for c in out]
    if hasattr(group, "cohorts_at"):
        return [int(c) for c in group.cohorts_at(cl, t)]
    return [int(c) for c in np.atleast_1d(group)]


def _cond_of(group) -> dict | None:
    if isinstance(group, dict):
        return group.get("occ")
    return getattr(group, "occ", None)


def population_pair(config: DgpConfig, group, t: int, t2: int, engine: Engine | None = None):
    """(cov, expected count share) of w_t, w_t2 pooled over the group's cohorts."""
    eng = engine or Engine(config)
    t, t2 = int(t), int(t2)
    hi = max(t, t2)
    cohorts = _cohorts_for(config, group, hi)
    cond = _cond_of(group)
    rows = []
    for c in cohorts:
        if not (config.observed(c, t) and config.observed(c, t2)):
            continue
        n = config.n_cohort(c)
        if n == 0:
            continue
        if cond is None and eng.n_occ == 1:
            C = eng.cohort_cov(c)
            rows.append((n, 0.0, 0.0, C[eng.gi(t), eng.gi(t2)]))
        else:
            pc, m1, m2, Eww = eng.cond_pair(c, t, t2, cond)
            if pc > 0:
                rows.append((n * pc, m1, m2, Eww - m1 * m2))
    if not rows:
        raise ConfigError("group", f"no cohort of the group is observed in both {t} and {t2}")
    r = np.array(rows)
    w = r[:, 0] / r[:, 0].sum()
    m1b, m2b = w @ r[:, 1], w @ r[:, 2]
    cov = float(w @ r[:, 3] + w @ ((r[:, 1] - m1b) * (r[:, 2] - m2b)))
    return cov, float(r[:, 0].sum())


def population_autocov(config: DgpConfig, group, t: int, t2: int, engine: Engine | None = None) -> float:
    """Exact model-implied cov(w_t, w_t2 | group).

    `group` is None (everyone), a cohort, a list of cohorts, or a dict with
    keys ``cohort``/``cohorts``/``exper`` (experience range in the later
    year) and ``occ`` ({year: occupation index} conditioning).  Cohorts are
    pooled with weights proportional to expected counts.
    """
    return population_pair(config, group, t, t2, engine)[0]


def population_mean(config: DgpConfig, group, t: int, engine: Engine | None = None) -> float:
    """E[w_t | group] (non-zero only through occupation intercepts)."""
    eng = engine or Engine(config)
    cohorts = _cohorts_for(config, group, t)
    cond = _cond_of(group)
    num = den = 0.0
    for c in cohorts:
        if not config.observed(c, t):
            continue
        pc, m1, _, _ = eng.cond_pair(c, t, t, cond)
        n = config.n_cohort(c) * pc
        num += n * m1
        den += n
    if den == 0:
        raise ConfigError("group", f"group unobserved in {t}")
    return num / den


def population_theta_var(config: DgpConfig, c: int, t: int, j: int = 0, l: int | None = None,
                         t2: int | None = None) -> float:
    """cov(theta_{j,t}, theta_{l,t2} | c) from the loading engine."""
    eng = Engine(config)
    M = eng.theta_loading(c)
    l = j if l is None else l
    t2 = t if t2 is None else t2
    return float(M[j, eng.gi(t)] @ M[l, eng.gi(t2)])


# ---------------------------------------------------------------------------
# simulation

def _block_draws(seed: int, comp: str, pids: np.ndarray, width: int, kind: str = "normal") -> np.ndarray:
    out = np.empty((len(pids), width))
    if width == 0 or len(pids) == 0:
        return out
    blocks = pids // BLOCK
    for b in np.unique(blocks):
        ss = np.random.SeedSequence(int(seed), spawn_key=(_COMP[comp], int(b)))
        rng = np.random.Generator(np.random.PCG64(ss))
        # column-major, so leading columns do not depend on the width
        arr = (rng.standard_normal((width, BLOCK)) if kind == "normal" else rng.random((width, BLOCK))).T
        sel = blocks == b
        out[sel] = arr[pids[sel] % BLOCK]
    return out


def _pick(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return (u[:, None] > cdf).sum(axis=1)


def person_layout(config: DgpConfig) -> pd.DataFrame:
    """person_id and cohort for every simulated person (ids are consecutive by cohort)."""
    ids, coh = [], []
    start = 0
    for c in config.cohort_list:
        n = config.n_cohort(c)
        ids.append(np.arange(start, start + n))
        coh.append(np.full(n, c))
        start += n
    return pd.DataFrame({"person_id": np.concatenate(ids) if ids else np.array([], int),
                         "cohort": np.concatenate(coh) if coh else np.array([], int)})


def simulate_wide(config: DgpConfig, seed: int, persons: np.ndarray | None = None,
                  engine: Engine | None = None) -> dict:
    """Simulate person x year arrays.

    Returns a dict with ``person_id``, ``cohort``, ``educ``, ``race``,
    ``years`` (observed years) and person x year arrays ``logw``, ``w``
    (wage net of the f-part), ``skill``, ``theta``, ``psi``, ``eps``,
    ``kappa``, ``gamma``, ``fpart``, ``occ`` (int codes, -1 unobserved),
    ``firm``, ``tscore``; unobserved cells are NaN.
    """
    eng = engine or Engine(config)
    lay = person_layout(config)
    if persons is not None:
        lay = lay.iloc[np.asarray(persons)]
    pid = lay["person_id"].to_numpy(np.int64)
    coh = lay["cohort"].to_numpy(np.int64)
    n, G = len(pid), eng.G
    years = config.obs_years
    gy = eng.gi(years)
    T = len(years)

    Zt = _block_draws(seed, "theta", pid, eng.K_theta)
    Ze = _block_draws(seed, "eps", pid, eng.K_eps)

    theta = np.full((n, G), np.nan)        # skill 1 (scalar skill)
    skill_term = np.zeros((n, G))
    eps = np.zeros((n, G))
    psi = np.full(n, np.nan)
    delta = np.full(n, np.nan)
    occ_path = np.zeros((n, G), dtype=np.int64)

    # occupations first (they select which loading applies)
    o = config.occupation
    if o is not None and eng.n_occ > 1:
        U = _block_draws(seed, "occ", pid, G, kind="uniform")
        score = np.linspace(-1.0, 1.0, eng.n_occ)
        for c in np.unique(coh):
            rows = np.flatnonzero(coh == c)
            g_entry = eng.gi(c + 1)
            zpsi = Zt[rows, 0]
            p0 = np.tile(eng.init, (len(rows), 1))
            if o.sorting:
                p0 = p0 * np.exp(o.sorting * zpsi[:, None] * score[None, :])
                p0 /= p0.sum(axis=1, keepdims=True)
            cur = _pick(U[rows, g_entry], p0)
            occ_path[rows, g_entry] = cur
            for g in range(g_entry + 1, G):
                pr = eng.P[cur]
                if o.switch_on_shock:
                    znu = Zt[rows, eng.i_nu + g * eng.J]
                    pr = pr * np.exp(o.switch_on_shock * znu[:, None] * score[None, :])
                    pr /= pr.sum(axis=1, keepdims=True)
                cur = _pick(U[rows, g], pr)
                occ_path[rows, g] = cur

    gamma = eng.gamma[occ_path, np.arange(G)[None, :]]
    for c in np.unique(coh):
        rows = np.flatnonzero(coh == c)
        M = eng.theta_loading(int(c))
        th = Zt[rows] @ M[0].T
        theta[rows] = th
        L = eng.index_loading(int(c))                     # (n_occ, G, K)
        if eng.n_occ == 1:
            skill_term[rows] = Zt[rows] @ L[0].T
        else:
            full = np.einsum("ik,ogk->iog", Zt[rows], L)
            skill_term[rows] = np.take_along_axis(full, occ_path[rows][:, None, :], axis=1)[:, 0, :]
        eps[rows] = Ze[rows] @ eng.eps_loading(int(c)).T
        s = config.skill
        if isinstance(s, Hip):
            vpsi = float(schedule(s.var_psi)(0, c))
            vd = float(schedule(s.var_delta)(0, c))
            cpd = float(schedule(s.cov_psi_delta)(0, c))
            Lc = _hip_factor(vpsi, cpd, vd)
            pd_ = Zt[rows][:, [0, eng.i_delta]] @ Lc.T
            psi[rows], delta[rows] = pd_[:, 0], pd_[:, 1]
        elif isinstance(s, MultiSkill):
            psi[rows] = Zt[rows, :eng.J] @ M[0, eng.gi(c + 1), :eng.J]
        else:
            psi[rows] = np.sqrt(float(schedule(s.var_psi)(0, c))) * Zt[rows, 0]

    # firms
    kappa = np.zeros((n, G))
    firm = np.full((n, G), -1, dtype=np.int64)
    f = config.firm
    if f is not None:
        Us = _block_draws(seed, "stay", pid, G, kind="uniform")
        Zk = _block_draws(seed, "kappa", pid, G)
        stay = schedule(f.stay_prob)(eng.grid, 0)
        sdk = np.sqrt(f.var_kappa)
        for c in np.unique(coh):
            rows = np.flatnonzero(coh == c)
            g_entry = eng.gi(c + 1)
            job = np.zeros(len(rows), np.int64)
            cur_k = sdk * Zk[rows, g_entry]
            kappa[rows, g_entry] = cur_k
            firm[rows, g_entry] = pid[rows] * 1000
            for g in range(g_entry + 1, G):
                move = Us[rows, g] >= stay[g]
                job = job + move
                cur_k = np.where(move, sdk * Zk[rows, g], cur_k)
                kappa[rows, g] = cur_k
                firm[rows, g] = pid[rows] * 1000 + job

    # observables
    X = _block_draws(seed, "x", pid, 2, kind="uniform")
    educ_levels = list(config.educ_shares)
    race_levels = list(config.race_shares)
    ep = np.array([config.educ_shares[k] for k in educ_levels], float)
    rp = np.array([config.race_shares[k] for k in race_levels], float)
    educ = np.array(educ_levels, dtype=object)[_pick(X[:, 0], np.tile(ep / ep.sum(), (n, 1)))]
    race = np.array(race_levels, dtype=object)[_pick(X[:, 1], np.tile(rp / rp.sum(), (n, 1)))]

    exper = years[None, :] - coh[:, None]
    fp = config.fpart or {}
    fpart = np.zeros((n, T))
    if fp:
        fpart = fpart + schedule(fp.get("year", 0.0))(years, 0)[None, :]
        fpart = fpart + fp.get("exper", 0.0) * exper + fp.get("exper2", 0.0) * exper ** 2
        ee = fp.get("educ", {})
        fpart = fpart + np.array([ee.get(e, 0.0) for e in educ])[:, None]
        rr = fp.get("race", {})
        fpart = fpart + np.array([rr.get(r, 0.0) for r in race])[:, None]

    obs = np.zeros((n, T), bool)
    for c in np.unique(coh):
        rows = coh == c
        obs[rows] = config.observed(int(c), years)[None, :]

    def take(A):
        out = A[:, gy].astype(float)
        out[~obs] = np.nan
        return out

    skill_o, eps_o, kap_o, gam_o = take(skill_term), take(eps), take(kappa), take(gamma)
    w = skill_o + eps_o + kap_o + gam_o
    logw = fpart + gam_o + skill_o + eps_o + kap_o
    logw[~obs] = np.nan
    fpart[~obs] = np.nan
    occ_o = np.where(obs, occ_path[:, gy], -1) if o is not None else None
    firm_o = np.where(obs, firm[:, gy], -1) if f is not None else None

    tscore = None
    if config.test is not None:
        tl = config.test
        Zeta = _block_draws(seed, "eta", pid, G)
        ts = tl.tau * theta + np.sqrt(tl.var_eta) * Zeta
        tscore = take(ts)
        if tl.years is not None:
            tscore[:, ~np.isin(years, np.asarray(tl.years))] = np.nan

    return {"person_id": pid, "cohort": coh, "educ": educ, "race": race, "years": years,
            "obs": obs, "logw": logw, "w": w, "skill": skill_o, "theta": take(theta),
            "psi": psi, "delta": delta, "eps": eps_o, "kappa": kap_o, "gamma": gam_o,
            "fpart": fpart, "occ": occ_o, "firm": firm_o, "tscore": tscore,
            "occupations": list(o.occupations) if o is not None else None}


def sim_residuals(sim: dict, value: str = "w") -> ResidualPanel:
    """Residual panel straight from a simulate_wide result (no regression step).

    `value` = "w" gives the residual net of the fixed part (skill + eps +
    kappa + occupation intercept); occupations are mapped to their names.
    """
    occ = None
    if sim.get("occ") is not None:
        names = np.array(list(sim["occupations"]) + [None], dtype=object)
        occ = names[np.where(sim["occ"] >= 0, sim["occ"], len(names) - 1)]
    firm = sim.get("firm")
    return ResidualPanel.from_wide(sim["person_id"], sim["years"], sim[value], cohort=sim["cohort"],
                                   occ=occ, firm=firm, educ=sim["educ"])


@dataclass
class LatentRecord:
    """Per person-year latent components; logw = fpart + gamma + skill + eps + kappa."""
    frame: pd.DataFrame

    def check_identity(self, panel: Panel | None = None, atol: float = 0.0) -> float:
        """Largest absolute violation of the wage identity (0.0 when exact)."""
        f = self.frame
        recon = f["fpart"] + f["gamma"] + f["skill"] + f["eps"] + f["kappa"]
        target = f["logw"]
        if panel is not None:
            m = panel.frame[["person_id", "year", "logw"]].merge(
                f[["person_id", "year"]].assign(recon=recon.to_numpy()), on=["person_id", "year"])
            return float(np.max(np.abs(m["logw"] - m["recon"]))) if len(m) else 0.0
        return float(np.max(np.abs(target - recon))) if len(f) else 0.0

    def to_csv(self, path, sep: str = ",") -> None:
        out = self.frame.copy()
        for c in out.columns:
            if out[c].dtype.kind == "f":
                out[c] = [("" if np.isnan(x) else "%.17g" % x) for x in out[c].to_numpy()]
        out.to_csv(path, sep=sep, index=False, lineterminator="\n")


def wide_to_long(sim: dict) -> tuple[pd.DataFrame, pd.DataFrame]:
    ii, jj = np.nonzero(sim["obs"])
    years = sim["years"][jj]
    coh = sim["cohort"][ii]
    base = pd.DataFrame({"person_id": sim["person_id"][ii], "year": years, "cohort": coh})
    pan = base.copy()
    pan["educ"] = sim["educ"][ii]
    pan["race"] = sim["race"][ii]
    pan["exper"] = years - coh
    if sim["occ"] is not None:
        names = np.array(sim["occupations"], dtype=object)
        pan["occ"] = names[sim["occ"][ii, jj]]
    if sim["firm"] is not None:
        pan["firm"] = sim["firm"][ii, jj]
    pan["logw"] = sim["logw"][ii, jj]
    if sim["tscore"] is not None:
        pan["tscore"] = sim["tscore"][ii, jj]
    lat = base.copy()
    for k in ("logw", "fpart", "gamma", "skill", "eps", "kappa", "theta"):
        lat[k] = sim[k][ii, jj]
    lat["psi"] = sim["psi"][ii]
    if np.isfinite(sim["delta"]).any():
        lat["delta"] = sim["delta"][ii]
    if sim["occ"] is not None:
        lat["occ"] = pan["occ"].to_numpy()
    return pan, lat


def simulate(config: DgpConfig, seed: int) -> tuple[Panel, LatentRecord]:
    """Simulate a panel and its latent ledger; deterministic in (config, seed)."""
    sim = simulate_wide(config, seed)
    pan, lat = wide_to_long(sim)
    return Panel(pan, validate=False), LatentRecord(lat)


def export_panel(panel: Panel, path, sep: str = ",") -> None:
    write_panel(panel, path, sep=sep)


def wage_identity_gap(panel_path, latent_path) -> float:
    """Largest |logw - (fpart + gamma + skill + eps + kappa)| across two exported files."""
    from .panel import load_panel
    pan = load_panel(panel_path)
    lat = pd.read_csv(latent_path)
    return LatentRecord(lat).check_identity(pan)

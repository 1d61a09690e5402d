"""Command-line front end.

    skillreturns simulate   --config dgp.json --seed 1 --out runs/sim
    skillreturns moments    --config moments.json
    skillreturns estimate   --method tsls --config est.json
    skillreturns montecarlo --config study.json --reps 200 --workers 4
    skillreturns diagnose   skill-shock-ratio --set est_lag=-0.033 --set est_lead=0.165

Every run writes manifest.json next to its outputs.  Exit codes: 0 ok,
1 runtime/estimation failure, 2 usage/config error.  Scalar settings
resolve as flag > config file > default; the default output root is
$SKILLRETURNS_OUT (or ./skillreturns_out).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import diagnostics as diag
from . import estimators as est
from .dgp import ConfigError, DgpConfig, Engine, export_panel, sim_residuals, simulate, simulate_wide, wage_identity_gap
from .moments import (PSID_YEARS, DECADE_COHORT_GROUPS, TEN_YEAR_EXPER, GroupDef, MomentTable,
                      cohort_group_windows, experience_group_windows, long_autocov_set,
                      population_moment_table)
from .panel import PanelError, ResidualPanel, load_panel, load_residuals, residualize

log = logging.getLogger("skillreturns")

OUT_ENV = "SKILLRETURNS_OUT"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {path}: {exc}") from None


def _parse_value(v: str):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


def _resolve(args, cfg: dict) -> dict:
    """Apply --set overrides and scalar flags on top of the file config."""
    cfg = dict(cfg)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        node = cfg
        parts = k.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(v)
    for key in ("seed", "reps", "workers", "method"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _out_dir(args, cfg: dict) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg.get("out"):
        out = Path(cfg["out"])
    else:
        out = Path(os.environ.get(OUT_ENV, "skillreturns_out")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict, outputs: list, t0: float, extra=None) -> Path:
    man = {"subcommand": command, "config_hash": config_hash(cfg), "seed": cfg.get("seed"),
           "reps": cfg.get("reps"), "outputs": sorted(str(Path(p).name) for p in outputs),
           "version": __version__, "wall_time_s": round(time.time() - t0, 3),
           "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if extra:
        man.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _dgp(cfg: dict) -> DgpConfig:
    d = cfg.get("dgp", cfg)
    if not isinstance(d, dict):
        raise UsageError("'dgp' must be an object")
    d = {k: v for k, v in d.items() if k not in ("seed", "reps", "workers", "method", "out", "latent")}
    return DgpConfig.from_dict(d)


def _csv(df: pd.DataFrame, path) -> str:
    df.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return str(path)


def _residuals(cfg: dict) -> ResidualPanel:
    if "residuals" in cfg:
        return load_residuals(cfg["residuals"])
    if "panel" in cfg:
        pan = load_panel(cfg["panel"])
        if cfg.get("residualize", "regress") == "raw":
            return ResidualPanel.raw(pan)
        return residualize(pan)
    if "dgp" in cfg:
        return sim_residuals(simulate_wide(_dgp(cfg), int(cfg.get("seed", 0))))
    raise UsageError("need one of 'residuals', 'panel' or 'dgp' in the config")


def _groups(cfg: dict) -> list[GroupDef]:
    design = cfg.get("design")
    gap = int(cfg.get("min_gap", 6))
    if design == "cohort_decades":
        return cohort_group_windows(DECADE_COHORT_GROUPS, min_gap=gap, educ=cfg.get("educ"))
    if design == "experience":
        return experience_group_windows(TEN_YEAR_EXPER, min_gap=gap, educ=cfg.get("educ"))
    if design is not None:
        raise UsageError(f"unknown design {design!r}")
    spec = cfg.get("groups")
    if not spec:
        raise UsageError("need 'design' or 'groups'")
    out = []
    for name, g in spec.items():
        if isinstance(g, (int, float)):
            out.append(GroupDef(str(name), cohorts=(int(g), int(g))))
            continue
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in g.items()}
        out.append(GroupDef(str(name), **kw))
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args, cfg, out):
    dgp = _dgp(cfg)
    seed = int(cfg.get("seed", 0))
    pan, lat = simulate(dgp, seed)
    outputs = [out / "panel.csv"]
    export_panel(pan, outputs[0])
    if cfg.get("latent", False):
        outputs.append(out / "latent.csv")
        lat.to_csv(outputs[1])
    log.info("simulated %d person-years", len(pan))
    return outputs, {}


def cmd_moments(args, cfg, out):
    groups = _groups(cfg)
    if cfg.get("population"):
        years = cfg.get("years")
        m = population_moment_table(_dgp(cfg), groups, years=years, min_gap=int(cfg.get("min_gap", 0)))
    else:
        res = _residuals(cfg)
        m = long_autocov_set(res, groups, min_gap=int(cfg.get("min_gap", 6)),
                             years=cfg.get("years"), min_count=int(cfg.get("min_count", 20)))
    path = out / "moments.csv"
    m.to_csv(path)
    log.info("%d moment rows (%d skipped)", len(m), len(m.skipped))
    return [path], {"rows": len(m)}


def _model_spec(cfg: dict, base: DgpConfig | None) -> est.ModelSpec:
    s = dict(cfg.get("model", {}))
    return est.ModelSpec(base=base, **s)


def cmd_estimate(args, cfg, out):
    method = cfg.get("method")
    if method not in ("tsls", "gmm", "md", "occ-gmm"):
        raise UsageError(f"unknown method {method!r}; choose tsls, gmm, md or occ-gmm")
    outputs = []
    if method == "tsls":
        res = _residuals(cfg)
        rows = []
        for w in cfg.get("windows", []):
            e = est.tsls_growth(res, w, cfg.get("instruments", [-8]), gap=int(cfg.get("gap", 2)),
                                k=cfg.get("k"), f_floor=float(cfg.get("f_floor", 10.0)))
            f = e.to_frame()
            f.insert(0, "window", "-".join(map(str, (w[0], w[-1]))))
            rows.append(f)
        if not rows:
            raise UsageError("tsls needs 'windows'")
        outputs.append(_csv(pd.concat(rows, ignore_index=True), out / "tsls.csv"))
    elif method == "gmm":
        res = _residuals(cfg)
        eqs = [(e["window"], e["instruments"], e.get("param")) for e in cfg.get("equations", [])]
        if not eqs:
            raise UsageError("gmm needs 'equations'")
        e = est.gmm_growth(res, eqs, balanced=bool(cfg.get("balanced", False)))
        outputs.append(_csv(e.to_frame(), out / "gmm.csv"))
    elif method == "md":
        if "moments" in cfg:
            m = MomentTable.from_csv(cfg["moments"])
        else:
            raise UsageError("md needs a 'moments' file")
        base = _dgp(cfg) if "dgp" in cfg else None
        spec = _model_spec(cfg, base)
        fit = est.md_fit(m, spec, n_starts=int(cfg.get("starts", 5)), weights=cfg.get("weights"))
        if "residuals" in cfg or "panel" in cfg:
            fit = est.with_cov(fit, est.md_standard_errors(fit, m, _residuals(cfg)))
        f = fit.to_frame()
        f["objective"] = fit.objective
        f["scale"] = fit.extra["scale"]
        f["converged"] = fit.converged
        outputs.append(_csv(f, out / "md.csv"))
        outputs.append(_csv(pd.DataFrame({"group": [k[0] for k in m.keys()], "t": [k[1] for k in m.keys()],
                                          "t2": [k[2] for k in m.keys()], "cov": m.vector(),
                                          "fitted": fit.extra["fitted"]}), out / "md_fitted.csv"))
        log.info("objective %.3g (scale %.3g)", fit.objective, fit.extra["scale"])
    else:
        res = _residuals(cfg)
        kw = {k: cfg[k] for k in ("lags", "n_knots", "t_star", "o_star", "gap", "min_cell") if k in cfg}
        e = est.occ_gmm(res, **kw)
        outputs.append(_csv(e.to_frame(), out / "occ_gmm.csv"))
        mu = pd.DataFrame([(o, t, v, e.extra["gamma"].get((o, t), np.nan)) for (o, t), v in e.extra["mu"].items()],
                          columns=["occ", "year", "mu", "gamma"])
        outputs.append(_csv(mu, out / "occ_paths.csv"))
    return [Path(p) for p in outputs], {"method": method}


# ---- Monte Carlo

def _truth_growth(dgp: DgpConfig, window, gap: int) -> float:
    eng = Engine(dgp)
    mu = dict(zip(eng.grid.tolist(), eng.mu.tolist()))
    return float(np.mean([mu[t] / mu[t - gap] - 1 for t in window]))


def _one_rep(job):
    """One replication; returns a list of row dicts (errors recorded, not raised)."""
    study, r = job
    dgp = DgpConfig.from_dict(study["dgp"])
    seed = int(study.get("seed", 0)) * 100003 + r
    e = study["estimator"]
    rows = []
    try:
        res = sim_residuals(simulate_wide(dgp, seed))
        gap = int(e.get("gap", 2))
        if e.get("method", "tsls") == "tsls":
            for w in e["windows"]:
                w = [int(w)] if np.isscalar(w) else list(w)
                p = est.tsls_growth(res, w, e.get("instruments", [-8]), gap=gap, k=e.get("k"))
                rows.append({"rep": r, "seed": seed, "param": f"growth[{w[0]}-{w[-1]}]",
                             "estimate": p.params[0], "se": p.se[0], "truth": _truth_growth(dgp, w, gap),
                             "error": ""})
        elif e["method"] == "lead-lag":
            df = diag.lead_lag_j_compare(res, e["windows"], k=int(e.get("k", 6)))
            for _, x in df.iterrows():
                rows.append({"rep": r, "seed": seed, "param": f"reject_leads[{x['window']}]",
                             "estimate": float(x["reject_leads"]), "se": np.nan, "truth": np.nan, "error": ""})
        else:
            raise ValueError(f"unknown Monte Carlo estimator {e['method']!r}")
    except Exception as exc:   # a failed replication is recorded and the study continues
        rows.append({"rep": r, "seed": seed, "param": "", "estimate": np.nan, "se": np.nan,
                     "truth": np.nan, "error": f"{type(exc).__name__}: {exc}"})
    return rows


def summarize_mc(per_rep: pd.DataFrame, level: float = 0.95) -> pd.DataFrame:
    from scipy import stats
    z = stats.norm.ppf(0.5 + level / 2)
    ok = per_rep[per_rep["error"].fillna("") == ""]
    out = []
    for p, g in ok.groupby("param", sort=True):
        err = g["estimate"] - g["truth"]
        cover = (np.abs(err) <= z * g["se"]).mean() if g["se"].notna().all() else np.nan
        out.append({"param": p, "reps": len(g), "truth": g["truth"].mean(), "mean": g["estimate"].mean(),
                    "bias": err.mean(), "sd": g["estimate"].std(ddof=1) if len(g) > 1 else np.nan,
                    "mean_se": g["se"].mean(), "coverage": cover})
    return pd.DataFrame(out)


def cmd_montecarlo(args, cfg, out):
    reps = int(cfg.get("reps", 1))
    if reps < 1:
        raise UsageError("reps must be >= 1")
    if "dgp" not in cfg or "estimator" not in cfg:
        raise UsageError("study config needs 'dgp' and 'estimator'")
    _dgp(cfg)    # validate early
    study = {"dgp": cfg["dgp"], "estimator": cfg["estimator"], "seed": int(cfg.get("seed", 0))}
    jobs = [(study, r) for r in range(reps)]
    workers = int(cfg.get("workers", 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_rep, jobs))
    else:
        results = [_one_rep(j) for j in jobs]
    per = pd.DataFrame([row for rows in results for row in rows])
    failed = int((per["error"] != "").sum())
    outputs = [_csv(per, out / "replications.csv"), _csv(summarize_mc(per), out / "summary.csv")]
    if failed:
        log.warning("%d replication(s) failed; see replications.csv", failed)
    return [Path(p) for p in outputs], {"failed": failed}


# ---- diagnostics

DIAGNOSTICS = ("skill-shock-ratio", "lead-lag", "jmp", "lemieux", "hip-scaled", "upsilon",
               "stayer-correction", "decomposition", "wage-identity")


def cmd_diagnose(args, cfg, out):
    test = args.test
    if test not in DIAGNOSTICS:
        raise UsageError(f"unknown test {test!r}; choose from {', '.join(DIAGNOSTICS)}")
    outputs = []
    if test == "skill-shock-ratio":
        try:
            r = diag.skill_shock_ratio(float(cfg["est_lag"]), float(cfg["est_lead"]))
        except KeyError as exc:
            raise UsageError(f"missing parameter {exc}") from None
        outputs.append(_csv(pd.DataFrame([{"est_lag": cfg["est_lag"], "est_lead": cfg["est_lead"],
                                           "ratio": r}]), out / "skill_shock_ratio.csv"))
        print(f"{r:.4f}")
    elif test == "lead-lag":
        df = diag.lead_lag_j_compare(_residuals(cfg), cfg["windows"], k=int(cfg.get("k", 6)))
        outputs.append(_csv(df, out / "lead_lag.csv"))
    elif test == "jmp":
        src = _residuals(cfg) if "dgp" not in cfg or not cfg.get("population") else _dgp(cfg)
        rows = []
        for c in cfg["cohorts"]:
            for t in cfg["years"]:
                try:
                    rows.append({"cohort": c, "year": t, "ell": cfg.get("ell", 1),
                                 **diag.jmp_cohort_experience(src, int(t), int(cfg.get("ell", 1)), int(c))})
                except KeyError:
                    continue
        outputs.append(_csv(pd.DataFrame(rows), out / "jmp.csv"))
    elif test == "lemieux":
        if "panel" in cfg:
            pan = load_panel(cfg["panel"])
        elif "dgp" in cfg:
            pan, _ = simulate(_dgp(cfg), int(cfg.get("seed", 0)))
        else:
            raise UsageError("lemieux needs 'panel' or 'dgp'")
        r = diag.lemieux_constancy_test(pan)
        outputs.append(_csv(pd.DataFrame([{k: r[k] for k in ("wald", "dof", "p_value", "n")}]), out / "lemieux.csv"))
    elif test == "hip-scaled":
        res = _residuals(cfg)
        mu = {int(k): float(v) for k, v in cfg["mu"].items()}
        r = diag.hip_scaled_growth_covs(res, mu, int(cfg.get("k", 2)))
        outputs.append(_csv(r["table"], out / "hip_scaled_covs.csv"))
        outputs.append(_csv(pd.DataFrame([{"kind": k, **v} for k, v in r["summary"].items()]),
                            out / "hip_scaled_summary.csv"))
    elif test == "upsilon":
        up = diag.UpsilonPath(pd.read_csv(cfg["table"])) if "table" in cfg else diag.UpsilonPath.reference()
        outputs.append(_csv(up.windows, out / "upsilon.csv"))
    elif test == "stayer-correction":
        iv = {int(k): float(v) for k, v in cfg["iv"].items()}
        up = diag.UpsilonPath.reference() if "upsilon" not in cfg else diag.UpsilonPath.constant(float(cfg["upsilon"]))
        mu = diag.stayer_bias_correction(iv, up, int(cfg["norm_until"]), int(cfg.get("instrument_lag", 8)),
                                         int(cfg.get("gap", 2)), float(cfg.get("multiplier", 1.0)))
        outputs.append(_csv(pd.DataFrame(sorted(mu.items()), columns=["year", "mu"]), out / "mu_corrected.csv"))
    elif test == "decomposition":
        rep = diag.variance_decomposition(_dgp(cfg))
        rep.to_csv(out / "decomposition.csv")
        outputs.append(out / "decomposition.csv")
    elif test == "wage-identity":
        gap = wage_identity_gap(cfg["panel"], cfg["latent"])
        print(f"{gap:.3g}")
        outputs.append(_csv(pd.DataFrame([{"max_abs_gap": gap}]), out / "wage_identity.csv"))
    return [Path(p) for p in outputs], {"test": test}


COMMANDS = {"simulate": cmd_simulate, "moments": cmd_moments, "estimate": cmd_estimate,
            "montecarlo": cmd_montecarlo, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skillreturns", description="Skill-return panel toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "diagnose":
            sp.add_argument("test", help=f"one of: {', '.join(DIAGNOSTICS)}")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--reps", type=int)
        sp.add_argument("--method")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted keys reach nested objects)")
        sp.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    t0 = time.time()
    try:
        cfg = _resolve(args, _load_config(args.config))
        out = _out_dir(args, cfg)
        outputs, extra = COMMANDS[args.command](args, cfg, out)
        _write_manifest(out, args.command, cfg, outputs, t0, extra)
    except (UsageError, ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (est.EstimationError, PanelError, ValueError, KeyError, ZeroDivisionError,
            np.linalg.LinAlgError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

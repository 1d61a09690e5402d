import json

import pandas as pd
import pytest

from skillreturns.cli import main

DGP = {"years": [1, 16], "cohorts": {"from": -4, "to": 0}, "n_per_cohort": 400,
       "mu": {"linear": [[4, 1.0], [14, 0.7]]},
       "skill": {"kind": "random_walk", "var_psi": 1.0, "var_nu": 0.05},
       "shock": {"kind": "ma", "q": 1, "beta": [1.0, 0.4], "var_xi": 0.2}}


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_simulate_deterministic(tmp_path):
    cfg = write(tmp_path, "dgp.json", {"dgp": DGP, "latent": True})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(a), "--quiet"]) == 0
    assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(b), "--quiet"]) == 0
    assert (a / "panel.csv").read_bytes() == (b / "panel.csv").read_bytes()
    m = manifest(a)
    assert m["seed"] == 3 and "panel.csv" in " ".join(m["outputs"])
    cfg2 = write(tmp_path, "wi.json", {"panel": str(a / "panel.csv"), "latent": str(a / "latent.csv")})
    assert main(["diagnose", "wage-identity", "--config", cfg2, "--out", str(tmp_path / "wi"), "--quiet"]) == 0
    gap = pd.read_csv(tmp_path / "wi" / "wage_identity.csv")["max_abs_gap"].iat[0]
    assert gap < 1e-10


def test_moments_and_md(tmp_path):
    cfg = write(tmp_path, "m.json", {"dgp": DGP, "groups": {"0": 0, "-4": -4}, "min_gap": 0,
                                     "population": True})
    out = tmp_path / "m"
    assert main(["moments", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    ecfg = write(tmp_path, "e.json", {"method": "md", "moments": str(out / "moments.csv"), "dgp": DGP,
                                      "model": {"kind": "baseline", "t_star": 4, "var_xi": "const", "ma_q": 1},
                                      "starts": 1})
    assert main(["estimate", "--config", ecfg, "--out", str(tmp_path / "e"), "--quiet"]) == 0
    md = pd.read_csv(tmp_path / "e" / "md.csv")
    assert (md["objective"] / md["scale"]).iat[0] < 1e-12


def test_tsls_and_overrides(tmp_path):
    cfg = write(tmp_path, "t.json", {"method": "tsls", "dgp": DGP, "windows": [[10], [12]],
                                     "instruments": [-5], "k": 2})
    out = tmp_path / "t"
    assert main(["estimate", "--config", cfg, "--out", str(out), "--set", "dgp.n_per_cohort=800",
                 "--quiet"]) == 0
    df = pd.read_csv(out / "tsls.csv")
    assert len(df) == 2 and (df["se"] > 0).all()


def test_montecarlo_serial_matches_parallel(tmp_path):
    study = {"dgp": DGP, "estimator": {"method": "tsls", "windows": [10], "instruments": [-5], "k": 2},
             "seed": 4}
    cfg = write(tmp_path, "s.json", study)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["montecarlo", "--config", cfg, "--reps", "3", "--out", str(a), "--quiet"]) == 0
    assert main(["montecarlo", "--config", cfg, "--reps", "3", "--workers", "2", "--out", str(b),
                 "--quiet"]) == 0
    assert (a / "replications.csv").read_bytes() == (b / "replications.csv").read_bytes()
    s = pd.read_csv(a / "summary.csv")
    assert {"bias", "sd", "mean_se", "coverage"} <= set(s.columns)


def test_skill_shock_ratio_prints(tmp_path, capsys):
    assert main(["diagnose", "skill-shock-ratio", "--set", "est_lag=-0.033", "--set", "est_lead=0.165",
                 "--out", str(tmp_path / "r"), "--quiet"]) == 0
    assert abs(float(capsys.readouterr().out.strip()) - 0.204) <= 0.001
    r = pd.read_csv(tmp_path / "r" / "skill_shock_ratio.csv")["ratio"].iat[0]
    assert abs(r - 0.198 / 0.967) < 1e-12


@pytest.mark.parametrize("argv, code", [
    (["estimate", "--method", "bogus"], 2),
    (["diagnose", "nope"], 2),
    (["diagnose", "skill-shock-ratio"], 2),
    (["simulate", "--set", "dgp.skill.var_psi=-1"], 2),
])
def test_usage_errors(tmp_path, argv, code):
    assert main(argv + ["--out", str(tmp_path / "x"), "--quiet"]) == code


def test_runtime_error_names_column(tmp_path, capsys):
    sim = tmp_path / "sim"
    cfg = write(tmp_path, "dgp.json", {"dgp": DGP})
    assert main(["simulate", "--config", cfg, "--out", str(sim), "--quiet"]) == 0
    lcfg = write(tmp_path, "l.json", {"panel": str(sim / "panel.csv")})
    assert main(["diagnose", "lemieux", "--config", lcfg, "--out", str(tmp_path / "l"), "--quiet"]) == 1
    assert "tscore" in capsys.readouterr().err


def test_out_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SKILLRETURNS_OUT", str(tmp_path / "root"))
    assert main(["diagnose", "upsilon", "--quiet"]) == 0
    hits = list((tmp_path / "root").rglob("upsilon.csv"))
    assert len(hits) == 1

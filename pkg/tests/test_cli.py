import json
import subprocess
import sys

import numpy as np
import pytest

from fbbench.cli import main
from fbbench.config import config_keys, parse_config
from fbbench.core import read_draws

FAST = ["--set", "n_warmup=150", "--set", "n_draws=100", "--set", "n_chains=2"]


def run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr().out


def test_config_parsing():
    cfg = parse_config("""
# priors
pc_U = 1.0
pc_alpha = 0.01   # tail probability
[sampler]
n_chains = 3
sigma_plus2 = 0.2
y2 = 0.29, 0.30
""", {"seed": "7"})
    assert cfg.sampler.n_chains == 3 and cfg.sampler.seed == 7
    assert cfg.run.mh_shift_variance == 0.2 and cfg.simulation.y2_values == (0.29, 0.30)
    assert cfg.priors.cluster_prior == "pc"
    h = parse_config("", harness=True)
    assert h.priors.cluster_prior == "loggamma" and h.sampler.thin == 10
    with pytest.raises(ValueError):
        parse_config("bogus = 1")
    with pytest.raises(ValueError):
        parse_config("methods = rejection, magic")
    assert "intercept_prior" in config_keys()


def test_simulate_fit_benchmark_diagnose(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert run(["simulate", "--clusters", "5", "--out", str(data)], capsys)[0] == 0
    assert data.read_text().splitlines()[0] == "area,trials,successes"

    draws = tmp_path / "unb.csv"
    code, out = run(["fit", "--data", str(data), "--out", str(draws), *FAST], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["n_draws"] == 200 and "diagnostics" in rep
    d = read_draws(draws)
    assert d.n_draws == 200 and d.n_chains == 2

    for method in ("rejection", "rake", "bayes"):
        out_csv = tmp_path / f"{method}.csv"
        code, out = run(["benchmark", "--method", method, "--y2", "0.31", "--sigma2", "0.01",
                         "--draws", str(draws), "--out", str(out_csv)], capsys)
        assert code == 0, method
        rep = json.loads(out)
        assert out_csv.exists()
        if method == "rejection":
            assert 0 < rep["acceptance_rate"] <= 1
    bayes = read_draws(tmp_path / "bayes.csv")
    assert np.allclose(bayes.theta.mean(axis=1), 0.31, atol=1e-12)

    adj = tmp_path / "adj.csv"
    assert run(["fit", "--data", str(data), "--shift-y2", "0.31", "--out", str(adj), *FAST], capsys)[0] == 0
    code, out = run(["benchmark", "--method", "mh", "--y2", "0.31", "--sigma2", "0.01", "--draws", str(adj),
                     "--mh-warmup", "10", "--mh-draws", "40", "--set", "n_chains=2"], capsys)
    assert code == 0 and json.loads(out)["n_draws"] == 80

    code, out = run(["benchmark", "--method", "joint", "--y2", "0.31", "--sigma2", "0.01",
                     "--data", str(data), *FAST], capsys)
    assert code == 0 and json.loads(out)["method"] == "joint"

    code, out = run(["diagnose", "--draws", str(draws)], capsys)
    assert code == 0 and "theta[0]" in json.loads(out)["quantities"]


def test_inconsistent_benchmark_exit_code(tmp_path, capsys):
    data = tmp_path / "d.csv"
    main(["simulate", "--clusters", "5", "--out", str(data)])
    draws = tmp_path / "unb.csv"
    main(["fit", "--data", str(data), "--out", str(draws), "--report", str(tmp_path / "r.json"), *FAST])
    code, out = run(["benchmark", "--method", "rejection", "--y2", "0.9", "--sigma2", "1e-6",
                     "--draws", str(draws)], capsys)
    assert code == 2 and "error" in json.loads(out)


def test_report_subcommand(tmp_path):
    cfg = tmp_path / "h.cfg"
    cfg.write_text("replicates = 1\nn_chains = 2\nn_warmup = 150\nthin = 2\nincrement = 50\n"
                   "target_ess = 30\ntarget_accepted = 30\nmh_warmup = 10\nmethods = rejection, rake\n")
    out = tmp_path / "rep"
    main(["report", "--config", str(cfg), "--clusters", "5", "--sigma2", "0.01", "--y2", "0.29",
          "--out-dir", str(out)])
    for name in ("results.csv", "summaries.csv", "ks.csv", "timings.csv", "boxplot.csv",
                 "soft_checks.json", "settings.json"):
        assert (out / name).exists(), name
    assert json.loads((out / "settings.json").read_text())["cells"] == ["c5_y0.29_s0.01"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fbbench", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()

import json

import numpy as np
import pytest

from lafem import cli, diff
from lafem.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, RunConfig, main

SMALL = dict(n=8, K0=8, refine=1, channels=[1, 2, 4], max_iter=20, n_samples=2, N_c=1,
             grid=8, gammas=[0.0, 0.75], bench_n=[4, 8], bench_orders=[1, 2], repeats=1,
             batch_L=2, batch_n=3, grad_n=8, draws=2)


def run(tmp_path, command, cfg=None, *extra, name="out"):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps({**SMALL, **(cfg or {})}))
    out = tmp_path / name
    return main([command, "--config", str(cfg_path), "--out", str(out), *extra]), out


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes()
            for p in sorted(d.rglob("*")) if p.is_file() and p.name != "timings.json"}


def test_defaults_validate():
    RunConfig().validate()
    assert RunConfig.load(None) == RunConfig()


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"order": 3}, {"xi_mode": "other"},
                                 {"subdomain": [0.5, -0.5]}, {"K0": 10_000}, {"n": 1},
                                 {"gamma_init": [0, 0], "gamma_true": [1, 2, 3]},
                                 {"noise_kind": "pink"}, {"grad_tol": 0}])
def test_bad_config_exits_2(tmp_path, bad, capsys):
    code, _ = run(tmp_path, "eigenbasis", bad)
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unreadable_config_and_threads(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["eigenbasis", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    p.write_text("[1, 2]")
    assert main(["eigenbasis", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    code, _ = run(tmp_path, "eigenbasis", None, "--threads", "0")
    assert code == EXIT_CONFIG


def test_eigenbasis_outputs(tmp_path):
    code, out = run(tmp_path, "eigenbasis")
    assert code == EXIT_OK
    s = json.loads((out / "eigenbasis_summary.json").read_text())
    assert s["K0"] == 8 and s["orthonormality_error"] < 1e-10
    assert (out / "eigenvalues.csv").read_text().startswith("k,lambda,analytic,rel_err\n")
    assert "eigenbasis_s" in json.loads((out / "timings.json").read_text())


def test_bench_commands(tmp_path):
    code, out = run(tmp_path, "bench-assembly")
    assert code == EXIT_OK
    rows = (out / "bench_assembly.csv").read_text().splitlines()
    assert rows[0] == "n,order,dofs,l2_error" and len(rows) == 5
    code, out = run(tmp_path, "bench-batched", name="b")
    assert code == EXIT_OK
    assert (out / "bench_batched.csv").read_text().splitlines()[1].endswith(",1")


def test_grad_check_and_negative_control(tmp_path):
    code, out = run(tmp_path, "grad-check")
    assert code == EXIT_OK
    assert json.loads((out / "grad_check_summary.json").read_text())["pass"]
    # a 1e-3 relative corruption of the adjoint must be caught
    code, out = run(tmp_path, "grad-check", {"corrupt_gradient": 1e-3}, name="bad")
    assert code == EXIT_CHECK
    assert not json.loads((out / "grad_check_summary.json").read_text())["pass"]


def test_recover_gamma_outputs(tmp_path):
    code, out = run(tmp_path, "recover-gamma", {"max_iter": 5})
    assert code == EXIT_OK
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "iter,gamma_0,loss" and len(lines) == 7
    s = json.loads((out / "summary.json").read_text())
    assert s["iterations"] == 5 and s["gamma_true"] == [0.75]


def test_numerical_failure_exits_3(tmp_path, monkeypatch, capsys):
    def boom(problem, g0):
        raise diff.DivergenceError("forced", diff.Trajectory())
    monkeypatch.setattr(diff, "recover_gamma", boom)
    code, _ = run(tmp_path, "recover-gamma")
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_dsm_outputs(tmp_path):
    code, out = run(tmp_path, "dsm")
    assert code == EXIT_OK
    rep = json.loads((out / "dsm_report.json").read_text())
    assert rep["factorizations"] == 1 and len(rep["samples"]) == 2
    names = {p.name for p in (out / "sample_000").iterdir()}
    assert {"truth.csv", "gamma_0.75_fused.csv", "gamma_0.75_fused.pgm",
            "gamma_0.75_l4.csv", "gamma_0.75_fused.csv.json"} <= names


@pytest.mark.parametrize("command", ["gen-data", "recover-gamma", "dsm"])
def test_outputs_deterministic_across_runs_and_threads(tmp_path, command):
    _, a = run(tmp_path, command, None, "--threads", "1", name="a")
    _, b = run(tmp_path, command, None, "--threads", "1", name="b")
    _, c = run(tmp_path, command, None, "--threads", "3", name="c")
    fa = files(a)
    assert fa and fa == files(b) == files(c)


def test_seed_flag_changes_data(tmp_path):
    _, a = run(tmp_path, "gen-data", None, "--seed", "1", name="a")
    _, b = run(tmp_path, "gen-data", None, "--seed", "2", name="b")
    assert files(a) != files(b)


def test_square_boundary_eigenvalues():
    np.testing.assert_allclose(cli.square_boundary_eigenvalues([1, 2, 3]),
                               [(np.pi / 4) ** 2] * 2 + [(np.pi / 2) ** 2])

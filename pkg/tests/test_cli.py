import csv
import json
import logging

import pytest

from fr_minmax.cli import _reruns_identical, main
from fr_minmax.experiment import SWEEP_COLUMNS

GRID = {"kind": "uniform", "lo": 0.0, "hi": 1.0, "n": 32}
GAUSS = {"nu": {"type": "gibbs", "potential": "quadratic", "params": {"scale": 20.0, "center": 0.25}},
         "mu": {"type": "gibbs", "potential": "quadratic", "params": {"scale": 20.0, "center": 0.75}}}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _flow_cfg(**method):
    m = {"name": "flow", "scheme": "euler_log", "dt": 0.01, "T": 10.0}
    m.update(method)
    return {"schema": "fr-minmax/v1", "game": {"generator": "smooth_sin", "grid": GRID}, "sigma": 1.0,
            "init": GAUSS, "method": m, "seed": 3}


def _mne_cfg(max_iter):
    return {"game": {"generator": "smooth_sin", "grid": dict(GRID, n=16)}, "sigma": 1.0,
            "references": {"pi": {"type": "gibbs", "potential": "quadratic", "params": {"scale": 10.0}}},
            "method": {"name": "solve_mne", "max_iter": max_iter, "n_probes": 50}}


def test_run_flow_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", _write(tmp_path, _flow_cfg()), "--out-dir", str(out)]) == 0
    for f in ("trajectory.csv", "lyapunov.csv", "summary.json", "equilibrium/equilibrium.json",
              "equilibrium/nu_star.csv", "equilibrium/mu_star.csv"):
        assert (out / f).is_file(), f
    assert "PASS" in capsys.readouterr().out
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] and summary["config"]["seed"] == 3


def test_run_failing_checks_exit_2(tmp_path):
    cfg = _write(tmp_path, _mne_cfg(max_iter=1))
    assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2


def test_run_mne_passes(tmp_path):
    cfg = _write(tmp_path, _mne_cfg(max_iter=100_000))
    assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize("cfg", [
    {"game": {"generator": "nope"}},
    {"schema": "other/v9", "game": {"generator": "smooth_sin"}},
    {"game": {"generator": "smooth_sin", "grid": GRID}, "sigma": -1.0},
    {"game": {"generator": "smooth_sin", "grid": GRID}, "method": {"name": "teleport"}},
    {"game": {"generator": "smooth_sin", "grid": GRID}, "method": {"name": "flow", "dt": 5.0, "T": 1.0}},
])
def test_bad_config_exit_1(tmp_path, cfg):
    assert main(["run", "--config", _write(tmp_path, cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_missing_and_invalid_config_exit_1(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 1


def test_stability_guard_is_config_error(tmp_path):
    cfg = _flow_cfg(dt=0.9, T=2.0)
    assert main(["run", "--config", _write(tmp_path, cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_reruns_byte_identical(tmp_path):
    cfg = _write(tmp_path, _flow_cfg())
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out-dir", str(a)]) == 0
    assert main(["run", "--config", cfg, "--out-dir", str(b)]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    assert _reruns_identical(0)


def test_summary_config_reproduces_run(tmp_path):
    a = tmp_path / "a"
    assert main(["run", "--config", _write(tmp_path, _flow_cfg()), "--out-dir", str(a)]) == 0
    resolved = json.loads((a / "summary.json").read_text())["config"]
    b = tmp_path / "b"
    assert main(["run", "--config", _write(tmp_path, resolved, "again.json"), "--out-dir", str(b)]) == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_mda_run(tmp_path):
    cfg = {"game": {"generator": "appendix_d_phi", "grid": {"kind": "uniform", "lo": -1.0, "hi": 1.0, "n": 201}},
           "sigma": 0.5, "convention": "appendix_d",
           "method": {"name": "mda", "eta": 0.1, "n_steps": 200, "record_every": 10}}
    out = tmp_path / "o"
    assert main(["run", "--config", _write(tmp_path, cfg), "--out-dir", str(out)]) == 0
    rows = list(csv.reader((out / "mda.csv").open()))
    assert rows[0][0] == "n" and len(rows) == 22


@pytest.mark.parametrize("threads", [1, 2])
def test_sweep(tmp_path, threads):
    cfg = _flow_cfg(dt=0.01)
    cfg["method"].pop("T")
    cfg["sweep"] = {"sigma": [1.0, 2.0]}
    out = tmp_path / "s"
    assert main(["sweep", "--config", _write(tmp_path, cfg), "--out-dir", str(out),
                 "--threads", str(threads)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    assert [float(r["sigma"]) for r in rows] == [1.0, 2.0]
    assert all(r["checks_passed"] == "true" for r in rows)
    assert (out / "sweep_config.json").is_file()


def test_sweep_threads_agree(tmp_path):
    cfg = _flow_cfg(dt=0.01)
    cfg["method"].pop("T")
    cfg["sweep"] = {"sigma": [1.0, 2.0]}
    path = _write(tmp_path, cfg)
    main(["sweep", "--config", path, "--out-dir", str(tmp_path / "one"), "--threads", "1"])
    main(["sweep", "--config", path, "--out-dir", str(tmp_path / "two"), "--threads", "2"])
    assert (tmp_path / "one" / "sweep.csv").read_bytes() == (tmp_path / "two" / "sweep.csv").read_bytes()


def test_empty_sweep_and_bad_threads(tmp_path):
    cfg = _flow_cfg()
    cfg["sweep"] = {"sigma": []}
    path = _write(tmp_path, cfg)
    assert main(["sweep", "--config", path, "--out-dir", str(tmp_path / "s")]) == 1
    assert main(["sweep", "--config", path, "--threads", "0"]) == 1


def test_log_env_overrides_flag(tmp_path, monkeypatch):
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    monkeypatch.setenv("FR_MINMAX_LOG", "DEBUG")
    main(["run", "--config", _write(tmp_path, _mne_cfg(100)), "--out-dir", str(tmp_path / "o"),
          "--log-level", "ERROR"])
    assert root.level == logging.DEBUG
    for h in list(root.handlers):
        root.removeHandler(h)


def test_validate_command(tmp_path, capsys):
    assert main(["validate", "--out-dir", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "validation.json").read_text())
    assert doc["passed"] and any(c["name"] == "determinism" for c in doc["checks"])
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("name", ["smooth_sin_flow", "clipped_quadratic_mda", "matching_pennies_mne", "sigma_sweep"])
def test_shipped_configs_resolve(name):
    from pathlib import Path

    from fr_minmax.experiment import build_setup, load_config

    cfg = load_config(Path(__file__).parent.parent / "configs" / f"{name}.json")
    build_setup(cfg)

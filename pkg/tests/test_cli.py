import json
import subprocess
import sys

import numpy as np
import pytest

from mckean.cli import main
from mckean.parametrix import beta_function


def write_config(path, **overrides):
    cfg = {"problem": "gaussian", "seed": 7,
           "initial": {"n_particles": 400, "mean": 0.0, "std": 1.0},
           "simulation": {"t": 0.0, "horizon": 0.5, "n_steps": 32}}
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def test_constants_rows(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       constants={"C": 1.0, "gamma": 1.0, "k_max": 3})
    assert main(["constants", str(cfg), "-o", str(tmp_path)]) == 0
    lines = (tmp_path / "constants.csv").read_text().splitlines()
    assert lines[0] == "k,value,asymptotic"
    rows = [line.split(",") for line in lines[1:]]
    assert float(rows[0][1]) == 1.0
    assert float(rows[1][1]) == pytest.approx(np.pi, abs=1e-12)
    assert float(rows[2][1]) == pytest.approx(np.pi * beta_function(1.0, 0.5),
                                              rel=1e-12)


def test_simulate_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    assert main(["simulate", str(cfg), "-o", str(out1)]) == 0
    assert main(["simulate", str(cfg), "-o", str(out2)]) == 0
    assert (out1 / "paths.csv").read_bytes() == (out2 / "paths.csv").read_bytes()
    assert (out1 / "flow.csv").read_bytes() == (out2 / "flow.csv").read_bytes()


def test_picard_output(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["picard", str(cfg), "-o", str(tmp_path)]) == 0
    lines = (tmp_path / "picard.csv").read_text().splitlines()
    assert lines[0] == "iteration,increment,w2_gap"
    # law-independent problem: the second increment vanishes exactly
    assert float(lines[2].split(",")[1]) == 0.0


def test_density_output(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       density={"x": 0.0, "s": 0.4, "order": 2})
    assert main(["density", str(cfg), "-o", str(tmp_path)]) == 0
    lines = (tmp_path / "density.csv").read_text().splitlines()
    assert lines[0] == "k,s_prime,y_prime,s,y,value"
    ks = {line.split(",")[0] for line in lines[1:]}
    assert ks == {"0", "1", "2"}


def test_scan_output(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       initial={"n_particles": 64},
                       scan={"phi": "identity", "replicates": 2})
    assert main(["derivative-scan", str(cfg), "-o", str(tmp_path)]) == 0
    lines = (tmp_path / "scan.csv").read_text().splitlines()
    assert lines[0] == "log_dt,log_mag,slope,intercept,r_squared"
    slope = float(lines[1].split(",")[2])
    assert abs(slope) <= 1e-3


def test_u_check_output(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       u_check={"x": 0.0, "order": 2, "n_paths": 2000})
    assert main(["u-check", str(cfg), "-o", str(tmp_path)]) == 0
    header, row = (tmp_path / "u.csv").read_text().splitlines()
    assert header == ("horizon,feynman_kac,stderr,parametrix,abs_diff,"
                      "tolerance")
    vals = dict(zip(header.split(","), map(float, row.split(","))))
    assert vals["abs_diff"] <= vals["tolerance"]


def test_verify_gaussian_passes(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       initial={"n_particles": 400},
                       verify={"order": 2, "s_list": [0.1, 0.25]})
    assert main(["verify", str(cfg), "-o", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "verify.json").read_text())
    assert all(entry["pass"] for entry in summary.values())
    assert "kernel_bound" in summary


def test_config_schema_error_is_exit_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"problem": "unknown", "seed": 1}))
    assert main(["simulate", str(bad), "-o", str(tmp_path)]) == 2
    missing = tmp_path / "missing.json"
    assert main(["simulate", str(missing), "-o", str(tmp_path)]) == 2
    notjson = tmp_path / "notjson.json"
    notjson.write_text("{nope")
    assert main(["simulate", str(notjson), "-o", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       constants={"C": 2.0, "gamma": 0.5, "k_max": 2})
    proc = subprocess.run(
        [sys.executable, "-m", "mckean.cli", "constants", str(cfg),
         "-o", str(tmp_path)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "constants.csv").exists()

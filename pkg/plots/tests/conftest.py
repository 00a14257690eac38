import json
import subprocess
import sys

import pytest


@pytest.fixture(scope="session")
def golden_dir(tmp_path_factory):
    """CSV outputs produced by driving the simulation package's CLI.

    The figure layer couples to the simulation package only through these
    files, so the fixtures are generated through its public command line.
    """
    out = tmp_path_factory.mktemp("golden")
    cfg = {
        "problem": "holder-diffusion",
        "seed": 7,
        "initial": {"n_particles": 2000, "mean": 0.0, "std": 1e-9},
        "simulation": {"t": 0.0, "horizon": 0.25, "n_steps": 64},
        "density": {"x": 0.0, "s": 0.25, "order": 3},
        "constants": {"C": 1.0, "gamma": 0.5, "k_max": 12},
        "scan": {"phi": "sqrt", "replicates": 3},
    }
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    for command in ("simulate", "picard", "density", "constants",
                    "derivative-scan"):
        proc = subprocess.run(
            [sys.executable, "-m", "mckean.cli", command, str(cfg_path),
             "-o", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, (command, proc.stderr)
    return out

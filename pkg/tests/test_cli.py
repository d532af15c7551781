import json
import subprocess
import sys

from fdhybf.cli import main
from fdhybf.harness import CSV_HEADER, read_csv
from fdhybf.scenario import load_config, profile

TINY = """profile = "desk"
num_cells = 1
bs_tx_antennas = 4
bs_rx_antennas = 4
rf_chains = 2
ul_user_antennas = 2
dl_user_antennas = 2
max_iters = 2
realizations = 2
"""


def _write(tmp_path, text):
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    return p


def test_validate_prints_hash(tmp_path, capsys):
    p = _write(tmp_path, TINY)
    assert main(["validate", "--config", str(p)]) == 0
    out = capsys.readouterr().out.strip()
    assert out == f"ok {load_config(p, profile('desk')).config_hash()}"


def test_bad_config_exits_with_two(tmp_path, capsys):
    p = _write(tmp_path, "rf_chains = 99\n")
    assert main(["validate", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("configuration error [")


def test_bad_sweep_exits_with_two(tmp_path, capsys):
    p = _write(tmp_path, TINY)
    assert main(["run", "--config", str(p), "--sweep", "mood=1"]) == 2
    assert "[mood]" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["validate", "--config", str(tmp_path / "nope.toml")]) == 3
    assert capsys.readouterr().err.startswith("i/o error")


def test_run_writes_csv(tmp_path, capsys):
    p = _write(tmp_path, TINY)
    out = tmp_path / "out.csv"
    code = main(["run", "--config", str(p), "--solvers", "c_hybf,hd_digital", "--out", str(out),
                 "--sweep", "snr_db=10,20", "--summary"])
    assert code == 0
    recs = read_csv(out)
    assert len(recs) == 2 * 2 * 2
    assert out.read_text().split("\n")[0] == ",".join(CSV_HEADER)
    assert "solver=c_hybf" in capsys.readouterr().err


def test_run_to_stdout(tmp_path, capsys):
    p = _write(tmp_path, TINY)
    assert main(["run", "--config", str(p), "--realizations", "1"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) >= 2


def test_oracle_quick(tmp_path):
    out = tmp_path / "oracle.jsonl"
    assert main(["oracle", "--quick", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert rows and all(r["passed"] for r in rows)
    assert {"gradient_fd", "covariance_mc", "gde_residual"} <= {r["oracle"] for r in rows}


def test_module_entry_point(tmp_path):
    p = _write(tmp_path, TINY)
    res = subprocess.run([sys.executable, "-m", "fdhybf.cli", "validate", "--config", str(p)],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.startswith("ok ")

import io
import math
import time

import numpy as np
import pytest

from fdhybf.errors import ConfigError
from fdhybf.harness import (CSV_HEADER, DETERMINISTIC_ENV, ExperimentRecord, csv_text,
                            deterministic_mode, parse_sweep, read_csv, run_experiment,
                            summarize, sweep_points, time_phase, write_csv)
from fdhybf.verification import small_config


def _tiny(**kw):
    return small_config(num_cells=1, max_iters=3, **kw)


def _record(n=3, solver="c_hybf", gain=math.nan):
    return ExperimentRecord(config_hash="abc", seed=7, solver=solver, snr_db=20.0, ldr_db=-80.0,
                            rf_chains=8, phase_bits=10, wsr=0.3 * n,
                            wsr_trace=[0.1 * (i + 1) + 1e-17 for i in range(n)],
                            wall_ms=[1.5] * n, residual_power=[-1e-12] * n,
                            residual_phase=[0.0] * n, messages=[2] * n, gain_pct=gain)


# csv ------------------------------------------------------------------------------------
def test_header_only_for_empty_stream(tmp_path):
    p = tmp_path / "out.csv"
    assert write_csv([], p) == 0
    assert p.read_bytes() == (",".join(CSV_HEADER) + "\n").encode()


def test_header_is_exact():
    assert ",".join(CSV_HEADER) == ("config_hash,seed,solver,snr_db,ldr_db,rf_chains,phase_bits,"
                                    "iter,wsr_nats,wall_ms_phase,residual_power,residual_phase,"
                                    "gain_pct,messages")


def test_one_row_per_iteration():
    buf = io.StringIO()
    assert write_csv([_record(3)], buf) == 3
    lines = buf.getvalue().split("\n")
    assert len(lines) == 5 and lines[-1] == ""
    assert lines[1].split(",")[7] == "1" and lines[3].split(",")[7] == "3"
    assert "\r" not in buf.getvalue()


def test_roundtrip_exact(tmp_path):
    recs = [_record(3), _record(2, solver="hd_digital", gain=12.5), _record(1, solver="pd_hybf")]
    p = tmp_path / "r.csv"
    write_csv(recs, p)
    back = read_csv(p)
    assert [r.csv_fields() for r in back] == [r.csv_fields() for r in recs]
    assert all(r.wsr == r.wsr_trace[-1] for r in back)


def test_seventeen_digit_floats():
    text = csv_text([_record(1)])
    value = text.split("\n")[1].split(",")[8]
    assert float(value) == 0.1 + 1e-17 and value == format(0.1 + 1e-17, ".17g")


def test_read_rejects_foreign_header():
    with pytest.raises(ValueError):
        read_csv(io.StringIO("a,b\n"))


def test_write_to_bad_path(tmp_path):
    with pytest.raises(OSError):
        write_csv([], tmp_path / "missing" / "x.csv")


# sweeps -----------------------------------------------------------------------------------
def test_parse_sweep():
    sw = parse_sweep(["snr_db=0,10", "rf_chains=2"])
    assert sw == {"snr_db": [0.0, 10.0], "rf_chains": [2]}
    assert list(sw) == ["snr_db", "rf_chains"]


@pytest.mark.parametrize("item,key", [("snr_db", "snr_db"), ("bogus=1", "bogus"),
                                      ("snr_db=a", "snr_db"), ("snr_db=", "snr_db")])
def test_parse_sweep_errors(item, key):
    with pytest.raises(ConfigError) as exc:
        parse_sweep([item])
    assert exc.value.key == key


def test_sweep_points_order():
    pts = list(sweep_points(_tiny(), {"snr_db": [0, 10], "rf_chains": [2, 4]}))
    assert [(p.snr_db, p.bs_tx_rf) for p in pts] == [(0, 2), (0, 4), (10, 2), (10, 4)]
    assert len(list(sweep_points(_tiny(), None))) == 1


# experiments -------------------------------------------------------------------------------
def test_pairing_one_point_two_solvers():
    recs = list(run_experiment(_tiny(), solvers=("c_hybf", "pd_hybf"), realizations=1))
    assert [r.solver for r in recs] == ["c_hybf", "pd_hybf"]
    assert recs[0].channel_digest == recs[1].channel_digest
    assert recs[0].initial_wsr == recs[1].initial_wsr


def test_realizations_use_distinct_seeds():
    recs = list(run_experiment(_tiny(), realizations=3))
    assert [r.seed for r in recs] == [0, 1, 2]
    assert len({r.channel_digest for r in recs}) == 3


def test_gain_column_filled_with_hd():
    recs = list(run_experiment(_tiny(), solvers=("c_hybf", "hd_digital"), realizations=1))
    hd = recs[1].wsr
    assert np.isclose(recs[0].gain_pct, 100.0 * (recs[0].wsr - hd) / hd)
    assert recs[1].gain_pct == 0.0


def test_unknown_solver():
    with pytest.raises(ConfigError) as exc:
        list(run_experiment(_tiny(), solvers=("magic",)))
    assert exc.value.key == "solvers"


def test_deterministic_csv_bytes(monkeypatch):
    monkeypatch.setenv(DETERMINISTIC_ENV, "1")
    assert deterministic_mode()
    cfg = _tiny()
    a = csv_text(run_experiment(cfg, solvers=("c_hybf", "pd_hybf"), realizations=2, jobs=2))
    b = csv_text(run_experiment(cfg, solvers=("c_hybf", "pd_hybf"), realizations=2))
    assert a == b
    rows = [line.split(",") for line in a.strip().split("\n")[1:]]
    assert all(float(r[9]) == 0.0 for r in rows)


def test_deterministic_flag_values(monkeypatch):
    for value, expect in (("", False), ("0", False), ("1", True), ("yes", True)):
        monkeypatch.setenv(DETERMINISTIC_ENV, value)
        assert deterministic_mode() is expect


def test_process_pool_matches_serial(monkeypatch):
    monkeypatch.delenv(DETERMINISTIC_ENV, raising=False)
    cfg = _tiny()
    a = [r.wsr_trace for r in run_experiment(cfg, realizations=2, jobs=2)]
    b = [r.wsr_trace for r in run_experiment(cfg, realizations=2, jobs=1)]
    assert a == b


def test_mean_wsr_monotone_in_snr():
    cfg = small_config(max_iters=15)
    recs = list(run_experiment(cfg, sweep={"snr_db": [0, 10, 20, 30]},
                               solvers=("c_hybf", "fd_digital"), realizations=3))
    for solver in ("c_hybf", "fd_digital"):
        means = [s["wsr_mean"] for s in summarize(recs) if s["solver"] == solver]
        assert len(means) == 4
        assert all(b >= a for a, b in zip(means, means[1:]))


def test_summarize_statistics():
    recs = [_record(1, gain=10.0), _record(2, gain=20.0)]
    (s,) = summarize(recs)
    assert s["n"] == 2 and np.isclose(s["wsr_mean"], 0.45)
    assert np.isclose(s["gain_mean"], 15.0) and np.isclose(s["gain_se"], 5.0)


# timing ----------------------------------------------------------------------------------
def test_time_phase_noop():
    result, dt = time_phase("x", lambda: 42)
    assert result == 42 and dt >= 0


def test_nested_phases_within_outer():
    sink = {}

    def outer():
        for label in ("a", "b"):
            time_phase(label, lambda: time.sleep(0.01), sink)

    _, total = time_phase("outer", outer, sink)
    assert sink["a"] + sink["b"] <= 1.05 * total
    assert sink["outer"] == total

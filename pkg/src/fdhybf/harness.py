"""
Experiment orchestration: sweeps, paired Monte-Carlo realizations, timing
and CSV output.

At every sweep point and realization one channel set is drawn and handed
to every requested solver, so solver comparisons are paired. Records are
produced in the fixed order (point, realization, solver) whatever the
size of the realization pool.

Setting ``HYBF_DETERMINISTIC=1`` pins the BLAS thread pools to one thread
(when set before numpy is first imported, see :mod:`fdhybf`), runs
realizations serially and writes zeros in the wall-time column, which
makes the CSV byte-identical across reruns on the same platform.
"""
import csv
import io
import itertools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import gain, run_fully_digital_fd, run_fully_digital_hd
from .chybf import run_c_hybf
from .errors import ConfigError
from .pdhybf import run_pd_hybf
from .scenario import draw_network_channels, make_rng

__all__ = [
    "SOLVERS", "SWEEP_KEYS", "CSV_HEADER", "ExperimentRecord", "run_experiment",
    "write_csv", "read_csv", "time_phase", "deterministic_mode", "parse_sweep",
    "sweep_points", "summarize", "csv_text",
]

SOLVERS = ("c_hybf", "pd_hybf", "fd_digital", "hd_digital")
SWEEP_KEYS = ("snr_db", "ldr_db", "rf_chains", "phase_bits")
CSV_HEADER = ("config_hash", "seed", "solver", "snr_db", "ldr_db", "rf_chains", "phase_bits",
              "iter", "wsr_nats", "wall_ms_phase", "residual_power", "residual_phase",
              "gain_pct", "messages")
DETERMINISTIC_ENV = "HYBF_DETERMINISTIC"


def deterministic_mode():
    """True when ``HYBF_DETERMINISTIC`` is set to a non-empty value other than 0."""
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0")


def time_phase(label, thunk, sink: Optional[Dict[str, float]] = None):
    """
    Run ``thunk()`` and measure it on the monotonic clock.

    Returns ``(result, seconds)``; with ``sink`` given, the duration is
    also added to ``sink[label]``.
    """
    t0 = time.perf_counter()
    result = thunk()
    dt = time.perf_counter() - t0
    if sink is not None:
        sink[label] = sink.get(label, 0.0) + dt
    return result, dt


@dataclass
class ExperimentRecord:
    """Outcome of one solver on one (sweep point, realization)."""

    config_hash: str
    seed: int
    solver: str
    snr_db: float
    ldr_db: float
    rf_chains: int
    phase_bits: int
    wsr: float
    wsr_trace: List[float]
    wall_ms: List[float]
    residual_power: List[float]
    residual_phase: List[float]
    messages: List[int]
    gain_pct: float = math.nan
    phase_times: List[dict] = field(default_factory=list, repr=False)
    channel_digest: str = ""
    initial_wsr: float = math.nan

    def csv_fields(self):
        """Everything the CSV representation carries, for comparisons."""
        return (self.config_hash, self.seed, self.solver, self.snr_db, self.ldr_db,
                self.rf_chains, self.phase_bits, tuple(self.wsr_trace), tuple(self.wall_ms),
                tuple(self.residual_power), tuple(self.residual_phase), tuple(self.messages),
                _nan_key(self.gain_pct))


def _nan_key(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else x


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------
def parse_sweep(items: Sequence[str]):
    """
    Parse ``KEY=V1,V2,...`` strings into an ordered ``{key: [values]}``.

    Raises
    ------
    ConfigError
        For malformed items or keys outside :data:`SWEEP_KEYS`.
    """
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"sweep item {item!r} is not KEY=V1,V2,...", item)
        key, values = item.split("=", 1)
        key = key.strip()
        if key not in SWEEP_KEYS:
            raise ConfigError(f"cannot sweep {key!r}; choose from {', '.join(SWEEP_KEYS)}", key)
        conv = int if key in ("rf_chains", "phase_bits") else float
        try:
            out[key] = [conv(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad value list for {key!r}: {values!r}", key) from None
        if not out[key]:
            raise ConfigError(f"empty value list for {key!r}", key)
    return out


def sweep_points(cfg, sweep):
    """Configurations of the Cartesian product of ``sweep`` (first key slowest)."""
    sweep = dict(sweep or {})
    for key in sweep:
        if key not in SWEEP_KEYS:
            raise ConfigError(f"cannot sweep {key!r}", key)
    keys = list(sweep)
    for combo in itertools.product(*[sweep[k] for k in keys]):
        yield cfg.replace(**dict(zip(keys, combo)))


def _point_values(cfg):
    ldr = cfg.ldr_tx_db if cfg.ldr_tx_db == cfg.ldr_rx_db else max(cfg.ldr_tx_db, cfg.ldr_rx_db)
    return float(cfg.snr_db), float(ldr), int(cfg.bs_tx_rf), int(cfg.phase_bits)


def _run_solver(name, cfg, channels, pd_workers):
    if name == "c_hybf":
        return run_c_hybf(cfg, channels)
    if name == "pd_hybf":
        return run_pd_hybf(cfg, channels, workers=pd_workers)
    if name == "fd_digital":
        return run_fully_digital_fd(cfg, channels)
    if name == "hd_digital":
        return run_fully_digital_hd(cfg, channels)
    raise ConfigError(f"unknown solver {name!r}; choose from {', '.join(SOLVERS)}", "solvers")


def _realization(args):
    cfg, seed, solvers, pd_workers, zero_wall = args
    channels = draw_network_channels(make_rng(seed), cfg)
    digest = channels.digest()
    snr, ldr, rf, bits = _point_values(cfg)
    chash = cfg.config_hash()
    out = []
    for name in solvers:
        if channels.digest() != digest:
            raise RuntimeError("channel set was modified by a solver")
        _, tr = _run_solver(name, cfg, channels, pd_workers)
        wall = [0.0 if zero_wall else 1e3 * sum(p.values()) for p in tr.phase_times]
        out.append(ExperimentRecord(
            config_hash=chash, seed=seed, solver=name, snr_db=snr, ldr_db=ldr, rf_chains=rf,
            phase_bits=bits, wsr=float(tr.final_wsr), wsr_trace=[float(x) for x in tr.wsr],
            wall_ms=wall, residual_power=[float(x) for x in tr.residual_power],
            residual_phase=[float(x) for x in tr.residual_phase],
            messages=[int(m) for m in tr.messages], phase_times=list(tr.phase_times),
            channel_digest=digest, initial_wsr=float(tr.initial_wsr)))
    hd = [r for r in out if r.solver == "hd_digital"]
    if hd and hd[0].wsr > 0:
        for r in out:
            r.gain_pct = gain(r.wsr, hd[0].wsr)
    return out


def run_experiment(cfg, sweep=None, solvers=("c_hybf",), realizations=None, jobs=1,
                   pd_workers=2):
    """
    Yield one :class:`ExperimentRecord` per (sweep point, realization, solver).

    Realization r uses seed ``cfg.seed + r`` at every sweep point. When
    ``hd_digital`` is among the solvers, every record of the same
    realization carries its gain over the HD benchmark.

    Parameters
    ----------
    cfg : NetworkConfig
    sweep : dict, optional
        ``{key: values}`` over :data:`SWEEP_KEYS`.
    solvers : sequence of str
        Subset of :data:`SOLVERS`.
    realizations : int, optional
        Defaults to ``cfg.realizations``.
    jobs : int
        Size of the process pool running realizations (1: in-process).
    pd_workers : int
        Worker count passed to the distributed solver.

    Raises
    ------
    ConfigError
        For unknown solvers or sweep keys.
    """
    solvers = list(solvers)
    for name in solvers:
        if name not in SOLVERS:
            raise ConfigError(f"unknown solver {name!r}; choose from {', '.join(SOLVERS)}",
                              "solvers")
    n = cfg.realizations if realizations is None else int(realizations)
    det = deterministic_mode()
    tasks = [(pcfg, pcfg.seed + r, solvers, pd_workers, det)
             for pcfg in sweep_points(cfg, sweep) for r in range(n)]
    if jobs <= 1 or det or len(tasks) < 2:
        for t in tasks:
            yield from _realization(t)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for recs in pool.map(_realization, tasks):
            yield from recs


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------
def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    return str(x)


def _rows(rec):
    for i, value in enumerate(rec.wsr_trace):
        yield (rec.config_hash, rec.seed, rec.solver, rec.snr_db, rec.ldr_db, rec.rf_chains,
               rec.phase_bits, i + 1, value, rec.wall_ms[i], rec.residual_power[i],
               rec.residual_phase[i], rec.gain_pct, rec.messages[i])


def write_csv(records, path_or_file):
    """
    Write records as CSV, one row per (record, iteration).

    UTF-8, LF line endings, floats with 17 significant digits. Accepts a
    path or a text file object. Returns the number of data rows.
    """
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", encoding="utf-8", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        count = 0
        for rec in records:
            for row in _rows(rec):
                w.writerow([_fmt(x) for x in row])
                count += 1
    finally:
        if own:
            fh.close()
    return count


def read_csv(path_or_file):
    """Parse a file written by :func:`write_csv` back into records."""
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, encoding="utf-8", newline="") if own else path_or_file
    try:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError("unexpected CSV header")
        records, current, key = [], None, None
        for row in reader:
            d = dict(zip(CSV_HEADER, row))
            k = (d["config_hash"], d["seed"], d["solver"], d["snr_db"], d["ldr_db"],
                 d["rf_chains"], d["phase_bits"])
            if current is None or k != key or int(d["iter"]) != len(current.wsr_trace) + 1:
                current = ExperimentRecord(
                    config_hash=d["config_hash"], seed=int(d["seed"]), solver=d["solver"],
                    snr_db=float(d["snr_db"]), ldr_db=float(d["ldr_db"]),
                    rf_chains=int(d["rf_chains"]), phase_bits=int(d["phase_bits"]),
                    wsr=math.nan, wsr_trace=[], wall_ms=[], residual_power=[],
                    residual_phase=[], messages=[], gain_pct=float(d["gain_pct"]))
                records.append(current)
                key = k
            current.wsr_trace.append(float(d["wsr_nats"]))
            current.wall_ms.append(float(d["wall_ms_phase"]))
            current.residual_power.append(float(d["residual_power"]))
            current.residual_phase.append(float(d["residual_phase"]))
            current.messages.append(int(d["messages"]))
            current.wsr = current.wsr_trace[-1]
        return records
    finally:
        if own:
            fh.close()


def csv_text(records):
    """CSV of ``records`` as a string."""
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue()


def summarize(records):
    """
    Mean and standard error of the final WSR and gain per (point, solver).

    Returns a list of dicts in first-appearance order.
    """
    groups = {}
    for r in records:
        groups.setdefault((r.snr_db, r.ldr_db, r.rf_chains, r.phase_bits, r.solver), []).append(r)
    out = []
    for (snr, ldr, rf, bits, solver), recs in groups.items():
        w = np.array([r.wsr for r in recs])
        g = np.array([r.gain_pct for r in recs])
        g = g[~np.isnan(g)]
        se = lambda x: float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else math.nan
        out.append(dict(snr_db=snr, ldr_db=ldr, rf_chains=rf, phase_bits=bits, solver=solver,
                        n=len(recs), wsr_mean=float(w.mean()), wsr_se=se(w),
                        gain_mean=float(g.mean()) if len(g) else math.nan,
                        gain_se=se(g) if len(g) else math.nan))
    return out

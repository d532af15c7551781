"""
Fully digital benchmarks and the full-duplex gain metric.

The fully digital FD solver is the centralized solver with identity analog
stages. The HD benchmark serves DL and UL in separate time slots: two
independent fully digital problems, one without UL users and one without
DL users, so neither sees self-interference or cross-interference. Its
WSR is the time share times the sum of the two.
"""
from typing import NamedTuple

import numpy as np

from .chybf import SolverTrace, run_c_hybf

__all__ = [
    "GainReport", "gain", "run_fully_digital_fd", "run_fully_digital_hd",
    "DL_ONLY_ROLES", "UL_ONLY_ROLES",
]

# channel roles each half-duplex phase may read
DL_ONLY_ROLES = ("direct_dl", "bs_to_dl")
UL_ONLY_ROLES = ("direct_ul", "ul_to_bs")


class GainReport(NamedTuple):
    wsr_fd: float
    wsr_hd: float
    gain_percent: float

    @classmethod
    def make(cls, wsr_fd, wsr_hd):
        return cls(float(wsr_fd), float(wsr_hd), gain(wsr_fd, wsr_hd))


def gain(fd, hd):
    """
    Relative FD-over-HD gain in percent, ``100 (fd - hd) / hd``.

    Raises
    ------
    ZeroDivisionError
        If ``hd`` is zero.
    ValueError
        If ``hd`` is negative.
    """
    if hd == 0:
        raise ZeroDivisionError("HD rate is zero")
    if hd < 0:
        raise ValueError(f"HD rate must be positive, got {hd}")
    return 100.0 * (fd - hd) / hd


def run_fully_digital_fd(cfg, channels):
    """C-HYBF with ``W = I``, ``F = I``; analog updates and quantization skipped."""
    return run_c_hybf(cfg.replace(fully_digital=True), channels, solver_name="fd_digital")


def _pad(seq, n):
    seq = list(seq)
    return seq + [seq[-1]] * (n - len(seq)) if seq else [0.0] * n


def run_fully_digital_hd(cfg, channels):
    """
    Half-duplex fully digital benchmark.

    Returns
    -------
    ((BeamformerState, BeamformerState), SolverTrace)
        The DL-only and UL-only solutions, and a trace whose WSR entries
        are ``cfg.hd_time_share * (WSR_DL + WSR_UL)`` per iteration (the
        shorter run is held at its final value).
    """
    share = cfg.hd_time_share
    cfg_dl = cfg.replace(fully_digital=True, ul_users=0)
    cfg_ul = cfg.replace(fully_digital=True, dl_users=0)
    st_dl, tr_dl = run_c_hybf(cfg_dl, channels.restricted(DL_ONLY_ROLES), solver_name="hd_dl")
    st_ul, tr_ul = run_c_hybf(cfg_ul, channels.restricted(UL_ONLY_ROLES), solver_name="hd_ul")
    n = max(tr_dl.iterations, tr_ul.iterations)
    trace = SolverTrace(solver="hd_digital")
    trace.initial_wsr = share * (tr_dl.initial_wsr + tr_ul.initial_wsr)
    trace.wsr = [share * (a + b) for a, b in zip(_pad(tr_dl.wsr, n), _pad(tr_ul.wsr, n))]
    for i in range(n):
        times = {}
        for tag, tr in (("dl", tr_dl), ("ul", tr_ul)):
            if i < tr.iterations:
                times.update({f"{tag}:{k}": v for k, v in tr.phase_times[i].items()})
        trace.phase_times.append(times)
    trace.residual_power = [max(a, b) for a, b in zip(_pad(tr_dl.residual_power, n),
                                                      _pad(tr_ul.residual_power, n))]
    trace.residual_phase = [0.0] * n
    trace.multipliers = [{"dl": a, "ul": b} for a, b in zip(_pad(tr_dl.multipliers, n),
                                                            _pad(tr_ul.multipliers, n))]
    trace.messages = [0] * n
    trace.payload_bytes = [0] * n
    trace.flops = [float(np.add(a, b)) for a, b in zip(_pad(tr_dl.flops, n), _pad(tr_ul.flops, n))]
    trace.bisections = tr_dl.bisections + tr_ul.bisections
    trace.flags = tr_dl.flags + tr_ul.flags
    trace.converged = tr_dl.converged and tr_ul.converged
    return (st_dl, st_ul), trace

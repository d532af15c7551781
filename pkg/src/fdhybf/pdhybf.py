"""
Parallel and distributed hybrid beamforming.

Every BS runs a :class:`CellWorker` that owns its beamformer slice and a
:class:`~fdhybf.gradients.LocalState`. A round consists of

1. a barrier-synchronized exchange of :class:`FeedbackMessage` objects,
   each BS sending its slice to every other BS;
2. a refresh of the local variables from the received feedback;
3. the DL layers (digital directions, analog beamformer, common power
   multiplier) and then the UL layers (digital directions, per-user power
   multipliers, analog combiner) of each cell.

Per-link sub-tasks are mapped over a thread pool; their results are
collected in index order, so the output does not depend on the pool size
or on scheduling.
"""
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .chybf import (SolverTrace, _fixed_dl_directions, _multipliers, _wsr,
                    analog_candidate_accepted, bisect_multiplier, combiner_objective,
                    init_state, quantize_and_restore, solve_dl_powers, ul_evaluator, update_analog_beamformer, update_analog_combiner)
from .errors import DimensionMismatch, MissingFeedback
from .gradients import LocalState, assemble_view, local_from_context, prepare_state
from .model import (BeamformerState, NoiseProfile, Weights, check_constraints,
                    covariance_bundle, tx_covariances)
from .numerics import gde

__all__ = [
    "FeedbackMessage", "InProcessBus", "CellWorker", "solve_ul_layers", "solve_dl_layers",
    "run_pd_hybf", "pd_flops",
]

_MAGIC = b"HYBF"
_VERSION = 1
_HEADER = struct.Struct("<4sHqqII")


def _pack_array(a):
    a = np.ascontiguousarray(np.asarray(a, dtype="<c16"))
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def _unpack_array(buf, off):
    (ndim,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, dtype="<c16", count=count, offset=off).reshape(shape).astype(complex)
    return a, off + 16 * count


@dataclass(frozen=True)
class FeedbackMessage:
    """
    Beamformers one BS shares with its neighbors after a round.

    Wire layout (all little-endian): a header ``magic "HYBF", uint16
    version, int64 sender, int64 round, uint32 n_ul, uint32 n_dl``
    followed by arrays in the order ``W, F, U_0, pu_0, ..., V_0, pd_0,
    ...``. Each array is ``uint32 ndim``, ``ndim`` uint32 dimensions, then
    row-major complex128 entries; powers travel as complex numbers with
    zero imaginary part.
    """

    sender: int
    round: int
    W: np.ndarray
    F: np.ndarray
    U: tuple
    pu: tuple
    V: tuple
    pd: tuple

    @classmethod
    def from_slice(cls, sender, round_index, sl):
        return cls(sender, round_index, sl["W"].copy(), sl["F"].copy(),
                   tuple(u.copy() for u in sl["U"]), tuple(np.asarray(p, float).copy() for p in sl["pu"]),
                   tuple(v.copy() for v in sl["V"]), tuple(np.asarray(p, float).copy() for p in sl["pd"]))

    def as_slice(self):
        return dict(U=[u.copy() for u in self.U], pu=[p.copy() for p in self.pu],
                    V=[v.copy() for v in self.V], pd=[p.copy() for p in self.pd],
                    W=self.W.copy(), F=self.F.copy())

    def encode(self):
        parts = [_HEADER.pack(_MAGIC, _VERSION, self.sender, self.round, len(self.U), len(self.V)),
                 _pack_array(self.W), _pack_array(self.F)]
        for u, p in zip(self.U, self.pu):
            parts += [_pack_array(u), _pack_array(p)]
        for v, p in zip(self.V, self.pd):
            parts += [_pack_array(v), _pack_array(p)]
        return b"".join(parts)

    @classmethod
    def decode(cls, buf):
        buf = bytes(buf)
        magic, version, sender, rnd, n_ul, n_dl = _HEADER.unpack_from(buf, 0)
        if magic != _MAGIC or version != _VERSION:
            raise DimensionMismatch("not a feedback message of a known version")
        off = _HEADER.size
        W, off = _unpack_array(buf, off)
        F, off = _unpack_array(buf, off)
        U, pu, V, pd = [], [], [], []
        for _ in range(n_ul):
            u, off = _unpack_array(buf, off)
            p, off = _unpack_array(buf, off)
            U.append(u)
            pu.append(p.real.copy())
        for _ in range(n_dl):
            v, off = _unpack_array(buf, off)
            p, off = _unpack_array(buf, off)
            V.append(v)
            pd.append(p.real.copy())
        if off != len(buf):
            raise DimensionMismatch(f"{len(buf) - off} trailing bytes in feedback message")
        return cls(sender, rnd, W, F, tuple(U), tuple(pu), tuple(V), tuple(pd))

    def check_shapes(self, cfg):
        """Raise DimensionMismatch if any field disagrees with ``cfg``."""
        want = [(self.W, (cfg.bs_tx_antennas, cfg.tx_rf)), (self.F, (cfg.bs_rx_antennas, cfg.rx_rf))]
        want += [(u, (cfg.ul_user_antennas, cfg.ul_streams)) for u in self.U]
        want += [(v, (cfg.tx_rf, cfg.dl_streams)) for v in self.V]
        for a, shape in want:
            if a.shape != shape:
                raise DimensionMismatch(f"feedback field has shape {a.shape}, expected {shape}")


class InProcessBus:
    """
    Round-barrier message bus carrying encoded feedback.

    ``drop`` is a set of ``(sender, receiver)`` pairs whose messages are
    lost; it exists to exercise the failure path.
    """

    def __init__(self, num_cells, drop=()):
        self.num_cells = num_cells
        self.drop = set(drop)
        self._outbox = {}
        self.last_round = {}

    def post(self, msg):
        prev = self.last_round.get(msg.sender)
        if prev is not None and msg.round <= prev:
            raise ValueError(f"round index of cell {msg.sender} is not increasing")
        self.last_round[msg.sender] = msg.round
        self._outbox[msg.sender] = msg.encode()

    def barrier(self):
        """
        Deliver every posted message; returns ``(inboxes, messages, bytes)``.
        """
        inboxes = {b: [] for b in range(self.num_cells)}
        count = nbytes = 0
        for s in sorted(self._outbox):
            payload = self._outbox[s]
            for r in range(self.num_cells):
                if r == s or (s, r) in self.drop:
                    continue
                inboxes[r].append(FeedbackMessage.decode(payload))
                count += 1
                nbytes += len(payload)
        self._outbox = {}
        return inboxes, count, nbytes


@dataclass
class CellWorker:
    """
    State held by one BS.

    ``slice`` has the same layout as :meth:`BeamformerState.cell_slice`;
    ``lam``/``psi`` are the cell's multipliers.
    """

    cell: int
    slice: dict
    lam: List[float]
    psi: float = 0.0
    local: Optional[LocalState] = None
    inbox: list = field(default_factory=list)
    pool_size: int = 1
    flags: List[str] = field(default_factory=list)
    bisections: list = field(default_factory=list)


def _map(pool, fn, items):
    items = list(items)
    if pool is None or len(items) < 2:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def _refresh(worker, channels, noise, weights, num_cells, round_index):
    view = assemble_view(worker.cell, worker.slice, worker.inbox, num_cells, round_index)
    return local_from_context(prepare_state(view, channels, noise, weights), worker.cell, round_index)


def _in_cell_refresh(worker, channels, noise, weights, num_cells, round_index):
    """Replace the in-cell locals; out-of-cell terms stay frozen."""
    new = _refresh(worker, channels, noise, weights, num_cells, round_index)
    old = worker.local
    new.l_out_ul = old.l_out_ul
    new.l_out_dl = old.l_out_dl
    return new


def solve_dl_layers(worker, cfg, channels, noise, weights, num_cells, pool=None, round_index=0):
    """
    DL layers of one cell on its frozen local variables.

    Bottom: unit-column digital beamformers by GDE at the previous
    multiplier, one task per DL user. Middle: in-cell refresh followed by
    the analog beamformer GDE; with the safeguard on, the candidate is
    kept only if re-optimizing the cell's DL block on it (from local
    variables) gives a larger minorized objective, and the digital
    directions are then re-derived on the new analog stage. Top: bisection
    of the common multiplier with the digital directions kept.
    """
    b = worker.cell
    D = len(worker.slice["V"])
    if D == 0:
        return worker
    loc = worker.local
    W = worker.slice["W"]
    wts = weights.dl[b]
    gs = [loc.l_in_dl[j] + loc.l_out_dl[j] for j in range(D)]

    def bottom(j):
        return _fixed_dl_directions(W, [loc.sigma1_dl[j]], [gs[j]], worker.psi, cfg.dl_streams)[0]

    worker.slice["V"] = _map(pool, bottom, range(D))

    loc = _in_cell_refresh(worker, channels, noise, weights, num_cells, round_index)
    worker.local = loc
    s1s = loc.sigma1_dl
    gs = [loc.l_in_dl[j] + loc.l_out_dl[j] for j in range(D)]
    if not cfg.fully_digital:
        eye = np.eye(W.shape[0])
        s2s = [g + worker.psi * eye for g in gs]
        Wn, flags = update_analog_beamformer(W, s1s, s2s, worker.slice["V"], worker.slice["pd"],
                                             wts, cfg.pencil_cap)
        worker.flags.extend(flags)
        if cfg.analog_safeguard and not analog_candidate_accepted(W, Wn, s1s, gs, wts, cfg)[0]:
            worker.flags.append("analog_tx_rejected")
            Wn = W
        if Wn is not W:
            # the bottom-layer directions live in the RF space of the old W
            W = Wn
            worker.slice["V"] = _map(pool, lambda j: _fixed_dl_directions(
                W, [s1s[j]], [gs[j]], worker.psi, cfg.dl_streams)[0], range(D))
        worker.slice["W"] = W

    res = solve_dl_powers(W, s1s, gs, wts, cfg, directions=[v.copy() for v in worker.slice["V"]])
    worker.bisections.append(res._replace(payload=None))
    Vs, Ps = res.payload
    worker.slice["V"] = [v.copy() for v in Vs]
    worker.slice["pd"] = [np.asarray(p, dtype=float) for p in Ps]
    worker.psi = res.mu
    return worker


def solve_ul_layers(worker, cfg, channels, noise, weights, num_cells, pool=None, round_index=0):
    """
    UL layers of one cell on its frozen local variables.

    Bottom: digital beamformers by GDE at the previous multipliers. Middle:
    per-user power allocation and multiplier bisection. Top: the analog
    combiner from the antenna-level UL covariances rebuilt with the new UL
    variables. All per-user tasks are independent.
    """
    b = worker.cell
    K = len(worker.slice["U"])
    if K == 0:
        return worker
    loc = worker.local
    d = cfg.ul_streams

    def bottom(k):
        lam = worker.lam[k] if worker.lam[k] > 0 else 1e-12
        return gde(loc.sigma1_ul[k], loc.z2_ul(k, lam), d).vectors

    dirs = _map(pool, bottom, range(K))

    def middle(k):
        g = loc.l_in_ul[k] + loc.l_out_ul[k]
        evaluate, mu_max = ul_evaluator(loc.sigma1_ul[k], g, weights.ul[b][k], d, dirs[k])
        return bisect_multiplier(cfg.ul_power, evaluate, mu_max)

    results = _map(pool, middle, range(K))
    for k, res in enumerate(results):
        u, p = res.payload
        worker.slice["U"][k] = u.copy()
        worker.slice["pu"][k] = np.asarray(p, dtype=float)
        worker.lam[k] = res.mu
        worker.bisections.append(res._replace(payload=None))

    if not cfg.fully_digital and cfg.update_combiner:
        view = assemble_view(b, worker.slice, worker.inbox, num_cells, round_index)
        cov = covariance_bundle(*tx_covariances(view), view.F, channels, noise)
        ras = [c[2] for c in cov.ul[b]]
        rbs = [c[3] for c in cov.ul[b]]
        F_old = worker.slice["F"]
        F, flags = update_analog_combiner(ras, rbs, weights.ul[b], cfg.rx_rf, F_old)
        worker.flags.extend(flags)
        if cfg.analog_safeguard and not (combiner_objective(F, ras, rbs, weights.ul[b])
                                         > combiner_objective(F_old, ras, rbs, weights.ul[b])):
            worker.flags.append("combiner_rejected")
            F = F_old
        worker.slice["F"] = F
    return worker


def pd_flops(cfg, workers):
    """
    Worst-case per-processor operation count of one round (DL plus UL),
    with ``workers`` processors per direction and BS.
    """
    B, U, D = cfg.num_cells, cfg.ul_users, cfg.dl_users
    nrf, mrf = cfg.rx_rf, cfg.tx_rf
    nj, nk = cfg.dl_user_antennas, cfg.ul_user_antennas
    M, N = cfg.bs_tx_antennas, cfg.bs_rx_antennas
    kd = math.ceil(D / workers) if D else 0
    ku = math.ceil(U / workers) if U else 0
    dl = kd * (B * D * nj ** 3 + B * U * nrf ** 3 + cfg.dl_streams * mrf ** 2) + mrf ** 2 * M ** 2
    ul = ku * (B * U * nrf ** 3 + B * D * nj ** 3 + cfg.ul_streams * nk ** 2) + nrf * N ** 2
    return float(dl + ul)


def _global_state(workers):
    st = BeamformerState(U=[w.slice["U"] for w in workers], pu=[w.slice["pu"] for w in workers],
                         V=[w.slice["V"] for w in workers], pd=[w.slice["pd"] for w in workers],
                         W=[w.slice["W"] for w in workers], F=[w.slice["F"] for w in workers],
                         lam=[list(w.lam) for w in workers], psi=[w.psi for w in workers])
    return st.copy()


def run_pd_hybf(cfg, channels, workers=1, state=None, bus=None, solver_name="pd_hybf"):
    """
    Distributed alternating optimization.

    Parameters
    ----------
    cfg : NetworkConfig
    channels : ChannelSet
        Each cell reads only the channels its own gradients involve.
    workers : int
        Size of the per-link thread pool.
    state : BeamformerState, optional
        Starting point; defaults to :func:`fdhybf.chybf.init_state`.
    bus : InProcessBus, optional

    Returns
    -------
    (BeamformerState, SolverTrace)
        ``trace.messages`` and ``trace.payload_bytes`` hold the per-round
        communication volume.

    Raises
    ------
    MissingFeedback
        If a neighbor's message did not arrive in some round.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    noise = NoiseProfile.from_config(cfg)
    weights = Weights.uniform(cfg)
    B = cfg.num_cells
    state = init_state(cfg, channels) if state is None else state.copy()
    bus = InProcessBus(B) if bus is None else bus
    cells = [CellWorker(b, state.cell_slice(b), list(state.lam[b]), float(state.psi[b]),
                        pool_size=workers) for b in range(B)]
    trace = SolverTrace(solver=solver_name)
    trace.initial_wsr = _wsr(state, channels, noise, weights)
    prev = trace.initial_wsr
    link_pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    cell_pool = ThreadPoolExecutor(max_workers=min(workers, B)) if workers > 1 else None
    try:
        for rnd in range(cfg.max_iters):
            times = {}
            t0 = time.perf_counter()
            for w in cells:
                bus.post(FeedbackMessage.from_slice(w.cell, rnd, w.slice))
            inboxes, count, nbytes = bus.barrier()
            for w in cells:
                w.inbox = inboxes[w.cell]
                for m in w.inbox:
                    m.check_shapes(cfg)
            times["exchange"] = time.perf_counter() - t0

            t0 = time.perf_counter()

            def refresh(w):
                new = _refresh(w, channels, noise, weights, B, rnd)
                if cfg.stale_feedback and w.local is not None:
                    new.l_out_ul = w.local.l_out_ul
                    new.l_out_dl = w.local.l_out_dl
                return new

            try:
                locs = _map(cell_pool, refresh, cells)
            except MissingFeedback as exc:
                raise MissingFeedback(f"round {rnd} failed: {exc}") from exc
            for w, loc in zip(cells, locs):
                w.local = loc
            times["refresh"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            _map(cell_pool, lambda w: solve_dl_layers(w, cfg, channels, noise, weights, B,
                                                      link_pool, rnd), cells)
            times["dl_layers"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            _map(cell_pool, lambda w: solve_ul_layers(w, cfg, channels, noise, weights, B,
                                                      link_pool, rnd), cells)
            times["ul_layers"] = time.perf_counter() - t0

            glob = _global_state(cells)
            value = _wsr(glob, channels, noise, weights)
            rep = check_constraints(glob, cfg)
            trace.wsr.append(value)
            trace.phase_times.append(times)
            trace.residual_power.append(rep.max_power_residual(cfg))
            trace.residual_phase.append(rep.grid)
            trace.multipliers.append(_multipliers(glob))
            trace.messages.append(count)
            trace.payload_bytes.append(nbytes)
            trace.flops.append(pd_flops(cfg, workers))
            for w in cells:
                trace.flags.extend(w.flags)
                trace.bisections.extend(w.bisections)
                w.flags, w.bisections = [], []
            if value < prev - 1e-6 * abs(prev):
                trace.monotonic_violations += 1
            if abs(value - prev) <= cfg.tol * max(abs(prev), 1e-300):
                trace.converged = True
                break
            prev = value
    finally:
        for p in (link_pool, cell_pool):
            if p is not None:
                p.shutdown()
    final = _global_state(cells)
    if not cfg.fully_digital:
        trace.unquantized_wsr = trace.wsr[-1] if trace.wsr else trace.initial_wsr
        quantize_and_restore(final, cfg, channels, noise, weights, trace)
        rep = check_constraints(final, cfg)
        if trace.wsr:
            trace.wsr[-1] = _wsr(final, channels, noise, weights)
            trace.residual_power[-1] = rep.max_power_residual(cfg)
            trace.residual_phase[-1] = rep.grid
            trace.multipliers[-1] = _multipliers(final)
    return final, trace

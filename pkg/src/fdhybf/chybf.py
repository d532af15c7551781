"""
Centralized hybrid beamforming by minorization-maximization.

Per outer iteration and per BS the solver updates, in order: the analog
beamformer W, the DL block (all digital beamformers and powers of the
cell under one common multiplier), every UL user of the cell one at a
time, and finally the analog combiner F. Each digital block maximizes the
minorized Lagrangian with the interference gradients frozen at the state
where the block starts.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import scipy.linalg

from .errors import BracketFailure, PencilTooLarge, SingularProjection
from .gradients import (gradients_dl_user, gradients_ul_user, prepare, sigma1_dl,
                        sigma1_ul)
from .model import (BeamformerState, NoiseProfile, Weights, check_constraints,
                    covariance_bundle, project_unit_modulus, quantize_phases,
                    tx_covariances, weighted_sum)
from .numerics import gde, hermitize, lndet_hpd, unvec

__all__ = [
    "SolverTrace", "UpdateEvent", "BisectionResult", "init_state", "update_digital_ul",
    "update_digital_dl", "allocate_power", "allocate_fixed", "allocate_projected",
    "water_fill_gde", "bisect_multiplier",
    "kron_pencil", "analog_direction", "update_analog_beamformer", "combiner_direction",
    "update_analog_combiner",
    "run_c_hybf", "quantize_and_restore", "restore_dl_power", "dl_evaluator", "ul_evaluator",
    "solve_dl_powers", "surrogate_dl", "surrogate_ul", "combiner_objective",
    "analog_candidate_accepted", "centralized_flops",
]

BISECT_RTOL = 1e-12
BISECT_MAX_ITERS = 200
MAX_DOUBLINGS = 40
PD_FLOOR = 1e-12
RANK_RTOL = 1e-10


@dataclass
class SolverTrace:
    """
    Per-iteration record of a solver run.

    ``wsr[i]`` is the WSR after iteration i + 1; when the run ends, the
    last entry is replaced by the WSR after phase quantization (the value
    before quantization is kept in ``unquantized_wsr``).
    """

    solver: str
    initial_wsr: float = 0.0
    wsr: List[float] = field(default_factory=list)
    phase_times: List[dict] = field(default_factory=list)
    residual_power: List[float] = field(default_factory=list)
    residual_phase: List[float] = field(default_factory=list)
    multipliers: List[dict] = field(default_factory=list)
    messages: List[int] = field(default_factory=list)
    payload_bytes: List[int] = field(default_factory=list)
    flops: List[float] = field(default_factory=list)
    bisections: List["BisectionResult"] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    monotonic_violations: int = 0
    unquantized_wsr: Optional[float] = None
    converged: bool = False

    @property
    def iterations(self):
        return len(self.wsr)

    @property
    def final_wsr(self):
        return self.wsr[-1] if self.wsr else self.initial_wsr

    def wall_per_iteration(self):
        """Mean wall time (s) of one iteration, summed over phases."""
        if not self.phase_times:
            return 0.0
        return float(np.mean([sum(p.values()) for p in self.phase_times]))


class UpdateEvent(NamedTuple):
    """Minorized objective just before and just after one block update."""

    kind: str
    cell: int
    link: Optional[int]
    before: float
    after: float


class BisectionResult(NamedTuple):
    mu: float
    allocated: float
    budget: float
    iterations: int
    payload: object

    @property
    def slackness(self):
        return abs(self.mu * (self.budget - self.allocated))


class _Timer:
    def __init__(self):
        self.times = {}

    def add(self, label, start):
        self.times[label] = self.times.get(label, 0.0) + (time.perf_counter() - start)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def update_digital_ul(pencil, d):
    """Top-d GDE columns of ``(Sigma1, Sigma2)``, unit-norm (GDEResult)."""
    return gde(pencil.a, pencil.b, d)


def update_digital_dl(pencil_rf, d):
    """As :func:`update_digital_ul`, on the RF-domain pencil."""
    return gde(pencil_rf.a, pencil_rf.b, d)


def _checked_inverse(m, what):
    # inverse via Cholesky; SingularProjection when numerically singular
    try:
        L = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise SingularProjection(f"{what} projection is singular") from None
    dg = np.real(np.diag(L))
    if dg.min() <= 0 or dg.min() ** 2 <= PD_FLOOR * dg.max() ** 2:
        raise SingularProjection(f"{what} projection is singular")
    linv = scipy.linalg.solve_triangular(L, np.eye(L.shape[0], dtype=complex), lower=True,
                                         check_finite=False)
    return hermitize(linv.conj().T @ linv)


def allocate_power(w, s1, s2, rank_by=None):
    """
    Stream powers ``(w s2^-1 - s1^-1)^+``, re-diagonalized.

    ``s1`` and ``s2`` are the signal and interference matrices projected on
    unit-norm beamformer columns. Streams with (numerically) no signal get
    zero power. The eigenvalues of the positive part are handed to the
    streams in the rank order of its diagonal, or of ``rank_by`` when
    given. A ranking that does not depend on a multiplier loading ``s2``
    keeps the total power continuous in that multiplier; the diagonal
    ranking can swap two streams of unequal gain at a crossing.

    Returns
    -------
    ndarray
        Diagonal of the power matrix.

    Raises
    ------
    SingularProjection
        If ``s2`` or the active block of ``s1`` cannot be inverted.
    """
    s1 = hermitize(np.atleast_2d(np.asarray(s1, dtype=complex)))
    s2 = hermitize(np.atleast_2d(np.asarray(s2, dtype=complex)))
    d = s1.shape[0]
    sdiag = np.real(np.diag(s1))
    out = np.zeros(d)
    if not sdiag.max() > 0:
        return out
    active = np.flatnonzero(sdiag > PD_FLOOR * sdiag.max())
    s2inv = _checked_inverse(s2, "interference")
    ix = np.ix_(active, active)
    x = hermitize(w * s2inv[ix] - _checked_inverse(s1[ix], "signal"))
    vals, vecs = np.linalg.eigh(x)
    vals = np.maximum(vals, 0.0)
    key = (np.abs(vecs) ** 2) @ vals if rank_by is None else np.asarray(rank_by)[active]
    order = np.argsort(-key, kind="stable")
    p = np.empty_like(vals)
    p[order] = np.sort(vals)[::-1]
    out[active] = p
    return out


def allocate_fixed(w, a, s1, s2):
    """
    :func:`allocate_power` for the antenna-level streams ``a`` (columns).

    Streams without gain are inactive. While the projections of the active
    streams are singular (dependent columns, or no signal along some
    combination), the active stream with the least signal is switched
    off. Which streams go, and which power eigenvalue each stream gets
    (ranked by signal per unit power), do not depend on a positive
    multiplier loading ``s2``, so allocations stay continuous and monotone
    in it.
    """
    ah = a.conj().T
    return allocate_projected(w, np.real(np.diag(ah @ a)), ah @ s1 @ a, ah @ s2 @ a)


def allocate_projected(w, gain, ps1, ps2):
    """
    :func:`allocate_fixed` on projections computed once.

    ``gain`` holds the column norms squared of the streams, ``ps1`` and
    ``ps2`` the signal and interference matrices projected on them. A
    multiplier search over ``ps2 = a^H g a + mu a^H a`` then never touches
    antenna-level matrices.
    """
    gain = np.asarray(gain, dtype=float)
    act = list(np.flatnonzero(gain > RANK_RTOL * max(gain.max(), 1e-300)))
    p = np.zeros(gain.size)
    while act:
        ix = np.ix_(act, act)
        rank = np.real(np.diag(ps1[ix])) / gain[act]
        try:
            p[act] = allocate_power(w, ps1[ix], ps2[ix], rank_by=rank)
            return p
        except SingularProjection:
            act.pop(int(np.argmin(rank)))
    return p


def water_fill_gde(w, gres, s1, s2):
    """Closed-form powers for GDE directions (projections are diagonal)."""
    v = gres.vectors
    a = np.real(np.einsum("ij,ik,kj->j", v.conj(), s1, v))
    b = np.real(np.einsum("ij,ik,kj->j", v.conj(), s2, v))
    p = np.zeros(v.shape[1])
    ok = (a > PD_FLOOR * max(a.max(), 1e-300)) & (b > 0)
    p[ok] = np.maximum(w / b[ok] - 1.0 / a[ok], 0.0)
    return p


def bisect_multiplier(budget, evaluator, mu_max, rtol=BISECT_RTOL,
                      max_iters=BISECT_MAX_ITERS, max_doublings=MAX_DOUBLINGS,
                      method="illinois"):
    """
    Smallest multiplier whose allocation fits the budget.

    A bracket ``[lo, hi]`` with ``allocated(lo) > budget >= allocated(hi)``
    is shrunk until the allocation at ``hi`` is within ``rtol`` of the
    budget or the bracket collapses. With ``method="bisection"`` every step
    halves the bracket. The default ``"illinois"`` step interpolates
    linearly in ``1/mu`` (where water-filling allocations are piecewise
    linear) and falls back to halving whenever that fails to shrink the
    bracket by half.

    Parameters
    ----------
    budget : float
    evaluator : callable
        ``evaluator(mu) -> (allocated_power, payload)``, non-increasing in mu.
    mu_max : float
        Initial upper end of the search interval, doubled on failure.

    Returns
    -------
    BisectionResult
        Always from the feasible side of the bracket.

    Raises
    ------
    BracketFailure
        If the allocation still exceeds the budget after ``max_doublings``.
    """
    alloc0, pay0 = evaluator(0.0)
    if alloc0 <= budget:
        return BisectionResult(0.0, alloc0, budget, 0, pay0)
    hi = max(float(mu_max), 1e-300)
    alloc_hi, pay_hi = evaluator(hi)
    doublings = 0
    while alloc_hi > budget:
        if doublings >= max_doublings:
            raise BracketFailure(f"allocation {alloc_hi} still above budget {budget} at mu={hi}")
        hi *= 2.0
        doublings += 1
        alloc_hi, pay_hi = evaluator(hi)
    lo, alloc_lo = (0.0, alloc0) if doublings == 0 else (hi / 2.0, None)
    if alloc_lo is None:
        alloc_lo = evaluator(lo)[0]
    f_lo, f_hi = alloc_lo - budget, alloc_hi - budget
    side = 0
    it = 0
    while it < max_iters:
        if budget - alloc_hi <= rtol * budget or hi - lo <= 1e-15 * hi:
            break
        width = hi - lo
        mid = 0.5 * (lo + hi)
        if method == "illinois" and lo > 0 and np.isfinite(f_lo) and f_lo > f_hi:
            t_lo, t_hi = 1.0 / lo, 1.0 / hi
            t = t_hi + (t_lo - t_hi) * (-f_hi) / (f_lo - f_hi)
            cand = 1.0 / t if t > 0 else mid
            if lo < cand < hi:
                mid = cand
        alloc, pay = evaluator(mid)
        if alloc > budget:
            lo, f_lo = mid, alloc - budget
            if side == -1:
                f_hi *= 0.5
            side = -1
        else:
            hi, alloc_hi, pay_hi, f_hi = mid, alloc, pay, alloc - budget
            if side == 1:
                f_lo *= 0.5
            side = 1
        if hi - lo > 0.5 * width and method == "illinois":
            # interpolation stalled; take one halving step
            mid = 0.5 * (lo + hi)
            alloc, pay = evaluator(mid)
            if alloc > budget:
                lo, f_lo = mid, alloc - budget
            else:
                hi, alloc_hi, pay_hi, f_hi = mid, alloc, pay, alloc - budget
            side = 0
            it += 1
        it += 1
    return BisectionResult(hi, alloc_hi, budget, it, pay_hi)


def kron_pencil(W, sigma1s, sigma2s, Vs, Ps, weights):
    """
    Vectorized analog-beamformer pencil.

    ``A = sum_j K_j^T kron (w_j Sigma1_j)``, ``B = sum_j X_j^T kron Sigma2_j``
    with ``X_j = V P V^H`` and ``K_j = Ve (I + Ve^H S_j Ve)^-1 Ve^H``,
    ``Ve = V P^1/2``, ``S_j = W^H Sigma1_j W``. Column-major vec is used, so
    ``A vec(W) = vec(sum_j w_j Sigma1_j W K_j)``.
    """
    m, r = W.shape
    A = np.zeros((m * r, m * r), dtype=complex)
    B = np.zeros((m * r, m * r), dtype=complex)
    for s1, s2, v, p, w in zip(sigma1s, sigma2s, Vs, Ps, weights):
        ve = v * np.sqrt(np.asarray(p))
        x = ve @ ve.conj().T
        s = W.conj().T @ s1 @ W
        kmat = ve @ np.linalg.solve(np.eye(ve.shape[1]) + ve.conj().T @ s @ ve, ve.conj().T)
        A += np.kron(hermitize(kmat).T, w * s1)
        B += np.kron(hermitize(x).T, s2)
    return hermitize(A), hermitize(B)


def _column_range(Xs):
    """Orthonormal basis of the joint column span of the matrices ``Xs``."""
    s = hermitize(sum(x @ x.conj().T for x in Xs))
    ev, E = np.linalg.eigh(s)
    keep = ev > RANK_RTOL * max(ev.max(), 1e-300)
    return E[:, keep][:, ::-1]


def analog_direction(W, sigma1s, sigma2s, Vs, Ps, weights, cap=8192):
    """
    Dominant GDE of the vectorized analog pencil, before projection.

    Both pencil matrices vanish on ``vec(W)`` whose rows are orthogonal to
    the span of the stream covariances; the eigenproblem is solved on the
    complementary subspace, where the right-hand matrix is definite.

    Returns
    -------
    (ndarray or None, float, list of str)
        The (M, M^RF) matrix (None when every stream has zero power), its
        generalized eigenvalue and flags.
    """
    m, r = W.shape
    if m * r > cap:
        raise PencilTooLarge(f"analog pencil of size {m * r} exceeds the cap {cap}")
    xs = [v * np.sqrt(np.asarray(p)) for v, p in zip(Vs, Ps)]
    if not any(np.any(x) for x in xs):
        return None, 0.0, ["analog_tx_degenerate"]
    A, B = kron_pencil(W, sigma1s, sigma2s, Vs, Ps, weights)
    E = _column_range([x.conj() for x in xs])
    T = None
    if E.shape[1] < r:
        # vec(A X B) = (B^T kron A) vec(X): restrict to vec(Y E^T)
        T = np.kron(E, np.eye(m))
        A = hermitize(T.conj().T @ A @ T)
        B = hermitize(T.conj().T @ B @ T)
    res = gde(A, B, 1)
    flags = ["analog_tx_regularized"] if res.regularized else []
    vecw = res.vectors[:, 0] if T is None else T @ res.vectors[:, 0]
    return unvec(vecw, m, r), float(res.values[0]), flags


def update_analog_beamformer(W, sigma1s, sigma2s, Vs, Ps, weights, cap=8192):
    """
    :func:`analog_direction` projected to unit modulus. Returns
    ``(W_new, flags)``; W is returned unchanged (and flagged) when the
    pencil is degenerate.
    """
    raw, _, flags = analog_direction(W, sigma1s, sigma2s, Vs, Ps, weights, cap)
    if raw is None:
        return W.copy(), flags
    Wn, zero = project_unit_modulus(raw, return_flag=True)
    if zero:
        flags.append("analog_tx_zero_entry")
    return Wn, flags


def combiner_direction(ras, ra_bars, weights, nrf):
    """``nrf`` dominant GDEs of ``(sum w R^a, sum w Rbar^a)`` (GDEResult)."""
    a = sum(w * ra for w, ra in zip(weights, ras))
    b = sum(w * rb for w, rb in zip(weights, ra_bars))
    return gde(a, b, nrf)


def update_analog_combiner(ras, ra_bars, weights, nrf, F_prev=None):
    """
    :func:`combiner_direction` projected to unit modulus. Returns
    ``(F, flags)``; F has shape (N, nrf). With all weights zero the
    previous combiner is kept and flagged.
    """
    if not sum(weights) > 0:
        return (F_prev.copy() if F_prev is not None else None), ["combiner_degenerate"]
    res = combiner_direction(ras, ra_bars, weights, nrf)
    flags = ["combiner_degenerate"] if res.degenerate else []
    F, zero = project_unit_modulus(res.vectors, return_flag=True)
    if zero:
        flags.append("combiner_zero_entry")
    return F, flags


def combiner_objective(F, ras, ra_bars, weights):
    """Weighted log-det ratio of the RF-chain covariances, without receive LDR."""
    Fh = F.conj().T
    return sum(w * (lndet_hpd(Fh @ ra @ F) - lndet_hpd(Fh @ rb @ F))
               for w, ra, rb in zip(weights, ras, ra_bars))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------
def _top_eigvecs(g, d):
    vals, vecs = np.linalg.eigh(hermitize(g))
    vecs = vecs[:, ::-1][:, :d]
    idx = np.argmax(np.abs(vecs), axis=0)
    piv = vecs[idx, np.arange(d)]
    return vecs * (np.conj(piv) / np.abs(piv))


def init_state(cfg, channels):
    """
    Initial point: dominant-eigenvector digital and analog beamformers and
    uniform stream powers meeting every budget with equality.
    """
    B = cfg.num_cells
    M, N, mrf, nrf = cfg.bs_tx_antennas, cfg.bs_rx_antennas, cfg.tx_rf, cfg.rx_rf
    U, pu, V, pdl, W, F = [], [], [], [], [], []
    for b in range(B):
        Ub = []
        for k in range(cfg.ul_users):
            H = channels.h_ul(b, k)
            Ub.append(_top_eigvecs(H.conj().T @ H, cfg.ul_streams))
        U.append(Ub)
        pu.append([np.full(cfg.ul_streams, cfg.ul_power / cfg.ul_streams) for _ in Ub])
        if cfg.fully_digital:
            Wb = np.eye(M, dtype=complex)
            Fb = np.eye(N, dtype=complex)
        else:
            if cfg.dl_users:
                g = sum(channels.h_dl(b, j).conj().T @ channels.h_dl(b, j) for j in range(cfg.dl_users))
            else:
                g = np.eye(M)
            Wb = project_unit_modulus(_top_eigvecs(g, mrf))
            if cfg.ul_users:
                g = sum(channels.h_ul(b, k) @ channels.h_ul(b, k).conj().T for k in range(cfg.ul_users))
            else:
                g = np.eye(N)
            Fb = project_unit_modulus(_top_eigvecs(g, nrf))
        W.append(Wb)
        F.append(Fb)
        Vb = []
        for j in range(cfg.dl_users):
            Hw = channels.h_dl(b, j) @ Wb
            Vb.append(_top_eigvecs(Hw.conj().T @ Hw, cfg.dl_streams))
        V.append(Vb)
        gain = sum(float(np.sum(np.abs(Wb @ v) ** 2)) for v in Vb)
        pdl.append([np.full(cfg.dl_streams, cfg.bs_power / gain) for _ in Vb])
    return BeamformerState(U=U, pu=pu, V=V, pd=pdl, W=W, F=F)


# ---------------------------------------------------------------------------
# block solvers shared with the distributed scheme
# ---------------------------------------------------------------------------
def _is_pd(m):
    ev = np.linalg.eigvalsh(hermitize(m))
    return ev.min() > PD_FLOOR * max(abs(ev.max()), 1e-300)


def _stream_gain(W, v):
    return np.sum(np.abs(W @ v) ** 2, axis=0)


def _rf_basis(W):
    """
    Orthonormal basis of the RF directions W does not annihilate, plus its
    complement; ``None`` bases when W has full column rank.
    """
    ev, E = np.linalg.eigh(hermitize(W.conj().T @ W))
    keep = ev > RANK_RTOL * ev.max()
    if keep.all():
        return None, None
    return E[:, keep][:, ::-1], E[:, ~keep]


def dl_evaluator(W, s1s, gs, weights, d, directions=None):
    """
    Evaluator of the DL allocation at multiplier psi.

    ``s1s``/``gs`` are antenna-level signal matrices and gradient sums of
    the DL users of one cell. Without ``directions`` the digital
    beamformers are recomputed by GDE at every psi; otherwise they are
    kept and only the powers change. When W is rank deficient the digital
    beamformers are confined to the RF directions W does not annihilate;
    surplus streams get orthonormal null directions with zero power.
    """
    basis, null = _rf_basis(W)
    We = W if basis is None else W @ basis
    Wh = We.conj().T
    wm = hermitize(Wh @ We)
    s1r = [hermitize(Wh @ s1 @ We) for s1 in s1s]
    gr = [hermitize(Wh @ g @ We) for g in gs]
    d_eff = min(d, We.shape[1])

    def lift(v):
        if basis is None:
            return v
        v = basis @ v
        if v.shape[1] < d:
            v = np.concatenate([v, null[:, : d - v.shape[1]]], axis=1)
        return v

    fixed = []
    for j, v in enumerate(directions or []):
        a = W @ v
        ah = a.conj().T
        paa = ah @ a
        fixed.append((np.real(np.diag(paa)), ah @ s1s[j] @ a, ah @ gs[j] @ a, paa))

    def evaluate(psi):
        Vs, Ps, total = [], [], 0.0
        for j, (s1, g, w) in enumerate(zip(s1r, gr, weights)):
            if directions is None:
                s2 = g + psi * wm
                if not _is_pd(s2):
                    return np.inf, None
                res = gde(s1, s2, d_eff)
                p = np.zeros(d)
                p[:d_eff] = water_fill_gde(w, res, s1, s2)
                v = lift(res.vectors)
                gain = _stream_gain(W, v)
            else:
                v = directions[j]
                if psi <= 0 and not _is_pd(gs[j]):
                    return np.inf, None
                gain, ps1, pg, paa = fixed[j]
                p = allocate_projected(w, gain, ps1, pg + psi * paa)
            Vs.append(v)
            Ps.append(p)
            total += float(np.sum(p * gain))
        return total, (Vs, Ps)

    mu_max = max([w * _max_geig(s1, wm) for s1, w in zip(s1r, weights)] + [1e-12])
    return evaluate, mu_max


def ul_evaluator(s1, g, w, d, direction=None):
    """Evaluator of one UL user's allocation at multiplier lam."""
    eye = np.eye(s1.shape[0])

    def evaluate(lam):
        s2 = g + lam * eye
        if direction is None:
            if not _is_pd(s2):
                return np.inf, None
            res = gde(s1, s2, d)
            v = res.vectors
            p = water_fill_gde(w, res, s1, s2)
        else:
            v = direction
            try:
                ps1 = v.conj().T @ s1 @ v
                p = allocate_power(w, ps1, v.conj().T @ s2 @ v,
                                   rank_by=np.real(np.diag(ps1)) / np.sum(np.abs(v) ** 2, axis=0))
            except SingularProjection:
                return np.inf, None
        return float(np.sum(p * np.sum(np.abs(v) ** 2, axis=0))), (v, p)

    mu_max = max(w * float(np.linalg.eigvalsh(s1).max()), 1e-12)
    return evaluate, mu_max


def _max_geig(a, b):
    # any value works as a starting bracket; doubling covers the rest
    try:
        return float(scipy.linalg.eigh(a, b, eigvals_only=True)[-1])
    except (np.linalg.LinAlgError, ValueError):
        return float(np.linalg.eigvalsh(a).max())


def surrogate_dl(W, s1s, gs, weights, Vs, Ps, psi, budget):
    """Minorized DL Lagrangian of one cell at frozen gradients."""
    total = psi * budget
    for s1, g, w, v, p in zip(s1s, gs, weights, Vs, Ps):
        wv = W @ v
        q = (wv * p) @ wv.conj().T
        n = q.shape[0]
        total += w * lndet_hpd(np.eye(v.shape[1]) + _sqrt_sandwich(s1, wv, p)) \
            - float(np.real(np.trace((g + psi * np.eye(n)) @ q)))
    return total


def surrogate_ul(s1, g, w, u, p, lam, budget):
    """Minorized Lagrangian of one UL user at frozen gradients."""
    t = (u * p) @ u.conj().T
    n = t.shape[0]
    return lam * budget + w * lndet_hpd(np.eye(u.shape[1]) + _sqrt_sandwich(s1, u, p)) \
        - float(np.real(np.trace((g + lam * np.eye(n)) @ t)))


def _sqrt_sandwich(s1, a, p):
    # (A P^1/2)^H S (A P^1/2): lndet(I + S A P A^H) in the small dimension
    ae = a * np.sqrt(np.asarray(p))
    return hermitize(ae.conj().T @ s1 @ ae)


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------
def _context(state, channels, noise, weights):
    T, Q = tx_covariances(state)
    return prepare(T, Q, state.F, channels, noise, weights)


def _dl_inputs(ctx, b, D):
    s1s = [sigma1_dl(ctx, b, j) for j in range(D)]
    gs = [gradients_dl_user(ctx, b, j).total() for j in range(D)]
    return s1s, gs


def solve_dl_powers(W, s1s, gs, weights, cfg, directions=None):
    """Bisection over the BS multiplier; returns the BisectionResult."""
    evaluate, mu_max = dl_evaluator(W, s1s, gs, weights, cfg.dl_streams, directions)
    return bisect_multiplier(cfg.bs_power, evaluate, mu_max)


def _dl_block(state, b, cfg, channels, noise, weights, recompute, timer, trace, observer):
    """DL digital beamformers and powers of cell b at frozen gradients."""
    if not state.V[b]:
        return
    t0 = time.perf_counter()
    ctx = _context(state, channels, noise, weights)
    s1s, gs = _dl_inputs(ctx, b, len(state.V[b]))
    wts = weights.dl[b]
    timer.add("digital_dl", t0)
    W = state.W[b]
    t0 = time.perf_counter()
    directions = None
    if not recompute:
        directions = _fixed_dl_directions(W, s1s, gs, state.psi[b], cfg.dl_streams)
    res = solve_dl_powers(W, s1s, gs, wts, cfg, directions)
    timer.add("bisection_dl", t0)
    trace.bisections.append(res._replace(payload=None))
    Vs, Ps = res.payload
    if observer is not None:
        before = surrogate_dl(W, s1s, gs, wts, state.V[b], state.pd[b], res.mu, cfg.bs_power)
        after = surrogate_dl(W, s1s, gs, wts, Vs, Ps, res.mu, cfg.bs_power)
        observer(UpdateEvent("dl_block", b, None, before, after))
    state.V[b] = [v.copy() for v in Vs]
    state.pd[b] = [np.asarray(p, dtype=float) for p in Ps]
    state.psi[b] = res.mu


def _fixed_dl_directions(W, s1s, gs, psi, d):
    """GDE directions at the previous multiplier (rank-aware)."""
    evaluate, _ = dl_evaluator(W, s1s, gs, [1.0] * len(s1s), d)
    _, payload = evaluate(psi)
    if payload is None:
        # singular pencil at the old multiplier: load it slightly
        scale = max(float(np.real(np.trace(s1))) for s1 in s1s)
        _, payload = evaluate(max(psi, 1e-9 * scale))
    return [v.copy() for v in payload[0]]


def _ul_user(state, b, k, cfg, channels, noise, weights, recompute, timer, trace, observer):
    t0 = time.perf_counter()
    ctx = _context(state, channels, noise, weights)
    s1 = sigma1_ul(ctx, b, k)
    g = gradients_ul_user(ctx, b, k).total()
    w = weights.ul[b][k]
    timer.add("digital_ul", t0)
    t0 = time.perf_counter()
    direction = None
    if not recompute:
        lam = state.lam[b][k] if state.lam[b][k] > 0 else 1e-12
        direction = gde(s1, g + lam * np.eye(g.shape[0]), cfg.ul_streams).vectors
    evaluate, mu_max = ul_evaluator(s1, g, w, cfg.ul_streams, direction)
    res = bisect_multiplier(cfg.ul_power, evaluate, mu_max)
    timer.add("bisection_ul", t0)
    trace.bisections.append(res._replace(payload=None))
    u, p = res.payload
    if observer is not None:
        before = surrogate_ul(s1, g, w, state.U[b][k], state.pu[b][k], res.mu, cfg.ul_power)
        after = surrogate_ul(s1, g, w, u, p, res.mu, cfg.ul_power)
        observer(UpdateEvent("ul_user", b, k, before, after))
    state.U[b][k] = u.copy()
    state.pu[b][k] = np.asarray(p, dtype=float)
    state.lam[b][k] = res.mu


def _primal_dl(W, s1s, gs, weights, res):
    Vs, Ps = res.payload
    return surrogate_dl(W, s1s, gs, weights, Vs, Ps, 0.0, 0.0)


def analog_candidate_accepted(W_old, W_new, s1s, gs, weights, cfg):
    """
    Safeguard of the analog beamformer update: the candidate is kept only
    if re-optimizing the digital DL block on it gives a larger minorized
    objective than on the current analog beamformer.
    """
    try:
        old = _primal_dl(W_old, s1s, gs, weights, solve_dl_powers(W_old, s1s, gs, weights, cfg))
        new = _primal_dl(W_new, s1s, gs, weights, solve_dl_powers(W_new, s1s, gs, weights, cfg))
    except BracketFailure:
        return False, None, None
    return bool(new > old), old, new


def _analog_tx(state, b, cfg, channels, noise, weights, timer, trace, observer):
    if not state.V[b]:
        return
    t0 = time.perf_counter()
    ctx = _context(state, channels, noise, weights)
    s1s, gs = _dl_inputs(ctx, b, len(state.V[b]))
    eye = np.eye(cfg.bs_tx_antennas)
    s2s = [g + state.psi[b] * eye for g in gs]
    Wn, flags = update_analog_beamformer(state.W[b], s1s, s2s, state.V[b], state.pd[b],
                                         weights.dl[b], cfg.pencil_cap)
    trace.flags.extend(flags)
    if cfg.analog_safeguard:
        ok, before, after = analog_candidate_accepted(state.W[b], Wn, s1s, gs, weights.dl[b], cfg)
        if not ok:
            trace.flags.append("analog_tx_rejected")
            Wn = state.W[b]
        if observer is not None and before is not None:
            observer(UpdateEvent("analog_tx", b, None, before, max(before, after) if ok else before))
    state.W[b] = Wn
    timer.add("analog_tx", t0)


def _combiner(state, b, cfg, channels, noise, weights, timer, trace, observer):
    if not state.U[b]:
        return
    t0 = time.perf_counter()
    cov = covariance_bundle(*tx_covariances(state), state.F, channels, noise)
    ras = [c[2] for c in cov.ul[b]]
    rbs = [c[3] for c in cov.ul[b]]
    F, flags = update_analog_combiner(ras, rbs, weights.ul[b], cfg.rx_rf, state.F[b])
    trace.flags.extend(flags)
    before = combiner_objective(state.F[b], ras, rbs, weights.ul[b])
    after = combiner_objective(F, ras, rbs, weights.ul[b])
    if cfg.analog_safeguard and not after > before:
        trace.flags.append("combiner_rejected")
        F, after = state.F[b], before
    if observer is not None:
        observer(UpdateEvent("combiner", b, None, before, after))
    state.F[b] = F
    timer.add("combiner", t0)


def restore_dl_power(state, cfg, channels, noise, weights, trace=None):
    """Re-run every DL power bisection with the digital directions kept."""
    ctx = _context(state, channels, noise, weights)
    for b in range(state.num_cells):
        if not state.V[b]:
            continue
        D = len(state.V[b])
        s1s = [sigma1_dl(ctx, b, j) for j in range(D)]
        gs = [gradients_dl_user(ctx, b, j).total() for j in range(D)]
        evaluate, mu_max = dl_evaluator(state.W[b], s1s, gs, weights.dl[b], cfg.dl_streams,
                                        directions=[v.copy() for v in state.V[b]])
        res = bisect_multiplier(cfg.bs_power, evaluate, mu_max)
        if trace is not None:
            trace.bisections.append(res._replace(payload=None))
        state.pd[b] = [np.asarray(p, dtype=float) for p in res.payload[1]]
        state.psi[b] = res.mu


def quantize_and_restore(state, cfg, channels, noise, weights, trace=None):
    """Snap W and F to the phase grid, then restore DL power feasibility."""
    for b in range(state.num_cells):
        state.W[b] = quantize_phases(state.W[b], cfg.phase_bits)
        state.F[b] = quantize_phases(state.F[b], cfg.phase_bits)
    restore_dl_power(state, cfg, channels, noise, weights, trace)


def _wsr(state, channels, noise, weights):
    cov = covariance_bundle(*tx_covariances(state), state.F, channels, noise)
    return weighted_sum(cov, weights)


def _multipliers(state):
    return {"psi": list(map(float, state.psi)), "lam": [list(map(float, l)) for l in state.lam]}


def centralized_flops(cfg):
    """Dominant-term operation count of one centralized iteration."""
    B, U, D = cfg.num_cells, cfg.ul_users, cfg.dl_users
    nrf, mrf = cfg.rx_rf, cfg.tx_rf
    nj, nk = cfg.dl_user_antennas, cfg.ul_user_antennas
    M, N = cfg.bs_tx_antennas, cfg.bs_rx_antennas
    return float(B ** 2 * U ** 2 * nrf ** 3 + B ** 2 * U * D * nj ** 3 + B ** 2 * D ** 2 * nj ** 3
                 + B ** 2 * D * U * nrf ** 3 + B * mrf ** 2 * M ** 2 + B * nrf * N ** 2
                 + B * D * cfg.dl_streams * mrf ** 2 + B * D * cfg.ul_streams * nk ** 2)


def run_c_hybf(cfg, channels, observer: Optional[Callable] = None, state=None,
               solver_name="c_hybf", quantize=True):
    """
    Centralized alternating optimization.

    Parameters
    ----------
    cfg : NetworkConfig
    channels : ChannelSet
    observer : callable, optional
        Receives an :class:`UpdateEvent` after every block update.
    state : BeamformerState, optional
        Starting point; defaults to :func:`init_state`.
    quantize : bool
        Snap the analog stages to the phase grid after convergence. The
        iterations never depend on ``phase_bits``, so an unquantized result
        can be quantized later at any resolution with
        :func:`quantize_and_restore`.

    Returns
    -------
    (BeamformerState, SolverTrace)
    """
    noise = NoiseProfile.from_config(cfg)
    weights = Weights.uniform(cfg)
    state = init_state(cfg, channels) if state is None else state.copy()
    trace = SolverTrace(solver=solver_name)
    trace.initial_wsr = _wsr(state, channels, noise, weights)
    prev = trace.initial_wsr
    analog = not cfg.fully_digital
    for _ in range(cfg.max_iters):
        timer = _Timer()
        for b in range(cfg.num_cells):
            if analog:
                _analog_tx(state, b, cfg, channels, noise, weights, timer, trace, observer)
            _dl_block(state, b, cfg, channels, noise, weights, cfg.recompute_directions,
                      timer, trace, observer)
            for k in range(len(state.U[b])):
                _ul_user(state, b, k, cfg, channels, noise, weights, cfg.recompute_directions,
                         timer, trace, observer)
            if analog and cfg.update_combiner:
                _combiner(state, b, cfg, channels, noise, weights, timer, trace, observer)
        value = _wsr(state, channels, noise, weights)
        rep = check_constraints(state, cfg)
        trace.wsr.append(value)
        trace.phase_times.append(timer.times)
        trace.residual_power.append(rep.max_power_residual(cfg))
        trace.residual_phase.append(rep.grid)
        trace.multipliers.append(_multipliers(state))
        trace.messages.append(0)
        trace.payload_bytes.append(0)
        trace.flops.append(centralized_flops(cfg))
        if abs(value - prev) <= cfg.tol * max(abs(prev), 1e-300):
            trace.converged = True
            break
        prev = value
    if analog and quantize:
        trace.unquantized_wsr = trace.wsr[-1]
        quantize_and_restore(state, cfg, channels, noise, weights, trace)
        rep = check_constraints(state, cfg)
        trace.wsr[-1] = _wsr(state, channels, noise, weights)
        trace.residual_power[-1] = rep.max_power_residual(cfg)
        trace.residual_phase[-1] = rep.grid
        trace.multipliers[-1] = _multipliers(state)
    return state, trace

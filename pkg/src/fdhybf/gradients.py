"""
Interference gradients of the minorized sum rate and the per-link pencils.

For a receiving link with covariances ``(R, Rbar)`` and receive-LDR level
beta, let ``Y = Rbar^-1 - R^-1`` and ``X = Y + beta diag(Y)``. If a
transmit covariance Z reaches that receiver through the effective channel
C (including ``F^H`` on the uplink) and its transmitter adds LDR noise
``k diag(Z)``, then

    -d(rate)/dZ = A + k diag(A),   A = C^H X C.

Each of the eight gradients below is a weighted sum of these terms over
the links named in its docstring.
"""
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np

from .errors import MissingFeedback
from .model import BeamformerState, covariance_bundle, tx_covariances
from .numerics import HermitianPencil, hermitize, inv_hpd

__all__ = [
    "GradientContext", "UlGradients", "DlGradients", "LocalState",
    "prepare", "gradients_ul_user", "gradients_dl_user", "sigma1_ul", "sigma1_dl",
    "sigma_pair_ul", "sigma_pair_dl", "refresh_local_state", "assemble_view",
    "prepare_state", "local_from_context",
]


def _ddiag(x):
    return np.diag(np.diag(x))


class UlGradients(NamedTuple):
    """Gradients for ``T_k`` of a UL user (each M_k x M_k)."""

    in_ul: np.ndarray    # other UL users of the same cell
    in_dl: np.ndarray    # DL users of the same cell
    out_ul: np.ndarray   # UL users of other cells
    out_dl: np.ndarray   # DL users of other cells

    def total(self):
        return self.in_ul + self.in_dl + self.out_ul + self.out_dl


class DlGradients(NamedTuple):
    """Gradients for ``Q_j`` of a DL user (each M_b x M_b)."""

    in_ul: np.ndarray    # UL users of the same cell (through SI)
    in_dl: np.ndarray    # other DL users of the same cell
    out_ul: np.ndarray   # UL users of other cells
    out_dl: np.ndarray   # DL users of other cells

    def total(self):
        return self.in_ul + self.in_dl + self.out_ul + self.out_dl


@dataclass
class GradientContext:
    """
    Cached covariances and per-link ``X`` matrices for one network point.

    ``x_dl[b][j]`` is (N_j, N_j); ``x_ul[b][k]`` is lifted to antenna level,
    ``F X F^H`` (N_b, N_b).
    """

    T: list
    Q: list
    F: list
    channels: object
    noise: object
    weights: object
    cov: object
    rbar_inv_dl: list
    rbar_inv_ul: list
    x_dl: list
    x_ul: list

    @property
    def num_cells(self):
        return len(self.Q)


def _x_matrix(R, Rbar, beta):
    rbi = inv_hpd(Rbar)
    y = rbi - inv_hpd(R)
    return rbi, hermitize(y + beta * _ddiag(y))


def prepare(T, Q, F, channels, noise, weights, cov=None):
    """Build a :class:`GradientContext` from transmit covariances."""
    if cov is None:
        cov = covariance_bundle(T, Q, F, channels, noise)
    B = len(Q)
    rbi_dl, x_dl, rbi_ul, x_ul = [], [], [], []
    for b in range(B):
        r_row, x_row = [], []
        for R, Rbar in cov.dl[b]:
            rbi, x = _x_matrix(R, Rbar, noise.beta_dl)
            r_row.append(rbi)
            x_row.append(x)
        rbi_dl.append(r_row)
        x_dl.append(x_row)
        r_row, x_row = [], []
        for R, Rbar, _, _ in cov.ul[b]:
            rbi, x = _x_matrix(R, Rbar, noise.beta_bs)
            r_row.append(rbi)
            x_row.append(hermitize(F[b] @ x @ F[b].conj().T))
        rbi_ul.append(r_row)
        x_ul.append(x_row)
    return GradientContext(T, Q, F, channels, noise, weights, cov, rbi_dl, rbi_ul, x_dl, x_ul)


def prepare_state(state, channels, noise, weights):
    T, Q = tx_covariances(state)
    return prepare(T, Q, state.F, channels, noise, weights)


def _accumulate(terms, dim):
    acc = np.zeros((dim, dim), dtype=complex)
    for w, c, x in terms:
        if w == 0:
            continue
        acc += w * (c.conj().T @ x @ c)
    return acc


def _with_ldr(a, k):
    return hermitize(a + k * _ddiag(a))


def gradients_ul_user(ctx, b, k):
    """
    The four gradients of ``T_k`` for UL user k of cell b.

    * ``in_ul``: other UL users of cell b, seen through H_k at BS b.
    * ``in_dl``: DL users of cell b, through the CI channel H_{j,k}.
    * ``out_ul``: UL users of each other cell c, through BS c's channel
      from user k.
    * ``out_dl``: DL users of the other cells, through their CI channels.
    """
    ch, w = ctx.channels, ctx.weights
    B = ctx.num_cells
    Hk = ch.h_ul(b, k)
    dim = Hk.shape[1]
    in_ul = _accumulate([(w.ul[b][m], Hk, ctx.x_ul[b][m])
                         for m in range(len(ctx.T[b])) if m != k], dim)
    in_dl = _accumulate([(w.dl[b][j], ch.h_ci(b, j, b, k), ctx.x_dl[b][j])
                         for j in range(len(ctx.Q[b]))], dim)
    out_ul_terms, out_dl_terms = [], []
    for c in range(B):
        if c == b:
            continue
        out_ul_terms += [(w.ul[c][m], ch.h_ul_bs(c, b, k), ctx.x_ul[c][m])
                         for m in range(len(ctx.T[c]))]
        out_dl_terms += [(w.dl[c][j], ch.h_ci(c, j, b, k), ctx.x_dl[c][j])
                         for j in range(len(ctx.Q[c]))]
    out_ul = _accumulate(out_ul_terms, dim)
    out_dl = _accumulate(out_dl_terms, dim)
    kk = ctx.noise.k_ul
    return UlGradients(_with_ldr(in_ul, kk), _with_ldr(in_dl, kk),
                       _with_ldr(out_ul, kk), _with_ldr(out_dl, kk))


def gradients_dl_user(ctx, b, j):
    """
    The four gradients of ``Q_j`` for DL user j of cell b.

    * ``in_ul``: UL users of cell b, through the SI channel H_{b,b}.
    * ``in_dl``: the other DL users of cell b, through their direct channels.
    * ``out_ul``: UL users of each other cell c, through H_{c,b}.
    * ``out_dl``: DL users of the other cells, through H_{j_c,b}.
    """
    ch, w = ctx.channels, ctx.weights
    B = ctx.num_cells
    dim = ctx.Q[b][j].shape[0]
    in_ul_terms = []
    if ctx.T[b]:
        Hbb = ch.h_si(b)
        in_ul_terms = [(w.ul[b][k], Hbb, ctx.x_ul[b][k]) for k in range(len(ctx.T[b]))]
    in_ul = _accumulate(in_ul_terms, dim)
    in_dl = _accumulate([(w.dl[b][l], ch.h_dl(b, l), ctx.x_dl[b][l])
                         for l in range(len(ctx.Q[b])) if l != j], dim)
    out_ul_terms, out_dl_terms = [], []
    for c in range(B):
        if c == b:
            continue
        if ctx.T[c]:
            Hcb = ch.h_bs_bs(c, b)
            out_ul_terms += [(w.ul[c][m], Hcb, ctx.x_ul[c][m]) for m in range(len(ctx.T[c]))]
        out_dl_terms += [(w.dl[c][l], ch.h_bs_dl(c, l, b), ctx.x_dl[c][l])
                         for l in range(len(ctx.Q[c]))]
    out_ul = _accumulate(out_ul_terms, dim)
    out_dl = _accumulate(out_dl_terms, dim)
    kb = ctx.noise.k_bs
    return DlGradients(_with_ldr(in_ul, kb), _with_ldr(in_dl, kb),
                       _with_ldr(out_ul, kb), _with_ldr(out_dl, kb))


def sigma1_ul(ctx, b, k):
    """Signal matrix ``H_k^H F Rbar_k^-1 F^H H_k``."""
    H = ctx.channels.h_ul(b, k)
    G = ctx.F[b].conj().T @ H
    return hermitize(G.conj().T @ ctx.rbar_inv_ul[b][k] @ G)


def sigma1_dl(ctx, b, j):
    """Signal matrix ``H_j^H Rbar_j^-1 H_j`` (antenna level)."""
    H = ctx.channels.h_dl(b, j)
    return hermitize(H.conj().T @ ctx.rbar_inv_dl[b][j] @ H)


def sigma_pair_ul(sigma1, grads, lam):
    """Pencil ``(Sigma1, sum of the UL gradients + lam I)``."""
    g = grads.total() if hasattr(grads, "total") else grads
    return HermitianPencil.make(sigma1, g + lam * np.eye(g.shape[0]))


def sigma_pair_dl(sigma1, grads, psi, W=None):
    """
    DL pencil; with ``W`` given it is taken to the RF domain,
    ``(W^H Sigma1 W, W^H (G + psi I) W)``.
    """
    g = grads.total() if hasattr(grads, "total") else grads
    s2 = g + psi * np.eye(g.shape[0])
    if W is None:
        return HermitianPencil.make(sigma1, s2)
    Wh = W.conj().T
    return HermitianPencil.make(hermitize(Wh @ sigma1 @ W), hermitize(Wh @ s2 @ W))


# ---------------------------------------------------------------------------
# distributed local variables
# ---------------------------------------------------------------------------
@dataclass
class LocalState:
    """
    Memory of one BS in the distributed solver.

    ``l_in_*``/``l_out_*`` are the in-cell and out-of-cell gradient sums of
    its own users; the cached covariances are those of its own links.
    """

    cell: int
    round: int
    l_in_ul: List[np.ndarray] = field(default_factory=list)
    l_out_ul: List[np.ndarray] = field(default_factory=list)
    l_in_dl: List[np.ndarray] = field(default_factory=list)
    l_out_dl: List[np.ndarray] = field(default_factory=list)
    sigma1_ul: List[np.ndarray] = field(default_factory=list)
    sigma1_dl: List[np.ndarray] = field(default_factory=list)
    rbar_inv_dl: List[np.ndarray] = field(default_factory=list)
    rbar_inv_ul: List[np.ndarray] = field(default_factory=list)
    ra: np.ndarray = None
    ra_bar: List[np.ndarray] = field(default_factory=list)

    def z2_ul(self, k, lam):
        g = self.l_in_ul[k] + self.l_out_ul[k]
        return g + lam * np.eye(g.shape[0])

    def z2_dl(self, j, psi):
        g = self.l_in_dl[j] + self.l_out_dl[j]
        return g + psi * np.eye(g.shape[0])


def assemble_view(b, own_slice, messages, num_cells, round_index=None):
    """
    Global state as seen by cell b: its own slice plus the slices reported
    by every neighbor. Raises MissingFeedback when a neighbor is absent.
    """
    by_sender = {m.sender: m for m in messages}
    slices = []
    for c in range(num_cells):
        if c == b:
            slices.append(own_slice)
            continue
        msg = by_sender.get(c)
        if msg is None:
            raise MissingFeedback(f"cell {b}: no feedback from cell {c}"
                                  + ("" if round_index is None else f" in round {round_index}"))
        slices.append(msg.as_slice())
    state = BeamformerState(
        U=[s["U"] for s in slices], pu=[s["pu"] for s in slices],
        V=[s["V"] for s in slices], pd=[s["pd"] for s in slices],
        W=[s["W"] for s in slices], F=[s["F"] for s in slices],
    )
    return state


def local_from_context(ctx, b, round_index=0):
    """Extract cell b's :class:`LocalState` from a gradient context."""
    ls = LocalState(cell=b, round=round_index)
    for k in range(len(ctx.T[b])):
        g = gradients_ul_user(ctx, b, k)
        ls.l_in_ul.append(g.in_ul + g.in_dl)
        ls.l_out_ul.append(g.out_ul + g.out_dl)
        ls.sigma1_ul.append(sigma1_ul(ctx, b, k))
        ls.rbar_inv_ul.append(ctx.rbar_inv_ul[b][k])
        ls.ra_bar.append(ctx.cov.ul[b][k][3])
    if ctx.T[b]:
        ls.ra = ctx.cov.ul[b][0][2]
    for j in range(len(ctx.Q[b])):
        g = gradients_dl_user(ctx, b, j)
        ls.l_in_dl.append(g.in_ul + g.in_dl)
        ls.l_out_dl.append(g.out_ul + g.out_dl)
        ls.sigma1_dl.append(sigma1_dl(ctx, b, j))
        ls.rbar_inv_dl.append(ctx.rbar_inv_dl[b][j])
    return ls


def refresh_local_state(b, received_messages, own_slice, channels, noise, weights,
                        num_cells, round_index=0):
    """
    Rebuild the local variables of cell b after a feedback exchange.

    The neighbors' beamformers come only from ``received_messages``; the
    cell's own variables from ``own_slice``.
    """
    view = assemble_view(b, own_slice, received_messages, num_cells, round_index)
    ctx = prepare_state(view, channels, noise, weights)
    return local_from_context(ctx, b, round_index)

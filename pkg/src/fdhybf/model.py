"""
Beamformer state, LDR-noise covariance assembly and the weighted sum rate.

Covariances are assembled from per-link transmit covariances ``T[b][k]``
(UL user k of cell b, size M_k) and ``Q[b][j]`` (DL user j of cell b,
antenna level, size M_b), so that gradient checks can perturb them
directly. The state-level wrappers build those from a
:class:`BeamformerState` first.

Conventions
-----------
* The analog combiner ``F[b]`` is stored with shape (N_b, N_b^RF) and the
  received RF-chain signal is ``F^H y``.
* Stream powers are stored as 1-D arrays (the diagonal of P).
* ``Phi`` is the undistorted received covariance; it contains thermal
  noise unless ``NoiseProfile.phi_includes_noise`` is False.
"""
import copy
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite, SingularCovariance
from .numerics import hermitize, lndet_hpd

__all__ = [
    "BeamformerState", "NoiseProfile", "Weights", "CovarianceBundle",
    "ConstraintReport", "tx_covariances", "dl_covariance", "ul_antenna_covariance",
    "ul_covariance", "rx_cov_dl", "rx_cov_ul", "covariance_bundle", "wsr",
    "wsr_from_tx", "link_rates", "project_unit_modulus", "quantize_phases",
    "grid_distance", "check_constraints",
]


def _ddiag(x):
    """Diagonal part of a square matrix, as a matrix."""
    return np.diag(np.diag(x))


@dataclass
class NoiseProfile:
    """
    LDR and thermal noise levels (linear).

    ``k_bs``/``k_ul`` scale the transmit distortion of BSs and UL users,
    ``beta_bs``/``beta_dl`` the receive distortion of BSs and DL users.
    """

    k_bs: float = 0.0
    k_ul: float = 0.0
    beta_bs: float = 0.0
    beta_dl: float = 0.0
    sigma2_bs: float = 1.0
    sigma2_dl: float = 1.0
    phi_includes_noise: bool = True

    @classmethod
    def from_config(cls, cfg):
        return cls(
            k_bs=cfg.ldr_tx, k_ul=cfg.ldr_tx, beta_bs=cfg.ldr_rx, beta_dl=cfg.ldr_rx,
            sigma2_bs=cfg.noise_variance, sigma2_dl=cfg.noise_variance,
            phi_includes_noise=cfg.phi_includes_noise,
        )


@dataclass
class Weights:
    """Per-link rate weights, ``ul[b][k]`` and ``dl[b][j]``."""

    ul: List[List[float]]
    dl: List[List[float]]

    @classmethod
    def uniform(cls, cfg):
        return cls(
            ul=[[cfg.ul_weight] * cfg.ul_users for _ in range(cfg.num_cells)],
            dl=[[cfg.dl_weight] * cfg.dl_users for _ in range(cfg.num_cells)],
        )


@dataclass
class BeamformerState:
    """
    All optimization variables of the network.

    Attributes
    ----------
    U, pu : list of list of ndarray
        UL digital beamformers (M_k, d_k) with unit-norm columns, and their
        stream powers (d_k,).
    V, pd : list of list of ndarray
        DL digital beamformers (M^RF, d_j) with unit-norm columns and powers.
    W : list of ndarray
        Analog beamformers (M, M^RF).
    F : list of ndarray
        Analog combiners (N, N^RF), applied as ``F^H``.
    lam : list of list of float
        UL power multipliers.
    psi : list of float
        BS power multipliers.
    """

    U: list
    pu: list
    V: list
    pd: list
    W: list
    F: list
    lam: list = None
    psi: list = None

    def __post_init__(self):
        if self.lam is None:
            self.lam = [[0.0] * len(u) for u in self.U]
        if self.psi is None:
            self.psi = [0.0] * len(self.W)

    @property
    def num_cells(self):
        return len(self.W)

    def copy(self):
        return copy.deepcopy(self)

    def cell_slice(self, b):
        """Own variables of cell b (deep copies)."""
        return dict(
            U=[u.copy() for u in self.U[b]], pu=[p.copy() for p in self.pu[b]],
            V=[v.copy() for v in self.V[b]], pd=[p.copy() for p in self.pd[b]],
            W=self.W[b].copy(), F=self.F[b].copy(),
        )

    def set_cell_slice(self, b, sl):
        self.U[b] = [u.copy() for u in sl["U"]]
        self.pu[b] = [np.asarray(p, dtype=float).copy() for p in sl["pu"]]
        self.V[b] = [v.copy() for v in sl["V"]]
        self.pd[b] = [np.asarray(p, dtype=float).copy() for p in sl["pd"]]
        self.W[b] = sl["W"].copy()
        self.F[b] = sl["F"].copy()

    def arrays(self):
        """Every array of the state in a fixed order (for hashing/compare)."""
        out = []
        for b in range(self.num_cells):
            out.extend(self.U[b])
            out.extend(self.pu[b])
            out.extend(self.V[b])
            out.extend(self.pd[b])
            out.append(self.W[b])
            out.append(self.F[b])
        return out


class CovarianceBundle(NamedTuple):
    """
    Received covariances of every link.

    ``dl[b][j] = (R, Rbar)``;
    ``ul[b][k] = (R, Rbar, Ra, Ra_bar)`` with ``Ra`` the antenna-level
    covariance of cell b (shared by its UL users).
    """

    dl: list
    ul: list


class ConstraintReport(NamedTuple):
    ul_power: list          # trace(U P U^H) - p_k per UL user
    bs_power: list          # trace(sum_j Q_j) - p_b per BS
    unit_modulus: float     # max |1 - |entry|| over W and F
    grid: float             # max distance of an analog phase to the grid

    def max_power_residual(self, cfg):
        res = [r / cfg.ul_power for cell in self.ul_power for r in cell]
        res += [r / cfg.bs_power for r in self.bs_power]
        return max(res) if res else 0.0


# ---------------------------------------------------------------------------
# transmit covariances
# ---------------------------------------------------------------------------
def _stream_cov(a, p):
    p = np.asarray(p, dtype=float)
    if a.shape[1] != p.shape[0]:
        raise DimensionMismatch(f"beamformer has {a.shape[1]} columns but {p.shape[0]} powers")
    return hermitize((a * p) @ a.conj().T)


def tx_covariances(state):
    """
    Transmit covariances ``T[b][k] = U P U^H`` and
    ``Q[b][j] = W V P V^H W^H``.
    """
    T = [[_stream_cov(u, p) for u, p in zip(state.U[b], state.pu[b])]
         for b in range(state.num_cells)]
    Q = []
    for b in range(state.num_cells):
        W = state.W[b]
        row = []
        for v, p in zip(state.V[b], state.pd[b]):
            if v.shape[0] != W.shape[1]:
                raise DimensionMismatch("digital DL beamformer does not match the analog RF size")
            row.append(_stream_cov(W @ v, p))
        Q.append(row)
    return T, Q


def _sandwich(h, x):
    return h @ x @ h.conj().T


def _ul_tx(t, k):
    return t + k * _ddiag(t)


def _bs_tx(Qb, k):
    if not Qb:
        return None
    s = sum(Qb[1:], Qb[0])
    return s + k * _ddiag(s)


# ---------------------------------------------------------------------------
# received covariances
# ---------------------------------------------------------------------------
def dl_covariance(b, j, T, Q, channels, noise):
    """
    ``(R, Rbar)`` for DL user j of cell b from transmit covariances.

    ``R = Phi + beta diag(Phi)`` and ``Rbar = R - H Q_j H^H``.
    """
    B = len(Q)
    H = channels.h_dl(b, j)
    n = H.shape[0]
    phi = np.zeros((n, n), dtype=complex)
    bs_b = _bs_tx(Q[b], noise.k_bs)
    if bs_b is not None:
        phi += _sandwich(H, bs_b)
    for k, t in enumerate(T[b]):
        phi += _sandwich(channels.h_ci(b, j, b, k), _ul_tx(t, noise.k_ul))
    for c in range(B):
        if c == b:
            continue
        bs_c = _bs_tx(Q[c], noise.k_bs)
        if bs_c is not None:
            phi += _sandwich(channels.h_bs_dl(b, j, c), bs_c)
        for k, t in enumerate(T[c]):
            phi += _sandwich(channels.h_ci(b, j, c, k), _ul_tx(t, noise.k_ul))
    thermal = noise.sigma2_dl * np.eye(n)
    if noise.phi_includes_noise:
        phi += thermal
        R = phi + noise.beta_dl * _ddiag(phi)
    else:
        R = phi + noise.beta_dl * _ddiag(phi) + thermal
    R = hermitize(R)
    Rbar = hermitize(R - _sandwich(H, Q[b][j]))
    return R, Rbar


def ul_antenna_covariance(b, T, Q, channels, noise, include_noise=True):
    """
    Antenna-level received covariance ``R^a`` of BS b (before ``F^H``).

    Contains the UL signals with their transmit LDR, the self-interference
    with BS transmit LDR, the out-cell BS and UL-user terms, and (with
    ``include_noise``) the thermal noise.
    """
    B = len(Q)
    n = None
    terms = []
    for k, t in enumerate(T[b]):
        terms.append(_sandwich(channels.h_ul(b, k), _ul_tx(t, noise.k_ul)))
    bs_b = _bs_tx(Q[b], noise.k_bs)
    if bs_b is not None:
        terms.append(_sandwich(channels.h_si(b), bs_b))
    for c in range(B):
        if c == b:
            continue
        bs_c = _bs_tx(Q[c], noise.k_bs)
        if bs_c is not None:
            terms.append(_sandwich(channels.h_bs_bs(b, c), bs_c))
        for k, t in enumerate(T[c]):
            terms.append(_sandwich(channels.h_ul_bs(b, c, k), _ul_tx(t, noise.k_ul)))
    if not terms:
        raise DimensionMismatch("ul_antenna_covariance needs at least one transmitter")
    n = terms[0].shape[0]
    ra = sum(terms[1:], terms[0]).astype(complex)
    if include_noise:
        ra = ra + noise.sigma2_bs * np.eye(n)
    return hermitize(ra)


def ul_covariance(b, k, T, Q, F, channels, noise, ra=None):
    """
    ``(R, Rbar, Ra, Ra_bar)`` for UL user k of cell b.

    ``F`` is the combiner of BS b, shape (N, N^RF). ``ra`` may pass a
    precomputed antenna-level covariance of the cell.
    """
    if ra is None:
        ra = ul_antenna_covariance(b, T, Q, channels, noise)
    Fh = F.conj().T
    nrf = F.shape[1]
    if noise.phi_includes_noise:
        phi = Fh @ ra @ F
    else:
        phi = Fh @ (ra - noise.sigma2_bs * np.eye(ra.shape[0])) @ F
    R = hermitize(Fh @ ra @ F + noise.beta_bs * _ddiag(phi))
    H = channels.h_ul(b, k)
    own = _sandwich(H, T[b][k])
    Rbar = hermitize(R - Fh @ own @ F)
    ra_bar = hermitize(ra - own)
    assert R.shape == (nrf, nrf)
    return R, Rbar, ra, ra_bar


def covariance_bundle(T, Q, F, channels, noise):
    """Covariances of every link for the given transmit covariances."""
    B = len(Q)
    dl = [[dl_covariance(b, j, T, Q, channels, noise) for j in range(len(Q[b]))]
          for b in range(B)]
    ul = []
    for b in range(B):
        if T[b]:
            ra = ul_antenna_covariance(b, T, Q, channels, noise)
            ul.append([ul_covariance(b, k, T, Q, F[b], channels, noise, ra=ra)
                       for k in range(len(T[b]))])
        else:
            ul.append([])
    return CovarianceBundle(dl, ul)


def rx_cov_dl(j, b, state, channels, noise):
    """State-level wrapper of :func:`dl_covariance`."""
    T, Q = tx_covariances(state)
    return dl_covariance(b, j, T, Q, channels, noise)


def rx_cov_ul(k, b, state, channels, noise):
    """State-level wrapper of :func:`ul_covariance`."""
    T, Q = tx_covariances(state)
    return ul_covariance(b, k, T, Q, state.F[b], channels, noise)


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------
def _rate(R, Rbar):
    try:
        return lndet_hpd(R) - lndet_hpd(Rbar)
    except NotPositiveDefinite as exc:
        raise SingularCovariance(str(exc)) from exc


def link_rates(cov):
    """Unweighted rates ``(ul[b][k], dl[b][j])`` in nats."""
    ul = [[_rate(c[0], c[1]) for c in cell] for cell in cov.ul]
    dl = [[_rate(c[0], c[1]) for c in cell] for cell in cov.dl]
    return ul, dl


def wsr_from_tx(T, Q, F, channels, noise, weights):
    cov = covariance_bundle(T, Q, F, channels, noise)
    return weighted_sum(cov, weights)


def weighted_sum(cov, weights):
    ul, dl = link_rates(cov)
    total = 0.0
    for b in range(len(ul)):
        total += sum(w * r for w, r in zip(weights.ul[b], ul[b]))
        total += sum(w * r for w, r in zip(weights.dl[b], dl[b]))
    return total


def wsr(state, channels, noise, weights):
    """
    Weighted sum rate in nats,
    ``sum_links w * (lndet R - lndet Rbar)``.
    """
    T, Q = tx_covariances(state)
    return wsr_from_tx(T, Q, state.F, channels, noise, weights)


# ---------------------------------------------------------------------------
# analog constraints
# ---------------------------------------------------------------------------
def project_unit_modulus(m, return_flag=False):
    """
    Replace every entry by its phase factor ``exp(i arg)``.

    Exact zeros have no phase; they become +1 and the returned flag is set.
    """
    m = np.asarray(m, dtype=complex)
    mag = np.abs(m)
    zero = mag == 0
    out = np.where(zero, 1.0 + 0j, m / np.where(zero, 1.0, mag))
    if return_flag:
        return out, bool(zero.any())
    return out


def quantize_phases(m, bits):
    """
    Map every entry to the nearest point of ``exp(i 2 pi l / 2**bits)``.

    Ties are resolved towards the lower index l.
    """
    n = 2 ** int(bits)
    ang = np.mod(np.angle(m), 2.0 * np.pi)
    x = ang * n / (2.0 * np.pi)
    ell = np.mod(np.ceil(x - 0.5), n)
    return np.exp(2j * np.pi * ell / n)


def grid_distance(m, bits):
    """Largest phase distance (radians) from an entry to the grid."""
    n = 2 ** int(bits)
    ang = np.mod(np.angle(m), 2.0 * np.pi)
    step = 2.0 * np.pi / n
    r = np.mod(ang, step)
    d = np.minimum(r, step - r)
    return float(d.max()) if d.size else 0.0


def check_constraints(state, cfg):
    """Residuals of the power, unit-modulus and phase-grid constraints."""
    ul = [[float(np.sum(p * np.sum(np.abs(u) ** 2, axis=0))) - cfg.ul_power
           for u, p in zip(state.U[b], state.pu[b])] for b in range(state.num_cells)]
    bs = []
    for b in range(state.num_cells):
        used = 0.0
        for v, p in zip(state.V[b], state.pd[b]):
            used += float(np.sum(p * np.sum(np.abs(state.W[b] @ v) ** 2, axis=0)))
        bs.append(used - cfg.bs_power)
    if cfg.fully_digital:
        # identity analog stages carry no phase-shifter constraints
        return ConstraintReport(ul, bs, 0.0, 0.0)
    analog = list(state.W) + list(state.F)
    um = max(float(np.max(np.abs(1.0 - np.abs(a)))) for a in analog)
    gd = max(grid_distance(a, cfg.phase_bits) for a in analog)
    return ConstraintReport(ul, bs, um, gd)

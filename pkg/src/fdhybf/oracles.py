"""
Brute-force reference computations used to check the solvers.

Nothing in this module imports the numerics, model, gradients or solver
modules. Network quantities are rebuilt from first principles: the
Monte-Carlo sampler draws the transmitted symbols and distortion terms of
every node, and :func:`stacked_covariance` forms each received covariance
from one stacked transmit vector of the whole network.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

__all__ = [
    "TOLERANCES", "OracleReport", "MCEstimate", "mc_covariance", "dl_sampler",
    "ul_sampler", "fd_gradient", "dense_gde", "max_principal_angle",
    "power_grid_search", "kkt_residual", "slackness_residual",
    "stacked_covariance", "stacked_covariance_tx", "reference_rate_sum", "reference_wsr",
]

#: Tolerances quoted by every comparison.
TOLERANCES = {
    "cholesky": 1e-10,
    "gde_residual": 1e-8,
    "gde_angle": 1e-7,
    "positive_part": 1e-10,
    "kron_identity": 1e-12,
    "covariance_mc": 0.02,
    "gradient_fd": 1e-4,
    "wsr_terms": 1e-9,
    "kkt_exact": 1e-8,
    "slackness": 1e-6,
    "local_state": 1e-10,
}


@dataclass
class OracleReport:
    """One reference-vs-implementation comparison."""

    oracle: str
    instance: str
    reference: object
    implementation: object
    rel_error: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.rel_error <= self.tolerance)

    def to_json(self):
        def conv(x):
            if isinstance(x, np.ndarray):
                x = x.tolist()
            if isinstance(x, complex):
                return [x.real, x.imag]
            if isinstance(x, list):
                return [conv(v) for v in x]
            if isinstance(x, (np.floating, np.integer)):
                return x.item()
            return x
        d = asdict(self)
        d["reference"] = conv(self.reference)
        d["implementation"] = conv(self.implementation)
        return json.dumps(d, sort_keys=True)


def _herm(a):
    return 0.5 * (a + a.conj().T)


def _cn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _cov_sample(rng, cov, n):
    """n samples (rows) of CN(0, cov) via an eigen square root."""
    vals, vecs = np.linalg.eigh(_herm(cov))
    root = vecs * np.sqrt(np.maximum(vals, 0.0))
    return _cn(rng, (n, cov.shape[0])) @ root.T


# ---------------------------------------------------------------------------
# Monte-Carlo signal-level covariance
# ---------------------------------------------------------------------------
class MCEstimate(NamedTuple):
    cov: np.ndarray
    stderr: np.ndarray
    samples: int


def mc_covariance(sampler, samples, rng, batch=50_000):
    """
    Sample covariance of a zero-mean complex signal.

    Parameters
    ----------
    sampler : callable
        ``sampler(rng, n)`` returns an (n, dim) array of received vectors.
    samples : int
        Number of draws, at least 10 000.
    rng : numpy.random.Generator

    Returns
    -------
    MCEstimate
        Covariance, entrywise standard error and sample count.
    """
    if samples < 10_000:
        raise ValueError("mc_covariance needs at least 10 000 samples")
    acc = None
    acc2 = None
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        y = sampler(rng, n)
        outer = y[:, :, None] * y[:, None, :].conj()
        s = outer.sum(axis=0)
        s2 = (np.abs(outer) ** 2).sum(axis=0)
        acc = s if acc is None else acc + s
        acc2 = s2 if acc2 is None else acc2 + s2
        done += n
    cov = acc / samples
    var = acc2 / samples - np.abs(cov) ** 2
    return MCEstimate(_herm(cov), np.sqrt(np.maximum(var, 0.0) / samples), samples)


def _powers(state):
    """Per-node transmit precoders (including powers) read off a state."""
    bs = [[(state.W[b] @ v) * np.sqrt(np.asarray(p)) for v, p in zip(state.V[b], state.pd[b])]
          for b in range(len(state.W))]
    ue = [[u * np.sqrt(np.asarray(p)) for u, p in zip(state.U[b], state.pu[b])]
          for b in range(len(state.W))]
    return bs, ue


def _draw_transmissions(rng, n, state, noise):
    """Transmit signals of every BS and UL user, LDR distortion included."""
    bs_pre, ue_pre = _powers(state)
    bs_x, ue_x = [], []
    for b, pre in enumerate(bs_pre):
        m = state.W[b].shape[0]
        x = np.zeros((n, m), dtype=complex)
        var = np.zeros(m)
        for g in pre:
            x += _cn(rng, (n, g.shape[1])) @ g.T
            var += np.sum(np.abs(g) ** 2, axis=1)
        x += _cn(rng, (n, m)) * np.sqrt(noise.k_bs * var)
        bs_x.append(x)
    for b, users in enumerate(ue_pre):
        row = []
        for g in users:
            x = _cn(rng, (n, g.shape[1])) @ g.T
            var = np.sum(np.abs(g) ** 2, axis=1)
            x += _cn(rng, (n, g.shape[0])) * np.sqrt(noise.k_ul * var)
            row.append(x)
        ue_x.append(row)
    return bs_x, ue_x


def _receive_ldr(rng, r, thermal_var, beta, include_noise):
    n, dim = r.shape
    thermal = _cn(rng, (n, dim)) * np.sqrt(thermal_var)
    # two passes: the distortion level follows the undistorted power
    undist = r + thermal if include_noise else r
    phi_diag = np.mean(np.abs(undist) ** 2, axis=0)
    e = _cn(rng, (n, dim)) * np.sqrt(beta * phi_diag)
    return r + thermal + e


def dl_sampler(b, j, state, channels, noise):
    """Sampler of the signal received by DL user j of cell b."""
    def draw(rng, n):
        bs_x, ue_x = _draw_transmissions(rng, n, state, noise)
        h = channels.direct_dl[(b, j)]
        r = bs_x[b] @ h.T
        for c in range(len(bs_x)):
            if c != b:
                r += bs_x[c] @ channels.bs_to_dl[(b, j, c)].T
            for k, x in enumerate(ue_x[c]):
                r += x @ channels.ci[(b, j, c, k)].T
        # a thermal variance of zero is handled by the sampler itself
        return _receive_ldr(rng, r, noise.sigma2_dl, noise.beta_dl, noise.phi_includes_noise)
    return draw


def ul_sampler(b, k, state, channels, noise):
    """Sampler of the RF-chain signal of BS b (the combined UL signal)."""
    del k  # every UL user of a cell sees the same received signal
    F = state.F[b]

    def draw(rng, n):
        bs_x, ue_x = _draw_transmissions(rng, n, state, noise)
        y = 0
        for c in range(len(bs_x)):
            h = channels.si[b] if c == b else channels.bs_to_bs[(b, c)]
            if state.V[c]:
                y = y + bs_x[c] @ h.T
            for m, x in enumerate(ue_x[c]):
                hu = channels.direct_ul[(b, m)] if c == b else channels.ul_to_bs[(b, c, m)]
                y = y + x @ hu.T
        nb = F.shape[0]
        thermal = _cn(rng, (n, nb)) * np.sqrt(noise.sigma2_bs)
        r = (y @ F.conj()) if noise.phi_includes_noise is False else None
        undist = (y + thermal) @ F.conj()
        if noise.phi_includes_noise:
            phi_diag = np.mean(np.abs(undist) ** 2, axis=0)
        else:
            phi_diag = np.mean(np.abs(r) ** 2, axis=0)
        e = _cn(rng, (n, F.shape[1])) * np.sqrt(noise.beta_bs * phi_diag)
        return undist + e
    return draw


# ---------------------------------------------------------------------------
# exact covariance from the stacked network transmit vector
# ---------------------------------------------------------------------------
def _transmitters(state):
    """(kind, cell, index, covariance) for every node, in stacking order."""
    out = []
    for b in range(len(state.W)):
        q = sum((state.W[b] @ v * np.asarray(p)) @ (state.W[b] @ v).conj().T
                for v, p in zip(state.V[b], state.pd[b])) if state.V[b] else None
        out.append(("bs", b, None, q))
        for k, (u, p) in enumerate(zip(state.U[b], state.pu[b])):
            out.append(("ue", b, k, (u * np.asarray(p)) @ u.conj().T))
    return out


def _link_channel(channels, rx, tx):
    """Channel from transmitter tx to receiver rx (antenna level)."""
    rkind, rb, ridx = rx
    tkind, tb, tidx = tx
    if rkind == "dl":
        if tkind == "bs":
            return channels.direct_dl[(rb, ridx)] if tb == rb else channels.bs_to_dl[(rb, ridx, tb)]
        return channels.ci[(rb, ridx, tb, tidx)]
    if tkind == "bs":
        return channels.si[rb] if tb == rb else channels.bs_to_bs[(rb, tb)]
    return channels.direct_ul[(rb, tidx)] if tb == rb else channels.ul_to_bs[(rb, tb, tidx)]


def stacked_covariance(rx, state, channels, noise):
    """
    Exact ``(R, Rbar)`` of a receiver from the whole-network transmit
    covariance.

    ``rx`` is ``("dl", b, j)`` or ``("ul", b, k)``. The stacked transmit
    covariance is block diagonal with blocks ``S + k diag(S)``; the own
    signal (without its distortion) is removed for ``Rbar``.
    """
    kind, b, idx = rx
    nodes = [t for t in _transmitters(state) if t[3] is not None]
    blocks, cols = [], []
    own = None
    for tkind, tb, tidx, s in nodes:
        kk = noise.k_bs if tkind == "bs" else noise.k_ul
        blocks.append(s + kk * np.diag(np.diag(s)))
        h = _link_channel(channels, (kind, b, idx), (tkind, tb, tidx))
        cols.append(h)
        if kind == "dl" and tkind == "bs" and tb == b:
            v = state.V[b][idx]
            g = (state.W[b] @ v) * np.sqrt(np.asarray(state.pd[b][idx]))
            own = h @ g
        if kind == "ul" and tkind == "ue" and tb == b and tidx == idx:
            own = h @ (state.U[b][idx] * np.sqrt(np.asarray(state.pu[b][idx])))
    C = np.concatenate(cols, axis=1)
    S = scipy.linalg.block_diag(*blocks)
    phi = C @ S @ C.conj().T
    n = phi.shape[0]
    if kind == "dl":
        sigma2, beta = noise.sigma2_dl, noise.beta_dl
        thermal = sigma2 * np.eye(n)
        sig = own @ own.conj().T
    else:
        sigma2, beta = noise.sigma2_bs, noise.beta_bs
        Fh = state.F[b].conj().T
        phi = Fh @ phi @ Fh.conj().T
        thermal = sigma2 * (Fh @ Fh.conj().T)
        sig = (Fh @ own) @ (Fh @ own).conj().T
    if noise.phi_includes_noise:
        phi = phi + thermal
        R = phi + beta * np.diag(np.diag(phi))
    else:
        R = phi + beta * np.diag(np.diag(phi)) + thermal
    return _herm(R), _herm(R - sig)


def stacked_covariance_tx(rx, T, Q, F, channels, noise):
    """
    :func:`stacked_covariance` with the transmit covariances given directly.

    ``T[b][k]`` is the covariance of UL user k of cell b and ``Q[b][j]``
    the antenna-level covariance BS b spends on DL user j; the BS
    distortion follows the diagonal of their sum.
    """
    kind, b, idx = rx
    blocks, cols = [], []
    own = None
    for c in range(len(Q)):
        if Q[c]:
            s = sum(Q[c])
            blocks.append(s + noise.k_bs * np.diag(np.diag(s)))
            h = _link_channel(channels, (kind, b, idx), ("bs", c, None))
            cols.append(h)
            if kind == "dl" and c == b:
                own = h @ Q[c][idx] @ h.conj().T
        for m, t in enumerate(T[c]):
            blocks.append(t + noise.k_ul * np.diag(np.diag(t)))
            h = _link_channel(channels, (kind, b, idx), ("ue", c, m))
            cols.append(h)
            if kind == "ul" and c == b and m == idx:
                own = h @ t @ h.conj().T
    C = np.concatenate(cols, axis=1)
    phi = C @ scipy.linalg.block_diag(*blocks) @ C.conj().T
    n = phi.shape[0]
    if kind == "dl":
        sigma2, beta = noise.sigma2_dl, noise.beta_dl
        thermal = sigma2 * np.eye(n)
    else:
        sigma2, beta = noise.sigma2_bs, noise.beta_bs
        Fh = F[b].conj().T
        phi = Fh @ phi @ Fh.conj().T
        thermal = sigma2 * (Fh @ Fh.conj().T)
        own = Fh @ own @ Fh.conj().T
    if noise.phi_includes_noise:
        phi = phi + thermal
        R = phi + beta * np.diag(np.diag(phi))
    else:
        R = phi + beta * np.diag(np.diag(phi)) + thermal
    return _herm(R), _herm(R - own)


def reference_rate_sum(links, T, Q, F, channels, noise, weights):
    """
    Weighted sum of the rates of ``links`` (``("dl"|"ul", b, idx)``
    triples) as a function of the transmit covariances.
    """
    total = 0.0
    for kind, b, idx in links:
        R, Rb = stacked_covariance_tx((kind, b, idx), T, Q, F, channels, noise)
        w = weights.dl[b][idx] if kind == "dl" else weights.ul[b][idx]
        total += w * (np.linalg.slogdet(R)[1] - np.linalg.slogdet(Rb)[1])
    return float(total)


def reference_wsr(state, channels, noise, weights):
    """Weighted sum rate from :func:`stacked_covariance`, via ``slogdet``."""
    total = 0.0
    for b in range(len(state.W)):
        for j in range(len(state.V[b])):
            R, Rb = stacked_covariance(("dl", b, j), state, channels, noise)
            total += weights.dl[b][j] * (np.linalg.slogdet(R)[1] - np.linalg.slogdet(Rb)[1])
        for k in range(len(state.U[b])):
            R, Rb = stacked_covariance(("ul", b, k), state, channels, noise)
            total += weights.ul[b][k] * (np.linalg.slogdet(R)[1] - np.linalg.slogdet(Rb)[1])
    return float(total)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------
def fd_gradient(f: Callable, x, step=None):
    """
    Gradient of a real function of a Hermitian matrix by central differences.

    Returns Hermitian G with ``f(x + dx) ~ f(x) + tr(G dx)``. Off-diagonal
    entries come from the two symmetric directions ``E_mn + E_nm`` and
    ``i (E_mn - E_nm)``.

    Parameters
    ----------
    f : callable
        Maps an (n, n) Hermitian matrix to a float.
    x : ndarray
        Expansion point.
    step : float, optional
        Defaults to ``1e-6 * (1 + ||x||_F)``.
    """
    x = np.asarray(x, dtype=complex)
    n = x.shape[0]
    if step is None:
        step = 1e-6 * (1.0 + np.linalg.norm(x))

    def diff(e):
        return (f(x + step * e) - f(x - step * e)) / (2.0 * step)

    g = np.zeros((n, n), dtype=complex)
    for m in range(n):
        e = np.zeros((n, n), dtype=complex)
        e[m, m] = 1.0
        g[m, m] = diff(e)
        for q in range(m + 1, n):
            e = np.zeros((n, n), dtype=complex)
            e[m, q] = e[q, m] = 1.0
            d1 = diff(e)
            e = np.zeros((n, n), dtype=complex)
            e[m, q], e[q, m] = 1j, -1j
            d2 = diff(e)
            g[m, q] = 0.5 * (d1 + 1j * d2)
            g[q, m] = np.conj(g[m, q])
    return g


# ---------------------------------------------------------------------------
# eigen references
# ---------------------------------------------------------------------------
def dense_gde(a, b, d):
    """Top-d generalized eigenpairs from the QZ solver ``scipy.linalg.eig``."""
    vals, vecs = scipy.linalg.eig(a, b)
    vals = np.real(vals)
    order = np.argsort(-vals, kind="stable")[:d]
    v = vecs[:, order]
    return v / np.linalg.norm(v, axis=0), vals[order]


def max_principal_angle(x, y):
    """Largest principal angle (radians) between the column spans."""
    return float(np.max(scipy.linalg.subspace_angles(x, y)))


# ---------------------------------------------------------------------------
# power allocation and stationarity
# ---------------------------------------------------------------------------
def power_grid_search(w, s1, s2, grid=400, pmax=None):
    """
    Maximize ``w lndet(I + s1 P) - tr(s2 P)`` over diagonal 2 x 2 P >= 0
    on a ``grid x grid`` lattice.

    Returns the best power pair and the lattice spacing.
    """
    s1 = np.asarray(s1)
    s2 = np.asarray(s2)
    if pmax is None:
        pmax = 2.0 * w * max(1.0 / np.real(s2[0, 0]), 1.0 / np.real(s2[1, 1]))
    p = np.linspace(0.0, pmax, grid)
    p1, p2 = np.meshgrid(p, p, indexing="ij")
    # closed-form 2x2 determinant of I + s1 P
    a, bb, c, dd = s1[0, 0], s1[0, 1], s1[1, 0], s1[1, 1]
    det = (1 + a * p1) * (1 + dd * p2) - bb * c * p1 * p2
    obj = w * np.log(np.real(det)) - np.real(s2[0, 0]) * p1 - np.real(s2[1, 1]) * p2
    i = np.unravel_index(np.argmax(obj), obj.shape)
    return np.array([p1[i], p2[i]]), p[1] - p[0]


def _stationarity(s1, s2, bf, w):
    # gradient of w lndet(I + bf^H s1 bf) - tr(bf^H s2 bf) with powers folded in
    k = bf.shape[1]
    left = w * s1 @ bf @ np.linalg.inv(np.eye(k) + bf.conj().T @ s1 @ bf)
    right = s2 @ bf
    scale = np.linalg.norm(left) + np.linalg.norm(right)
    return float(np.linalg.norm(left - right) / scale) if scale > 0 else 0.0


def kkt_residual(kind, **kw):
    """
    Normalized stationarity residual.

    ``kind`` is one of

    * ``"digital_ul"``: ``s1``, ``s2`` (antenna level), ``U``, ``p``, ``w``.
    * ``"digital_dl"``: ``s1``, ``s2`` (antenna level), ``W``, ``V``, ``p``, ``w``.
    * ``"analog_tx"``: ``W``, lists ``s1``, ``s2``, ``V``, ``p``, ``w`` over
      the DL users of the cell.
    """
    if kind == "digital_ul":
        bf = kw["U"] * np.sqrt(np.asarray(kw["p"]))
        return _stationarity(kw["s1"], kw["s2"], bf, kw["w"])
    if kind == "digital_dl":
        W = kw["W"]
        s1 = W.conj().T @ kw["s1"] @ W
        s2 = W.conj().T @ kw["s2"] @ W
        bf = kw["V"] * np.sqrt(np.asarray(kw["p"]))
        return _stationarity(s1, s2, bf, kw["w"])
    if kind == "analog_tx":
        W = kw["W"]
        left = np.zeros_like(W, dtype=complex)
        right = np.zeros_like(W, dtype=complex)
        for s1, s2, v, p, w in zip(kw["s1"], kw["s2"], kw["V"], kw["p"], kw["w"]):
            ve = v * np.sqrt(np.asarray(p))
            x = ve @ ve.conj().T
            s = W.conj().T @ s1 @ W
            kmat = ve @ np.linalg.inv(np.eye(ve.shape[1]) + ve.conj().T @ s @ ve) @ ve.conj().T
            left += w * s1 @ W @ kmat
            right += s2 @ W @ x
        scale = np.linalg.norm(left) + np.linalg.norm(right)
        return float(np.linalg.norm(left - right) / scale) if scale > 0 else 0.0
    raise ValueError(f"unknown stationarity condition {kind!r}")


def slackness_residual(mu, budget, allocated):
    """Complementary slackness ``|mu (budget - allocated)|``."""
    return abs(mu * (budget - allocated))

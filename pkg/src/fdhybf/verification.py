"""
Implementation-versus-oracle comparisons.

Each check builds an instance, evaluates it once with the library and once
with :mod:`fdhybf.oracles`, and returns an
:class:`~fdhybf.oracles.OracleReport` carrying the tabulated tolerance.
The CLI ``oracle`` subcommand and the test-suite both call into here.
"""
import numpy as np
import scipy.linalg

from . import oracles
from .chybf import allocate_power, bisect_multiplier, init_state, ul_evaluator, water_fill_gde
from .gradients import (gradients_dl_user, gradients_ul_user, local_from_context, prepare,
                        prepare_state, refresh_local_state, sigma1_ul)
from .model import NoiseProfile, Weights, rx_cov_dl, rx_cov_ul, tx_covariances
from .numerics import cholesky_factor, gde, positive_part, rediagonalize, vec
from .oracles import TOLERANCES, OracleReport
from .scenario import draw_network_channels, make_rng, profile

__all__ = [
    "random_hpd", "random_psd", "random_pencil", "small_config", "gradient_config",
    "check_cholesky", "check_gde", "check_positive_part", "check_rediagonalize",
    "check_kron", "check_gradients", "check_covariance_mc", "check_covariance_exact",
    "check_power_grid", "check_kkt", "check_feedback_equivalence", "run_suite",
]


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def random_hpd(rng, n, shift=0.1):
    a = _crandn(rng, n, n)
    return a @ a.conj().T + shift * n * np.eye(n)


def random_psd(rng, n, rank=None):
    a = _crandn(rng, n, rank or n)
    return a @ a.conj().T


def random_pencil(rng, n):
    return random_psd(rng, n), random_hpd(rng, n)


def _rel(a, b):
    den = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else float(np.linalg.norm(a - b))


def small_config(**kw):
    """Two-cell instance with every dimension at most 4."""
    base = dict(bs_tx_antennas=4, bs_rx_antennas=4, rf_chains=2, ul_user_antennas=2,
                dl_user_antennas=2, dl_streams=2, ul_streams=2, ldr_db=-40.0)
    base.update(kw)
    return profile("desk", **base)


def gradient_config(**kw):
    """Desk dimensions with two users per direction, so no gradient is empty."""
    base = dict(dl_users=2, ul_users=2, ldr_db=-30.0, snr_db=10.0)
    base.update(kw)
    return profile("desk", **base)


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------
def check_cholesky(rng, n=6):
    a = random_hpd(rng, n)
    L = cholesky_factor(a)
    ref = scipy.linalg.cholesky(a, lower=True)
    err = max(_rel(L @ L.conj().T, a), _rel(L, ref))
    return OracleReport("cholesky", f"hpd n={n}", None, None, err, TOLERANCES["cholesky"])


def check_gde(rng, n, d):
    """Residual and subspace-angle comparison for one random pencil."""
    a, b = random_pencil(rng, n)
    res = gde(a, b, d)
    ref_v, ref_l = oracles.dense_gde(a, b, d)
    v = res.vectors
    av = a @ v
    resid = max(np.linalg.norm(av[:, i] - res.values[i] * (b @ v[:, i])) / np.linalg.norm(av[:, i])
                for i in range(d))
    angle = oracles.max_principal_angle(v, ref_v)
    return (OracleReport("gde_residual", f"n={n} d={d}", 0.0, resid, resid,
                         TOLERANCES["gde_residual"]),
            OracleReport("gde_angle", f"n={n} d={d}", ref_l, res.values, angle,
                         TOLERANCES["gde_angle"]))


def check_positive_part(rng, n=4):
    x = random_psd(rng, n) - random_psd(rng, n)
    vals, vecs = scipy.linalg.eigh(x)
    ref = (vecs * np.maximum(vals, 0.0)) @ vecs.conj().T
    return OracleReport("positive_part", f"hermitian n={n}", None, None,
                        _rel(positive_part(x), ref), TOLERANCES["positive_part"])


def check_rediagonalize(rng, n=4):
    v = _crandn(rng, n, 1)
    v *= np.sqrt(5.0) / np.linalg.norm(v)
    p = v @ v.conj().T
    ref = np.diag(scipy.linalg.svdvals(p))
    return OracleReport("rediagonalize", f"rank-1 n={n}", None, None,
                        _rel(rediagonalize(p), ref), TOLERANCES["positive_part"])


def check_kron(rng, n=3):
    a, x, b = _crandn(rng, n, n), _crandn(rng, n, n), _crandn(rng, n, n)
    err = _rel(np.kron(b.T, a) @ vec(x), vec(a @ x @ b))
    return OracleReport("kron_identity", f"n={n}", 0.0, err, err, TOLERANCES["kron_identity"])


# ---------------------------------------------------------------------------
# network quantities
# ---------------------------------------------------------------------------
def _instance(cfg, seed):
    channels = draw_network_channels(make_rng(seed), cfg)
    state = init_state(cfg, channels)
    return channels, state, NoiseProfile.from_config(cfg), Weights.uniform(cfg)


def _groups_ul(cfg, b, k):
    B = cfg.num_cells
    return {
        "in_ul": [("ul", b, m) for m in range(cfg.ul_users) if m != k],
        "in_dl": [("dl", b, j) for j in range(cfg.dl_users)],
        "out_ul": [("ul", c, m) for c in range(B) if c != b for m in range(cfg.ul_users)],
        "out_dl": [("dl", c, j) for c in range(B) if c != b for j in range(cfg.dl_users)],
    }


def _groups_dl(cfg, b, j):
    B = cfg.num_cells
    return {
        "in_ul": [("ul", b, m) for m in range(cfg.ul_users)],
        "in_dl": [("dl", b, l) for l in range(cfg.dl_users) if l != j],
        "out_ul": [("ul", c, m) for c in range(B) if c != b for m in range(cfg.ul_users)],
        "out_dl": [("dl", c, l) for c in range(B) if c != b for l in range(cfg.dl_users)],
    }


def check_gradients(cfg, seed, b=None, link=None):
    """
    The eight interference gradients of one UL and one DL user against
    central differences of the link-rate sums they linearize.
    """
    channels, state, noise, weights = _instance(cfg, seed)
    T, Q = tx_covariances(state)
    ctx = prepare(T, Q, state.F, channels, noise, weights)
    b = seed % cfg.num_cells if b is None else b
    reports = []
    if cfg.ul_users:
        k = (seed // cfg.num_cells) % cfg.ul_users if link is None else link
        grads = gradients_ul_user(ctx, b, k)
        for name, links in _groups_ul(cfg, b, k).items():
            def f(x, links=links):
                T2 = [list(row) for row in T]
                T2[b][k] = x
                return oracles.reference_rate_sum(links, T2, Q, state.F, channels, noise, weights)
            ref = -oracles.fd_gradient(f, T[b][k])
            imp = getattr(grads, name)
            reports.append(OracleReport("gradient_fd", f"seed={seed} T[{b}][{k}] {name}",
                                        None, None, _rel(imp, ref), TOLERANCES["gradient_fd"]))
    if cfg.dl_users:
        j = (seed // cfg.num_cells) % cfg.dl_users if link is None else link
        grads = gradients_dl_user(ctx, b, j)
        for name, links in _groups_dl(cfg, b, j).items():
            def f(x, links=links):
                Q2 = [list(row) for row in Q]
                Q2[b][j] = x
                return oracles.reference_rate_sum(links, T, Q2, state.F, channels, noise, weights)
            ref = -oracles.fd_gradient(f, Q[b][j])
            imp = getattr(grads, name)
            reports.append(OracleReport("gradient_fd", f"seed={seed} Q[{b}][{j}] {name}",
                                        None, None, _rel(imp, ref), TOLERANCES["gradient_fd"]))
    return reports


def check_covariance_mc(cfg, seed, samples=200_000):
    """Monte-Carlo signal covariances against the closed-form ones."""
    channels, state, noise, _ = _instance(cfg, seed)
    rng = make_rng(10_000 + seed)
    reports = []
    for b in range(cfg.num_cells):
        for j in range(cfg.dl_users):
            est = oracles.mc_covariance(oracles.dl_sampler(b, j, state, channels, noise), samples, rng)
            R = rx_cov_dl(j, b, state, channels, noise)[0]
            reports.append(OracleReport("covariance_mc", f"seed={seed} dl b={b} j={j}",
                                        None, None, _rel(R, est.cov), TOLERANCES["covariance_mc"]))
        for k in range(cfg.ul_users):
            est = oracles.mc_covariance(oracles.ul_sampler(b, k, state, channels, noise), samples, rng)
            R = rx_cov_ul(k, b, state, channels, noise)[0]
            reports.append(OracleReport("covariance_mc", f"seed={seed} ul b={b} k={k}",
                                        None, None, _rel(R, est.cov), TOLERANCES["covariance_mc"]))
    return reports


def check_covariance_exact(cfg, seed):
    """Both covariances of every link against the stacked-network formula."""
    channels, state, noise, weights = _instance(cfg, seed)
    reports = []
    for b in range(cfg.num_cells):
        for kind, n, fn in (("dl", cfg.dl_users, rx_cov_dl), ("ul", cfg.ul_users, rx_cov_ul)):
            for i in range(n):
                R, Rb = fn(i, b, state, channels, noise)[:2]
                Rr, Rbr = oracles.stacked_covariance((kind, b, i), state, channels, noise)
                err = max(_rel(R, Rr), _rel(Rb, Rbr))
                reports.append(OracleReport("wsr_terms", f"seed={seed} {kind} b={b} i={i}",
                                            None, None, err, TOLERANCES["wsr_terms"]))
    return reports


def check_power_grid(rng, w=1.0):
    """Closed-form 2-stream powers against an exhaustive grid search."""
    s1 = np.diag(rng.uniform(0.5, 4.0, 2)).astype(complex)
    s2 = np.diag(rng.uniform(0.2, 1.0, 2)).astype(complex)
    p = allocate_power(w, s1, s2)
    pg, h = oracles.power_grid_search(w, s1, s2, grid=801)
    err = float(np.max(np.abs(p - pg)))
    # the lattice argmax of a concave function lies within one spacing
    return OracleReport("power_grid", "diag 2x2", pg, p, err / h, 1.0)


def check_kkt(rng, n=6, d=2, w=1.0):
    """Stationarity of an exact GDE-plus-water-filling solution, and of a perturbed one."""
    s1 = random_psd(rng, n, rank=3)
    s2 = random_hpd(rng, n)
    res = gde(s1, s2, d)
    p = water_fill_gde(w, res, s1, s2)
    exact = oracles.kkt_residual("digital_ul", s1=s1, s2=s2, U=res.vectors, p=p, w=w)
    pert = res.vectors + 0.3 * _crandn(rng, n, d)
    pert /= np.linalg.norm(pert, axis=0)
    bad = oracles.kkt_residual("digital_ul", s1=s1, s2=s2, U=pert, p=p + 0.5, w=w)
    return (OracleReport("kkt_exact", f"n={n} d={d}", 0.0, exact, exact, TOLERANCES["kkt_exact"]),
            OracleReport("kkt_separation", f"n={n} d={d}", 1e-2, bad, 1e-2 / max(bad, 1e-300), 1.0))


def check_slackness(cfg, seed):
    """Complementary slackness of one UL user's multiplier search."""
    channels, state, noise, weights = _instance(cfg, seed)
    ctx = prepare_state(state, channels, noise, weights)
    s1 = sigma1_ul(ctx, 0, 0)
    g = gradients_ul_user(ctx, 0, 0).total()
    evaluate, mu_max = ul_evaluator(s1, g, weights.ul[0][0], cfg.ul_streams)
    res = bisect_multiplier(cfg.ul_power, evaluate, mu_max)
    r = oracles.slackness_residual(res.mu, res.budget, res.allocated) / res.budget
    return OracleReport("slackness", f"seed={seed} ul b=0 k=0", 0.0, r, r, TOLERANCES["slackness"])


def check_feedback_equivalence(cfg, seed):
    """Local variables rebuilt from encoded feedback against a central observer."""
    from .pdhybf import FeedbackMessage
    channels, state, noise, weights = _instance(cfg, seed)
    central = prepare_state(state, channels, noise, weights)
    reports = []
    for b in range(cfg.num_cells):
        msgs = [FeedbackMessage.decode(FeedbackMessage.from_slice(c, 0, state.cell_slice(c)).encode())
                for c in range(cfg.num_cells) if c != b]
        loc = refresh_local_state(b, msgs, state.cell_slice(b), channels, noise, weights,
                                  cfg.num_cells)
        ref = local_from_context(central, b)
        err = 0.0
        for name in ("l_in_ul", "l_out_ul", "l_in_dl", "l_out_dl", "sigma1_ul", "sigma1_dl"):
            for x, y in zip(getattr(loc, name), getattr(ref, name)):
                err = max(err, _rel(x, y))
        reports.append(OracleReport("local_state", f"seed={seed} cell={b}", None, None, err,
                                    TOLERANCES["local_state"]))
    return reports


def run_suite(quick=False, seed=0):
    """
    Yield every oracle comparison. ``quick`` shrinks the instance counts
    and the Monte-Carlo sample size.
    """
    rng = make_rng(seed)
    for _ in range(3 if quick else 10):
        yield check_cholesky(rng)
    for i in range(20 if quick else 200):
        n = int(rng.integers(2, 17))
        yield from check_gde(rng, n, int(rng.integers(1, n + 1)))
    for _ in range(3):
        yield check_positive_part(rng)
        yield check_rediagonalize(rng)
        yield check_kron(rng)
        yield check_power_grid(rng)
        yield from check_kkt(rng)
    gcfg = gradient_config()
    for s in range(1 if quick else 3):
        yield from check_gradients(gcfg, seed + s)
    scfg = small_config()
    yield from check_covariance_exact(scfg, seed)
    yield from check_covariance_mc(scfg, seed, samples=50_000 if quick else 200_000)
    yield check_slackness(profile("desk"), seed)
    yield from check_feedback_equivalence(profile("desk"), seed)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fdhybf import oracles
from fdhybf.errors import MissingFeedback
from fdhybf.gradients import (assemble_view, gradients_dl_user, gradients_ul_user,
                              local_from_context, prepare, prepare_state, refresh_local_state,
                              sigma1_dl, sigma1_ul, sigma_pair_dl, sigma_pair_ul)
from fdhybf.model import NoiseProfile, Weights, tx_covariances, wsr_from_tx
from fdhybf.pdhybf import FeedbackMessage
from fdhybf.verification import check_feedback_equivalence, check_gradients, small_config

from conftest import Instance, crandn, rel


def _ctx(inst, noise=None, weights=None):
    return prepare_state(inst.state, inst.channels, noise or inst.noise, weights or inst.weights)


def test_empty_in_cell_sums():
    inst = Instance(small_config(num_cells=1))
    ctx = _ctx(inst)
    assert np.count_nonzero(gradients_ul_user(ctx, 0, 0).in_ul) == 0
    assert np.count_nonzero(gradients_dl_user(ctx, 0, 0).in_dl) == 0
    g = gradients_ul_user(ctx, 0, 0)
    assert np.count_nonzero(g.out_ul) == 0 and np.count_nonzero(g.out_dl) == 0


def test_zero_weights_of_other_links():
    inst = Instance(small_config(dl_users=2, ul_users=2))
    w = Weights(ul=[[1.0, 0.0], [0.0, 0.0]], dl=[[0.0, 0.0], [0.0, 0.0]])
    g = gradients_ul_user(_ctx(inst, weights=w), 0, 0)
    for m in g:
        assert np.count_nonzero(m) == 0


def test_si_nulling():
    inst = Instance(small_config())
    for b in inst.channels.si:
        inst.channels.si[b] = np.zeros_like(inst.channels.si[b])
    g = gradients_dl_user(_ctx(inst), 0, 0)
    assert np.count_nonzero(g.in_ul) == 0


def test_eight_gradients_finite_difference():
    reports = check_gradients(small_config(dl_users=2, ul_users=2), seed=1)
    assert len(reports) == 8
    for rep in reports:
        assert rep.passed, rep


def test_frozen_out_cell_gradient(small):
    # central-difference oracle value of the out-of-cell DL gradient of Q[0][0]
    g = gradients_dl_user(_ctx(small), 0, 0)
    total = g.out_ul + g.out_dl
    assert abs(np.linalg.norm(total) - 0.6695780782886741) <= 1e-4 * 0.6695780782886741
    assert abs(np.trace(total).real - 0.7066323173185407) <= 1e-4 * 0.7066323173185407


def test_gradients_hermitian_psd(small):
    ctx = _ctx(small)
    for b in range(2):
        for g in list(gradients_ul_user(ctx, b, 0)) + list(gradients_dl_user(ctx, b, 0)):
            assert rel(g, g.conj().T) < 1e-12
            assert np.linalg.eigvalsh(g).min() >= -1e-10 * max(np.trace(g).real, 1e-300)


def test_sigma_pair_trivial():
    z = np.zeros((3, 3))
    pen = sigma_pair_ul(np.eye(3), z, 1.0)
    assert np.allclose(pen.b, np.eye(3))
    pen = sigma_pair_dl(np.eye(3), z, 1.0)
    assert np.allclose(pen.b, np.eye(3))


@given(st.integers(0, 50), st.floats(1e-6, 10.0))
def test_sigma_pair_psd(seed, lam):
    inst = Instance(small_config(), seed)
    ctx = _ctx(inst)
    pen = sigma_pair_ul(sigma1_ul(ctx, 0, 0), gradients_ul_user(ctx, 0, 0), lam)
    assert np.linalg.eigvalsh(pen.b).min() > 0
    assert np.linalg.eigvalsh(pen.a).min() >= -1e-12 * np.linalg.norm(pen.a)
    W = inst.state.W[0]
    pen = sigma_pair_dl(sigma1_dl(ctx, 0, 0), gradients_dl_user(ctx, 0, 0), lam, W)
    assert pen.a.shape == (W.shape[1],) * 2
    assert np.linalg.eigvalsh(pen.b).min() > 0


def test_minorizer_tangency():
    # value and directional derivative of the surrogate of T[0][0] match the sum rate
    inst = Instance(small_config())
    noise = NoiseProfile(sigma2_bs=inst.noise.sigma2_bs, sigma2_dl=inst.noise.sigma2_dl)
    ctx = _ctx(inst, noise=noise)
    T, Q = tx_covariances(inst.state)
    F = inst.state.F
    s1 = sigma1_ul(ctx, 0, 0)
    g = gradients_ul_user(ctx, 0, 0).total()
    t0 = T[0][0]
    w = inst.weights.ul[0][0]
    base = wsr_from_tx(T, Q, F, inst.channels, noise, inst.weights)

    def surrogate(t):
        own = w * np.linalg.slogdet(np.eye(t.shape[0]) + s1 @ t)[1]
        return own - np.trace(g @ t).real

    const = base - surrogate(t0)
    assert abs(surrogate(t0) + const - base) <= 1e-9 * abs(base)
    d = crandn(np.random.default_rng(3), *t0.shape)
    d = 0.5 * (d + d.conj().T)
    h = 1e-6

    def true(t):
        T2 = [list(r) for r in T]
        T2[0][0] = t
        return wsr_from_tx(T2, Q, F, inst.channels, noise, inst.weights)

    dtrue = (true(t0 + h * d) - true(t0 - h * d)) / (2 * h)
    dsur = (surrogate(t0 + h * d) - surrogate(t0 - h * d)) / (2 * h)
    assert abs(dtrue - dsur) <= 1e-5 * abs(dtrue)


# local variables -------------------------------------------------------------------
def test_single_cell_locals():
    inst = Instance(small_config(num_cells=1))
    ctx = _ctx(inst)
    loc = refresh_local_state(0, [], inst.state.cell_slice(0), inst.channels, inst.noise,
                              inst.weights, 1)
    assert all(np.count_nonzero(m) == 0 for m in loc.l_out_ul + loc.l_out_dl)
    g = gradients_ul_user(ctx, 0, 0)
    assert np.allclose(loc.l_in_ul[0], g.in_ul + g.in_dl, rtol=0, atol=1e-14)
    g = gradients_dl_user(ctx, 0, 0)
    assert np.allclose(loc.l_in_dl[0], g.in_ul + g.in_dl, rtol=0, atol=1e-14)


def test_silent_neighbors_give_zero_out_terms(small):
    sl = small.state.cell_slice(1)
    sl["pu"] = [np.zeros_like(p) for p in sl["pu"]]
    sl["pd"] = [np.zeros_like(p) for p in sl["pd"]]
    msg = FeedbackMessage.from_slice(1, 0, sl)
    loc = refresh_local_state(0, [msg], small.state.cell_slice(0), small.channels, small.noise,
                              small.weights, 2)
    for m in loc.l_out_ul + loc.l_out_dl:
        assert np.linalg.norm(m) < 1e-14


def test_feedback_equivalence(small):
    for rep in check_feedback_equivalence(small.cfg, 0):
        assert rep.passed, rep


def test_z_pencils_equal_central_pencils(small):
    ctx = _ctx(small)
    for b in range(2):
        msgs = [FeedbackMessage.from_slice(c, 0, small.state.cell_slice(c)) for c in range(2) if c != b]
        loc = refresh_local_state(b, msgs, small.state.cell_slice(b), small.channels, small.noise,
                                  small.weights, 2)
        lam = 0.3
        central = sigma_pair_ul(sigma1_ul(ctx, b, 0), gradients_ul_user(ctx, b, 0), lam)
        assert np.array_equal(loc.sigma1_ul[0], central.a)
        assert rel(loc.z2_ul(0, lam), central.b) < 1e-13
        central = sigma_pair_dl(sigma1_dl(ctx, b, 0), gradients_dl_user(ctx, b, 0), lam)
        assert rel(loc.z2_dl(0, lam), central.b) < 1e-13


def test_missing_feedback(small):
    with pytest.raises(MissingFeedback):
        assemble_view(0, small.state.cell_slice(0), [], 2, round_index=4)


def test_local_from_context_shapes(small):
    ctx = _ctx(small)
    loc = local_from_context(ctx, 1, round_index=3)
    cfg = small.cfg
    assert loc.round == 3 and loc.cell == 1
    assert loc.l_in_dl[0].shape == (cfg.bs_tx_antennas,) * 2
    assert loc.l_in_ul[0].shape == (cfg.ul_user_antennas,) * 2
    assert loc.ra.shape == (cfg.bs_rx_antennas,) * 2


def test_prepare_matches_state_wrapper(small):
    T, Q = tx_covariances(small.state)
    a = prepare(T, Q, small.state.F, small.channels, small.noise, small.weights)
    b = _ctx(small)
    assert all(np.array_equal(x, y) for x, y in zip(a.x_dl[0], b.x_dl[0]))
    # the oracle recomputes every rate independently of the gradient module
    assert np.isclose(oracles.reference_wsr(small.state, small.channels, small.noise, small.weights),
                      wsr_from_tx(T, Q, small.state.F, small.channels, small.noise, small.weights))

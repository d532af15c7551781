import numpy as np
import pytest
from hypothesis import given, strategies as st

from fdhybf.chybf import run_c_hybf
from fdhybf.errors import DimensionMismatch, MissingFeedback
from fdhybf.model import check_constraints
from fdhybf.pdhybf import FeedbackMessage, InProcessBus, pd_flops, run_pd_hybf
from fdhybf.scenario import ChannelSet, draw_network_channels, make_rng
from fdhybf.verification import small_config

from conftest import Instance, crandn


def _message(seed=0, sender=1, rnd=3, n_ul=1, n_dl=2):
    rng = make_rng(seed)
    sl = dict(W=crandn(rng, 4, 2), F=crandn(rng, 4, 2),
              U=[crandn(rng, 2, 2) for _ in range(n_ul)], pu=[rng.uniform(0, 1, 2) for _ in range(n_ul)],
              V=[crandn(rng, 2, 2) for _ in range(n_dl)], pd=[rng.uniform(0, 1, 2) for _ in range(n_dl)])
    return FeedbackMessage.from_slice(sender, rnd, sl)


def _same(a, b):
    if (a.sender, a.round) != (b.sender, b.round):
        return False
    pairs = [(a.W, b.W), (a.F, b.F)] + list(zip(a.U + a.pu + a.V + a.pd, b.U + b.pu + b.V + b.pd))
    return len(a.U + a.V) == len(b.U + b.V) and all(np.array_equal(x, y) for x, y in pairs)


# wire codec -----------------------------------------------------------------------
@given(st.integers(0, 10_000), st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**40))
def test_codec_roundtrip(seed, n_ul, n_dl, rnd):
    msg = _message(seed, sender=seed % 5, rnd=rnd, n_ul=n_ul, n_dl=n_dl)
    buf = msg.encode()
    back = FeedbackMessage.decode(buf)
    assert _same(msg, back)
    assert back.encode() == buf


def test_codec_header_layout():
    buf = _message().encode()
    assert buf[:4] == b"HYBF"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert int.from_bytes(buf[6:14], "little", signed=True) == 1
    assert int.from_bytes(buf[14:22], "little", signed=True) == 3


def test_codec_rejects_bad_magic_and_version():
    buf = bytearray(_message().encode())
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(DimensionMismatch):
        FeedbackMessage.decode(bad)
    buf[4] = 9
    with pytest.raises(DimensionMismatch):
        FeedbackMessage.decode(bytes(buf))


def test_codec_rejects_trailing_bytes():
    with pytest.raises(DimensionMismatch):
        FeedbackMessage.decode(_message().encode() + b"\0")


def test_check_shapes():
    cfg = small_config(dl_users=2)
    msg = _message()
    msg.check_shapes(cfg)
    rng = make_rng(0)
    bad = FeedbackMessage(0, 0, crandn(rng, 3, 2), msg.F, msg.U, msg.pu, msg.V, msg.pd)
    with pytest.raises(DimensionMismatch):
        bad.check_shapes(cfg)


# bus ------------------------------------------------------------------------------------
def test_bus_full_exchange():
    bus = InProcessBus(3)
    for s in range(3):
        bus.post(_message(sender=s, rnd=0))
    inboxes, count, nbytes = bus.barrier()
    assert count == 6
    assert nbytes == 6 * len(_message().encode())
    assert [m.sender for m in inboxes[1]] == [0, 2]


def test_bus_round_must_increase():
    bus = InProcessBus(2)
    bus.post(_message(sender=0, rnd=2))
    with pytest.raises(ValueError):
        bus.post(_message(sender=0, rnd=2))


def test_bus_drop():
    bus = InProcessBus(2, drop={(0, 1)})
    for s in range(2):
        bus.post(_message(sender=s, rnd=0))
    inboxes, count, _ = bus.barrier()
    assert count == 1 and inboxes[1] == [] and len(inboxes[0]) == 1


# solver ---------------------------------------------------------------------------------
def test_missing_feedback_is_reported(small):
    with pytest.raises(MissingFeedback, match="round 0"):
        run_pd_hybf(small.cfg, small.channels, bus=InProcessBus(2, drop={(1, 0)}))


def test_worker_count_validation(small):
    with pytest.raises(ValueError):
        run_pd_hybf(small.cfg, small.channels, workers=0)


def test_messages_per_round():
    cfg = small_config(num_cells=3).replace(max_iters=3)
    inst = Instance(cfg)
    _, tr = run_pd_hybf(cfg, inst.channels)
    assert tr.messages == [6] * tr.iterations
    assert len(set(tr.payload_bytes)) == 1 and tr.payload_bytes[0] > 0


def test_workers_bitwise_equal(small):
    runs = [run_pd_hybf(small.cfg, small.channels, workers=w) for w in (1, 2, 4)]
    for st_, tr in runs[1:]:
        assert tr.wsr == runs[0][1].wsr
        for b in range(2):
            assert np.array_equal(st_.W[b], runs[0][0].W[b])
            assert np.array_equal(st_.F[b], runs[0][0].F[b])


def test_feasible_and_slack(small):
    st_, tr = run_pd_hybf(small.cfg, small.channels)
    assert check_constraints(st_, small.cfg).max_power_residual(small.cfg) <= 1e-9
    for res in tr.bisections:
        assert res.slackness <= 1e-6 * res.budget
    assert tr.final_wsr > tr.initial_wsr


def test_single_cell_close_to_centralized():
    cfg = small_config(num_cells=1, dl_users=2, ul_users=2)
    for seed in range(3):
        ch = draw_network_channels(make_rng(seed), cfg)
        _, c = run_c_hybf(cfg, ch)
        _, p = run_pd_hybf(cfg, ch)
        assert abs(p.final_wsr - c.final_wsr) <= 0.05 * c.final_wsr


def _isolate(ch, b):
    """Single-cell channel set of cell b."""
    return ChannelSet(direct_dl={(0, j): m for (c, j), m in ch.direct_dl.items() if c == b},
                      direct_ul={(0, k): m for (c, k), m in ch.direct_ul.items() if c == b},
                      ci={(0, j, 0, k): m for (c, j, e, k), m in ch.ci.items() if c == e == b},
                      si={0: ch.si[b]})


def test_decoupled_cells_match_isolated_runs():
    cfg = small_config().replace(max_iters=4, tol=1e-300)
    ch = draw_network_channels(make_rng(2), cfg)
    for role in ("bs_to_dl", "ul_to_bs", "bs_to_bs"):
        for key, m in getattr(ch, role).items():
            getattr(ch, role)[key] = np.zeros_like(m)
    for key, m in ch.ci.items():
        if key[0] != key[2]:
            ch.ci[key] = np.zeros_like(m)
    joint, _ = run_pd_hybf(cfg, ch)
    cfg1 = cfg.replace(num_cells=1)
    for b in range(2):
        alone, _ = run_pd_hybf(cfg1, _isolate(ch, b))
        assert np.allclose(alone.W[0], joint.W[b], atol=1e-8)
        assert np.allclose(alone.F[0], joint.F[b], atol=1e-8)
        assert np.allclose(alone.pd[0][0], joint.pd[b][0], atol=1e-8)
        assert np.allclose(alone.pu[0][0], joint.pu[b][0], atol=1e-8)


def test_pd_flops_decrease_with_workers():
    cfg = small_config(dl_users=4, ul_users=4)
    assert pd_flops(cfg, 4) < pd_flops(cfg, 1)

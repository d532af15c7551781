import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fdhybf.errors import ConfigError, GeometryError
from fdhybf.scenario import (NetworkConfig, config_from_mapping, draw_cluster_channel,
                             draw_network_channels, draw_si_channel, load_config, make_rng,
                             profile, si_distances, si_los_channel, steering_vector)


# steering vectors --------------------------------------------------------
def test_steering_broadside():
    assert np.allclose(steering_vector(4, 0.0), np.ones(4))


def test_steering_endfire():
    assert np.allclose(steering_vector(2, np.pi / 2), [1.0, -1.0])


def test_steering_unit_modulus():
    assert np.allclose(np.abs(steering_vector(8, 0.3)), 1.0)


# clustered channel --------------------------------------------------------
def test_cluster_single_broadside_path():
    h = draw_cluster_channel(make_rng(0), 3, 5, 1, angles=[(0.0, 0.0)], gains=[1.0])
    assert np.allclose(h, np.ones((3, 5)))
    assert np.linalg.matrix_rank(h) == 1


def test_cluster_rank_bound():
    h = draw_cluster_channel(make_rng(1), 8, 8, 3)
    assert np.linalg.matrix_rank(h) <= 3


def test_cluster_normalization_monte_carlo():
    rng = make_rng(2)
    e = np.mean([np.linalg.norm(draw_cluster_channel(rng, 4, 4, 3)) ** 2 for _ in range(10_000)])
    assert abs(e - 16.0) <= 0.05 * 16.0


# self-interference -----------------------------------------------------------
def test_si_los_normalization_and_magnitudes():
    cfg = profile("desk")
    r = si_distances(16, 32, cfg.array_separation, cfg.array_angle, cfg.wavelength)
    h = si_los_channel(16, 32, cfg.array_separation, cfg.array_angle, cfg.wavelength)
    assert np.isclose(np.linalg.norm(h) ** 2, 16 * 32, rtol=1e-12)
    rho = np.sqrt(16 * 32 / np.sum(1.0 / r ** 2))
    assert np.allclose(np.abs(h), rho / r, rtol=1e-12)


def test_si_kappa_limits():
    cfg = profile("desk", rician_kappa=math.inf)
    h1 = draw_si_channel(make_rng(0), cfg)
    h2 = draw_si_channel(make_rng(5), cfg)
    assert np.array_equal(h1, h2)
    cfg0 = profile("desk", rician_kappa=0.0)
    rng_a, rng_b = make_rng(3), make_rng(3)
    h = draw_si_channel(rng_a, cfg0)
    ref = draw_cluster_channel(rng_b, cfg0.bs_rx_antennas, cfg0.bs_tx_antennas, cfg0.paths,
                               cfg0.aoa_range)
    assert np.allclose(h, ref)


def test_si_kappa_one_monte_carlo():
    cfg = profile("desk", bs_tx_antennas=8, bs_rx_antennas=8, rf_chains=4)
    rng = make_rng(4)
    e = np.mean([np.linalg.norm(draw_si_channel(rng, cfg)) ** 2 for _ in range(100)])
    assert abs(e - 64.0) <= 0.10 * 64.0


def test_si_geometry_error():
    with pytest.raises(GeometryError):
        si_los_channel(2, 2, 0.0, 0.0, 0.01)


# network census --------------------------------------------------------------
def test_single_cell_census():
    ch = draw_network_channels(make_rng(0), profile("desk", num_cells=1))
    assert ch.count() == 4
    assert set(ch.direct_dl) == {(0, 0)} and set(ch.si) == {0}


def test_two_cell_census():
    cfg = profile("desk")
    ch = draw_network_channels(make_rng(0), cfg)
    # four single-cell roles per cell plus four directed cross-cell roles per cell
    per_role = {role: len(getattr(ch, role)) for role in ch.ROLES}
    assert per_role == dict(direct_dl=2, direct_ul=2, ci=4, bs_to_dl=2, ul_to_bs=2,
                            bs_to_bs=2, si=2)
    assert ch.count() == 16
    assert ch.h_dl(0, 0).shape == (cfg.dl_user_antennas, cfg.bs_tx_antennas)
    assert ch.h_ul(1, 0).shape == (cfg.bs_rx_antennas, cfg.ul_user_antennas)
    assert ch.h_ci(0, 0, 1, 0).shape == (cfg.dl_user_antennas, cfg.ul_user_antennas)
    assert ch.h_bs_dl(0, 0, 1).shape == (cfg.dl_user_antennas, cfg.bs_tx_antennas)
    assert ch.h_ul_bs(0, 1, 0).shape == (cfg.bs_rx_antennas, cfg.ul_user_antennas)
    assert ch.h_bs_bs(0, 1).shape == (cfg.bs_rx_antennas, cfg.bs_tx_antennas)
    assert ch.h_bs_bs(1, 1) is ch.h_si(1)


def test_same_seed_bitwise():
    cfg = profile("desk")
    a = draw_network_channels(make_rng(9), cfg)
    b = draw_network_channels(make_rng(9), cfg)
    assert a.digest() == b.digest()
    for (ra, ka, ma), (rb, kb, mb) in zip(a.matrices(), b.matrices()):
        assert (ra, ka) == (rb, kb) and np.array_equal(ma, mb)
    assert draw_network_channels(make_rng(10), cfg).digest() != a.digest()


def test_restricted_and_tracking():
    ch = draw_network_channels(make_rng(0), profile("desk"))
    r = ch.restricted(("direct_dl",))
    assert r.count() == 2 and not r.si
    r.track = True
    r.h_dl(0, 0)
    assert r.accessed == {"direct_dl"}


@given(st.integers(1, 3), st.integers(0, 2), st.integers(0, 2))
def test_census_formula(B, D, U):
    cfg = profile("desk", num_cells=B, dl_users=D, ul_users=U, bs_tx_antennas=4,
                  bs_rx_antennas=4, rf_chains=2, ul_user_antennas=2, dl_user_antennas=2)
    ch = draw_network_channels(make_rng(0), cfg)
    expected = B * (D + U + D * U * B + D * (B - 1) + U * (B - 1) + (B - 1) + 1)
    assert ch.count() == expected


# configuration ---------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ConfigError) as exc:
        NetworkConfig(bs_tx_rf=64)
    assert exc.value.key == "bs_tx_rf"
    with pytest.raises(ConfigError):
        NetworkConfig(dl_streams=5)
    with pytest.raises(ConfigError):
        NetworkConfig(phase_bits=0)
    with pytest.raises(ConfigError):
        NetworkConfig(bs_power=0.0)


def test_replace_shorthands():
    cfg = profile("desk", ldr_db=-40, rf_chains=4)
    assert cfg.ldr_tx_db == cfg.ldr_rx_db == -40
    assert cfg.bs_tx_rf == cfg.bs_rx_rf == 4
    with pytest.raises(ConfigError):
        cfg.replace(nonsense=1)


def test_derived_levels():
    cfg = profile("desk", snr_db=10, ldr_db=-40)
    assert np.isclose(cfg.noise_variance, 0.1)
    assert np.isclose(cfg.ldr_tx, 1e-4) and np.isclose(cfg.ldr_rx, 1e-4)


def test_profiles():
    paper = profile("paper")
    assert (paper.bs_tx_antennas, paper.bs_rx_antennas) == (100, 60)
    with pytest.raises(ConfigError):
        profile("huge")


def test_hash_stable_and_sensitive():
    a, b = profile("desk"), profile("desk")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != a.replace(snr_db=21).config_hash()


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('profile = "desk"\nsnr_db = 10\nrf_chains = 4\naoa_range = [-20, 20]\n')
    cfg = load_config(p)
    assert cfg.snr_db == 10.0 and cfg.bs_tx_rf == 4 and cfg.aoa_range == (-20.0, 20.0)
    bad = tmp_path / "bad.toml"
    bad.write_text("unknown_key = 3\n")
    with pytest.raises(ConfigError) as exc:
        load_config(bad)
    assert exc.value.key == "unknown_key"


def test_config_from_mapping_bad_value():
    with pytest.raises(ConfigError) as exc:
        config_from_mapping({"snr_db": "loud"})
    assert exc.value.key == "snr_db"

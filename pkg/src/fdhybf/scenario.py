"""
Scenario configuration and seeded channel generation.

All cells share the same user counts and array sizes. Channels are drawn
from one ``numpy.random.Generator`` per realization in a fixed order, so a
(config, seed) pair fully determines the :class:`ChannelSet`.
"""
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields
from typing import Dict, Tuple

import numpy as np

from .errors import ConfigError, GeometryError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

__all__ = [
    "NetworkConfig", "ChannelSet", "load_config", "profile", "make_rng",
    "steering_vector", "draw_cluster_channel", "draw_si_channel",
    "draw_network_channels",
]

SPEED_OF_LIGHT = 299_792_458.0


@dataclass
class NetworkConfig:
    """
    Full scenario description.

    Antenna and RF-chain counts are per base station (BS) and identical for
    every cell; user counts are per cell. Powers are linear, LDR levels and
    SNR are in dB. ``snr_db`` fixes the thermal noise as ``bs_power / SNR``
    for both BS and DL-user receivers.
    """

    num_cells: int = 2
    dl_users: int = 1
    ul_users: int = 1
    bs_tx_antennas: int = 32
    bs_rx_antennas: int = 16
    bs_tx_rf: int = 8
    bs_rx_rf: int = 8
    ul_user_antennas: int = 4
    dl_user_antennas: int = 4
    dl_streams: int = 2
    ul_streams: int = 2
    phase_bits: int = 10
    paths: int = 3
    aoa_range: Tuple[float, float] = (-30.0, 30.0)
    rician_kappa: float = 1.0
    array_separation: float = 0.20
    array_angle: float = 90.0
    wavelength: float = SPEED_OF_LIGHT / 28e9
    snr_db: float = 20.0
    ldr_tx_db: float = -80.0
    ldr_rx_db: float = -80.0
    bs_power: float = 1.0
    ul_power: float = 1.0
    dl_weight: float = 1.0
    ul_weight: float = 1.0
    seed: int = 0
    realizations: int = 20
    max_iters: int = 200
    tol: float = 1e-4
    # solver switches
    fully_digital: bool = False
    update_combiner: bool = True
    analog_safeguard: bool = True
    recompute_directions: bool = True
    phi_includes_noise: bool = True
    hd_time_share: float = 0.5
    stale_feedback: bool = False
    pencil_cap: int = 8192

    def __post_init__(self):
        self.aoa_range = tuple(float(x) for x in self.aoa_range)
        self.validate()

    def validate(self):
        positive_int = [
            "num_cells", "bs_tx_antennas", "bs_rx_antennas", "bs_tx_rf",
            "bs_rx_rf", "ul_user_antennas", "dl_user_antennas", "dl_streams",
            "ul_streams", "phase_bits", "paths", "realizations", "max_iters",
            "pencil_cap",
        ]
        for name in positive_int:
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", name)
        for name in ("dl_users", "ul_users"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer", name)
        if self.bs_tx_rf > self.bs_tx_antennas:
            raise ConfigError("bs_tx_rf exceeds bs_tx_antennas", "bs_tx_rf")
        if self.bs_rx_rf > self.bs_rx_antennas:
            raise ConfigError("bs_rx_rf exceeds bs_rx_antennas", "bs_rx_rf")
        if self.dl_streams > min(self.bs_tx_rf, self.dl_user_antennas):
            raise ConfigError("dl_streams exceeds min(bs_tx_rf, dl_user_antennas)", "dl_streams")
        if self.ul_streams > min(self.bs_rx_rf, self.ul_user_antennas):
            raise ConfigError("ul_streams exceeds min(bs_rx_rf, ul_user_antennas)", "ul_streams")
        for name in ("bs_power", "ul_power", "wavelength", "array_separation", "tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", name)
        if self.rician_kappa < 0:
            raise ConfigError("rician_kappa must be non-negative", "rician_kappa")
        if self.dl_weight < 0 or self.ul_weight < 0:
            raise ConfigError("rate weights must be non-negative", "dl_weight")
        if len(self.aoa_range) != 2 or self.aoa_range[0] > self.aoa_range[1]:
            raise ConfigError("aoa_range must be an increasing pair", "aoa_range")
        if not 0 < self.hd_time_share <= 1:
            raise ConfigError("hd_time_share must lie in (0, 1]", "hd_time_share")

    # derived quantities -------------------------------------------------
    @property
    def noise_variance(self):
        return self.bs_power / 10.0 ** (self.snr_db / 10.0)

    @property
    def ldr_tx(self):
        return 10.0 ** (self.ldr_tx_db / 10.0)

    @property
    def ldr_rx(self):
        return 10.0 ** (self.ldr_rx_db / 10.0)

    @property
    def tx_rf(self):
        return self.bs_tx_antennas if self.fully_digital else self.bs_tx_rf

    @property
    def rx_rf(self):
        return self.bs_rx_antennas if self.fully_digital else self.bs_rx_rf

    def replace(self, **changes):
        """Copy with fields changed; ``ldr_db`` and ``rf_chains`` set both directions."""
        changes = dict(changes)
        if "ldr_db" in changes:
            v = changes.pop("ldr_db")
            changes.setdefault("ldr_tx_db", v)
            changes.setdefault("ldr_rx_db", v)
        if "rf_chains" in changes:
            v = changes.pop("rf_chains")
            changes.setdefault("bs_tx_rf", v)
            changes.setdefault("bs_rx_rf", v)
        known = {f.name for f in fields(self)}
        for key in changes:
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}", key)
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["aoa_range"] = list(self.aoa_range)
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_PROFILES = {
    "desk": {},
    "paper": dict(
        bs_tx_antennas=100, bs_rx_antennas=60, bs_tx_rf=32, bs_rx_rf=32,
        ul_user_antennas=5, dl_user_antennas=5, realizations=100,
    ),
}


def profile(name="desk", **overrides):
    """Named base configuration (``desk`` or ``paper``) with overrides."""
    if name not in _PROFILES:
        raise ConfigError(f"unknown profile {name!r}", "profile")
    base = NetworkConfig(**_PROFILES[name])
    return base.replace(**overrides) if overrides else base


def _coerce(name, value):
    ftype = {f.name: f.type for f in fields(NetworkConfig)}[name]
    if name == "aoa_range":
        return tuple(float(v) for v in value)
    if ftype in (int, "int"):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        return value
    if ftype in (float, "float"):
        if isinstance(value, str) and value.lower() in ("inf", "infinity"):
            return math.inf
        return float(value)
    return value


def config_from_mapping(mapping, base=None):
    """Build a config from a flat mapping; unknown keys raise ConfigError."""
    base = base or NetworkConfig()
    known = {f.name for f in fields(NetworkConfig)} | {"ldr_db", "rf_chains"}
    changes = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        if key in ("ldr_db",):
            changes[key] = float(value)
        elif key == "rf_chains":
            changes[key] = int(value)
        else:
            try:
                changes[key] = _coerce(key, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}", key) from exc
    try:
        return base.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base=None):
    """
    Read a TOML file of ``key = value`` pairs into a :class:`NetworkConfig`.

    An optional ``profile = "desk" | "paper"`` key selects the base values.
    """
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if "profile" in data:
        base = profile(data.pop("profile"))
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"nested tables are not supported (key {key!r})", key)
    return config_from_mapping(data, base)


def make_rng(seed):
    """64-bit PCG generator for one realization."""
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# channel models
# ---------------------------------------------------------------------------
def steering_vector(num_antennas, angle):
    """Half-wavelength ULA response; entry m is ``exp(i pi m sin(angle))``."""
    m = np.arange(num_antennas)
    return np.exp(1j * np.pi * m * np.sin(angle))


def draw_cluster_channel(rng, n_r, n_t, n_paths, aoa_range=(-30.0, 30.0),
                         angles=None, gains=None):
    """
    Clustered mmWave channel, shape (n_r, n_t).

    ``H = sqrt(1/n_paths) * sum_n alpha_n a_r(phi_n) a_t(theta_n)^T`` with
    ``alpha_n ~ CN(0, 1)`` and both angles uniform on ``aoa_range`` (degrees).
    ``angles`` (pairs of radians) and ``gains`` override the random draws.
    """
    lo, hi = np.deg2rad(aoa_range[0]), np.deg2rad(aoa_range[1])
    if gains is None:
        gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(2.0)
    if angles is None:
        phi = rng.uniform(lo, hi, n_paths)
        theta = rng.uniform(lo, hi, n_paths)
    else:
        phi, theta = (np.asarray(a, dtype=float) for a in zip(*angles))
    h = np.zeros((n_r, n_t), dtype=complex)
    for g, p, t in zip(gains, phi, theta):
        h += g * np.outer(steering_vector(n_r, p), steering_vector(n_t, t))
    return h / np.sqrt(n_paths)


def si_distances(n_rx, n_tx, separation, angle_deg, wavelength):
    """
    Element distances ``r[m, n]`` between receive element m and transmit
    element n. The transmit ULA lies on the x-axis from the origin; the
    receive ULA starts at ``(0, separation)`` and points at ``angle_deg``
    from the x-axis. Both arrays use half-wavelength spacing.
    """
    delta = wavelength / 2.0
    theta = np.deg2rad(angle_deg)
    tx = np.stack([np.arange(n_tx) * delta, np.zeros(n_tx)], axis=1)
    rx = np.stack([np.arange(n_rx) * delta * np.cos(theta),
                   separation + np.arange(n_rx) * delta * np.sin(theta)], axis=1)
    diff = rx[:, np.newaxis, :] - tx[np.newaxis, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def si_los_channel(n_rx, n_tx, separation, angle_deg, wavelength):
    """Near-field line-of-sight SI matrix, normalized to ``||H||_F^2 = n_rx n_tx``."""
    r = si_distances(n_rx, n_tx, separation, angle_deg, wavelength)
    if np.any(r <= 0):
        raise GeometryError("coincident transmit and receive elements")
    rho = np.sqrt(n_rx * n_tx / np.sum(1.0 / r ** 2))
    return (rho / r) * np.exp(-2j * np.pi * r / wavelength)


def draw_si_channel(rng, cfg):
    """Rician self-interference channel, shape (N_b, M_b)."""
    n_r, n_t = cfg.bs_rx_antennas, cfg.bs_tx_antennas
    kappa = cfg.rician_kappa
    h_los = si_los_channel(n_r, n_t, cfg.array_separation, cfg.array_angle, cfg.wavelength)
    h_ref = draw_cluster_channel(rng, n_r, n_t, cfg.paths, cfg.aoa_range)
    if math.isinf(kappa):
        return h_los
    return np.sqrt(kappa / (kappa + 1.0)) * h_los + np.sqrt(1.0 / (kappa + 1.0)) * h_ref


@dataclass
class ChannelSet:
    """
    Every channel matrix of one realization.

    Keys: ``direct_dl[(b, j)]`` (N_j x M), ``direct_ul[(b, k)]`` (N x M_k),
    ``ci[(b, j, c, k)]`` from UL user k of cell c to DL user j of cell b
    (in-cell when ``c == b``), ``bs_to_dl[(b, j, c)]`` from BS c (c != b),
    ``ul_to_bs[(b, c, k)]`` from UL user k of cell c into BS b (c != b),
    ``bs_to_bs[(b, c)]`` from BS c into BS b (c != b) and ``si[b]``.

    Accessor methods record the roles they are asked for in
    ``accessed`` when ``track`` is set.
    """

    direct_dl: Dict = field(default_factory=dict)
    direct_ul: Dict = field(default_factory=dict)
    ci: Dict = field(default_factory=dict)
    bs_to_dl: Dict = field(default_factory=dict)
    ul_to_bs: Dict = field(default_factory=dict)
    bs_to_bs: Dict = field(default_factory=dict)
    si: Dict = field(default_factory=dict)
    track: bool = False
    accessed: set = field(default_factory=set)

    ROLES = ("direct_dl", "direct_ul", "ci", "bs_to_dl", "ul_to_bs", "bs_to_bs", "si")

    def _get(self, role, key):
        if self.track:
            self.accessed.add(role)
        return getattr(self, role)[key]

    def h_dl(self, b, j):
        return self._get("direct_dl", (b, j))

    def h_ul(self, b, k):
        return self._get("direct_ul", (b, k))

    def h_ci(self, b, j, c, k):
        return self._get("ci", (b, j, c, k))

    def h_bs_dl(self, b, j, c):
        return self._get("bs_to_dl", (b, j, c))

    def h_ul_bs(self, b, c, k):
        return self._get("ul_to_bs", (b, c, k))

    def h_bs_bs(self, b, c):
        if b == c:
            return self._get("si", b)
        return self._get("bs_to_bs", (b, c))

    def h_si(self, b):
        return self._get("si", b)

    def count(self):
        return sum(len(getattr(self, role)) for role in self.ROLES)

    def matrices(self):
        """(role, key, matrix) triples in the canonical draw order."""
        for role in self.ROLES:
            for key, value in getattr(self, role).items():
                yield role, key, value

    def digest(self):
        """SHA-256 over every matrix, used to verify paired sampling."""
        h = hashlib.sha256()
        for role, key, value in sorted(self.matrices(), key=lambda t: (t[0], repr(t[1]))):
            h.update(f"{role}{key!r}".encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def restricted(self, roles):
        """Copy keeping only ``roles``; other channel roles become empty."""
        kept = {role: dict(getattr(self, role)) if role in roles else {} for role in self.ROLES}
        return ChannelSet(**kept)


def draw_network_channels(rng, cfg):
    """
    Draw every channel of the network.

    Order, per cell b (cell-major): direct DL, direct UL, in-cell CI,
    out-cell CI, BS-to-DL-user, UL-user-to-BS, BS-to-BS, then SI.
    """
    B, D, U = cfg.num_cells, cfg.dl_users, cfg.ul_users
    M, N = cfg.bs_tx_antennas, cfg.bs_rx_antennas
    Mk, Nj = cfg.ul_user_antennas, cfg.dl_user_antennas
    P, aoa = cfg.paths, cfg.aoa_range
    ch = ChannelSet()
    for b in range(B):
        others = [c for c in range(B) if c != b]
        for j in range(D):
            ch.direct_dl[(b, j)] = draw_cluster_channel(rng, Nj, M, P, aoa)
        for k in range(U):
            ch.direct_ul[(b, k)] = draw_cluster_channel(rng, N, Mk, P, aoa)
        for j in range(D):
            for k in range(U):
                ch.ci[(b, j, b, k)] = draw_cluster_channel(rng, Nj, Mk, P, aoa)
        for j in range(D):
            for c in others:
                for k in range(U):
                    ch.ci[(b, j, c, k)] = draw_cluster_channel(rng, Nj, Mk, P, aoa)
        for j in range(D):
            for c in others:
                ch.bs_to_dl[(b, j, c)] = draw_cluster_channel(rng, Nj, M, P, aoa)
        for c in others:
            for k in range(U):
                ch.ul_to_bs[(b, c, k)] = draw_cluster_channel(rng, N, Mk, P, aoa)
        for c in others:
            ch.bs_to_bs[(b, c)] = draw_cluster_channel(rng, N, M, P, aoa)
        ch.si[b] = draw_si_channel(rng, cfg)
    return ch

"""Scenario generation: clustered multipath channels, pilots, LO reference,
and magnitude-only measurements.

Every random draw comes from a named substream of a single 64-bit seed so a
scenario is reproducible bit for bit. Substreams are derived with
``numpy.random.SeedSequence(seed, spawn_key=(trial, stream))`` feeding PCG64.
"""
from dataclasses import asdict, dataclass
from functools import cached_property
import math

import numpy as np

from raqr.errors import ConfigError, DomainError, ShapeError
from raqr.linops import db_to_linear, numerical_rank, pseudo_inverse

STREAM_CHANNEL = 0
STREAM_PILOTS = 1
STREAM_LO = 2
STREAM_NOISE = 3

MAX_PILOT_COND = 1e3


def substream(seed, *keys):
    """Independent generator for ``(seed, *keys)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True)
class ScenarioConfig:
    num_antennas: int = 32
    num_users: int = 4
    num_pilots: int = 20
    num_clusters: int = 4
    rays_per_cluster: int = 10
    spacing_over_wavelength: float = 0.5
    snr_db: float = 10.0
    rsr_db: float = 10.0
    seed: int = 0
    pilot_kind: str = "random"

    def __post_init__(self):
        for name in ("num_antennas", "num_users", "num_pilots", "num_clusters", "rays_per_cluster"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.num_pilots < self.num_users:
            raise ConfigError(
                f"num_pilots ({self.num_pilots}) must be >= num_users ({self.num_users})"
            )
        if not self.spacing_over_wavelength > 0:
            raise ConfigError("spacing_over_wavelength must be positive")
        if not (math.isfinite(self.snr_db) and math.isfinite(self.rsr_db)):
            raise ConfigError("snr_db and rsr_db must be finite")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.pilot_kind not in ("random", "dft"):
            raise ConfigError(f"unknown pilot_kind {self.pilot_kind!r}")

    @property
    def num_rays(self):
        return self.num_clusters * self.rays_per_cluster

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return ScenarioConfig(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ChannelRealization:
    H: np.ndarray
    doas: np.ndarray  # (K, L, C) radians
    gains: np.ndarray  # (K, L, C) complex
    spacing_over_wavelength: float = 0.5

    def reconstruct(self):
        """Rebuild H from the stored ray angles and gains."""
        return channel_from_rays(
            self.doas, self.gains, self.H.shape[0], self.spacing_over_wavelength
        )


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Known pilots ``S`` (P x K), LO matrix ``B`` (M x P), noise variance,
    and magnitude observations ``Z`` (M x P)."""

    S: np.ndarray
    B: np.ndarray
    sigma2: float
    Z: np.ndarray

    def __post_init__(self):
        m, p = self.Z.shape
        if self.S.shape[0] != p or self.B.shape != (m, p):
            raise ShapeError(
                f"inconsistent measurement shapes S={self.S.shape} B={self.B.shape} Z={self.Z.shape}"
            )
        if self.sigma2 < 0:
            raise DomainError("sigma2 must be nonnegative")

    @property
    def b(self):
        return self.B[:, 0]

    @property
    def num_antennas(self):
        return self.Z.shape[0]

    @property
    def num_pilots(self):
        return self.Z.shape[1]

    @property
    def num_users(self):
        return self.S.shape[1]

    @cached_property
    def pilot_pinv(self):
        """``pinv(S^T)``, shape P x K."""
        return pseudo_inverse(self.S.T)


def steering_vector(theta, num_antennas, spacing_over_wavelength=0.5):
    """ULA response ``exp(j 2 pi (d/lambda) m sin theta)`` for m = 0..M-1, as M x 1."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise DomainError("steering_vector: theta must be finite")
    if num_antennas < 1:
        raise ConfigError("steering_vector: need at least one antenna")
    m = np.arange(num_antennas)
    phase = 2.0 * np.pi * spacing_over_wavelength * m * math.sin(theta)
    return np.exp(1j * phase)[:, None]


def channel_from_rays(doas, gains, num_antennas, spacing_over_wavelength=0.5):
    """Clustered channel matrix from per-user ray angles and gains (both K x L x C)."""
    doas = np.asarray(doas, dtype=np.float64)
    gains = np.asarray(gains, dtype=np.complex128)
    k_users = doas.shape[0]
    n_ray = doas[0].size
    m = np.arange(num_antennas)
    flat_theta = doas.reshape(k_users, n_ray)
    flat_g = gains.reshape(k_users, n_ray)
    # (K, M, N_ray) steering responses
    steer = np.exp(1j * 2.0 * np.pi * spacing_over_wavelength * m[None, :, None]
                   * np.sin(flat_theta)[:, None, :])
    h = np.sqrt(num_antennas / n_ray) * np.einsum("kmn,kn->mk", steer, flat_g)
    return h


def generate_channel(cfg, rng):
    k, l, c = cfg.num_users, cfg.num_clusters, cfg.rays_per_cluster
    doas = rng.uniform(-np.pi / 2, np.pi / 2, size=(k, l, c))
    # open interval: the endpoint -pi/2 has probability zero but is excluded anyway
    doas = np.where(doas <= -np.pi / 2, np.nextafter(-np.pi / 2, 0.0), doas)
    gains = (rng.standard_normal((k, l, c)) + 1j * rng.standard_normal((k, l, c))) / np.sqrt(2.0)
    h = channel_from_rays(doas, gains, cfg.num_antennas, cfg.spacing_over_wavelength)
    return ChannelRealization(H=h, doas=doas, gains=gains,
                              spacing_over_wavelength=cfg.spacing_over_wavelength)


def dft_pilots(num_pilots, num_users):
    p = np.arange(num_pilots)[:, None]
    k = np.arange(num_users)[None, :]
    return np.exp(-2j * np.pi * p * k / num_pilots)


def generate_pilots(cfg, rng, kind=None):
    """Unit-modulus P x K pilot matrix.

    ``random`` draws i.i.d. uniform phases, redrawing while cond(S^T) exceeds
    1e3; ``dft`` takes the first K columns of the P-point DFT.
    """
    p, k = cfg.num_pilots, cfg.num_users
    if p < k:
        raise ConfigError(f"generate_pilots: P={p} < K={k} leaves the linear stage under-determined")
    kind = kind or cfg.pilot_kind
    if kind == "dft":
        return dft_pilots(p, k)
    if kind != "random":
        raise ConfigError(f"unknown pilot kind {kind!r}")
    while True:
        s = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=(p, k)))
        if numerical_rank(s) == k and np.linalg.cond(s.T) <= MAX_PILOT_COND:
            return s


def signal_power(H, S):
    """Mean per-entry power of the noiseless signal field ``H S^T``."""
    return float(np.mean(np.abs(H @ S.T) ** 2))


def generate_lo(cfg, signal_power, rng):
    """LO vector with constant per-antenna power ``RSR * signal_power`` and
    i.i.d. uniform phases, shape M x 1."""
    if not signal_power > 0:
        raise DomainError("generate_lo: signal_power must be positive")
    amp = math.sqrt(db_to_linear(cfg.rsr_db) * signal_power)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.num_antennas)
    return (amp * np.exp(1j * phases))[:, None]


def snr_calibrate(cfg, H, S, snr_db=None):
    """Noise variance giving the configured SNR for this channel and pilot set."""
    power = signal_power(H, S)
    if power == 0.0:
        raise DomainError("snr_calibrate: zero channel, SNR undefined")
    snr_db = cfg.snr_db if snr_db is None else snr_db
    return power / db_to_linear(snr_db)


def measure(H, S, b, sigma2, rng):
    """Magnitude observations ``|H s_p + b + w_p|`` for every pilot slot."""
    H = np.asarray(H, dtype=np.complex128)
    S = np.asarray(S, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128).reshape(-1, 1)
    if H.shape[1] != S.shape[1] or b.shape[0] != H.shape[0]:
        raise ShapeError(f"measure: H {H.shape}, S {S.shape}, b {b.shape} incompatible")
    if sigma2 < 0:
        raise DomainError("measure: sigma2 must be nonnegative")
    m, p = H.shape[0], S.shape[0]
    B = np.repeat(b, p, axis=1)
    y = H @ S.T + B
    if sigma2 > 0:
        w = rng.standard_normal((m, p)) + 1j * rng.standard_normal((m, p))
        y = y + np.sqrt(sigma2 / 2.0) * w
    return MeasurementSet(S=S, B=B, sigma2=float(sigma2), Z=np.abs(y))


@dataclass(frozen=True, eq=False)
class Scenario:
    """One fully realized trial: channel, measurements, and the SNR used."""

    channel: ChannelRealization
    meas: MeasurementSet
    snr_db: float
    trial: int = 0
    seed: int = 0

    @property
    def H(self):
        return self.channel.H


def simulate(cfg, trial=0, pilots=None, snr_db=None):
    """Realize one trial of ``cfg``.

    ``pilots`` fixes S (e.g. the pilot matrix a model was trained on);
    otherwise S is drawn from the pilot substream of this trial.
    """
    seed = cfg.seed
    snr_db = cfg.snr_db if snr_db is None else float(snr_db)
    chan = generate_channel(cfg, substream(seed, trial, STREAM_CHANNEL))
    if pilots is None:
        S = generate_pilots(cfg, substream(seed, trial, STREAM_PILOTS))
    else:
        S = np.asarray(pilots, dtype=np.complex128)
        if S.shape != (cfg.num_pilots, cfg.num_users):
            raise ShapeError(f"pilots shape {S.shape} != ({cfg.num_pilots}, {cfg.num_users})")
    power = signal_power(chan.H, S)
    b = generate_lo(cfg, power, substream(seed, trial, STREAM_LO))
    sigma2 = power / db_to_linear(snr_db)
    meas = measure(chan.H, S, b, sigma2, substream(seed, trial, STREAM_NOISE))
    return Scenario(channel=chan, meas=meas, snr_db=snr_db, trial=trial, seed=seed)

"""Fading-channel generators for the V2V feature links.

Three channel treatments are produced as per-slot ChannelRealization values:
a flat Rician gain with free-space path loss (optionally with a slowly
drifting K factor), a time-varying multi-ray cluster CIR whose Doppler
structure follows the agents' speeds/accelerations, and a generic tapped
delay line for frequency-selective tests. A separate Gaussian disturbance
process modulates per-slot SNR offsets and CSI error levels.

All sampling is pure given a seed. Independent sub-streams (gains, K walk,
angles, ...) are split off the root seed with numpy SeedSequence spawn keys
so that toggling one randomization never shifts another.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError


def child_seed(root_seed: int, *key: int) -> np.random.SeedSequence:
    """Documented seed-splitting rule: (root, *indices) -> child stream."""
    return np.random.SeedSequence(entropy=root_seed, spawn_key=tuple(key))


@dataclass(frozen=True)
class RicianConfig:
    """Flat Rician fading with free-space path loss.

    p0 is the power loss at 1 m, d_k the link distance in meters, n the
    path-loss exponent and K the linear Rician factor. K_walk_std > 0 turns
    on a reflected random walk of K across slots (non-stationarity knob).
    snr_db records the nominal operating point for sweeps; the link layer
    owns the actual noise injection.
    """

    p0: float = 1.0
    d_k: float = 1.0
    n: float = 2.0
    K: float = 4.0
    K_walk_std: float = 0.0
    snr_db: float = 20.0

    def __post_init__(self):
        if self.p0 <= 0 or self.d_k <= 0:
            raise ConfigurationError("p0 and d_k must be > 0")
        if self.n < 0:
            raise ConfigurationError("path-loss exponent must be >= 0")
        if self.K < 0:
            raise ConfigurationError("Rician K must be >= 0")
        if self.K_walk_std < 0:
            raise ConfigurationError("K_walk_std must be >= 0")


@dataclass(frozen=True)
class V2VChannelConfig:
    """Non-stationary multi-path V2V channel parameters.

    Speeds are (v0, accel) pairs in m/s and m/s^2; headings are radians and
    piecewise constant. Cluster mean angles default to uniform draws but can
    be pinned via path_mean_aod / path_mean_aoa for closed-form tests.
    power_decay is the exponential rate of the per-path power profile and
    delay_spread the mean of the exponential excess delays (seconds).
    """

    num_paths: int = 6
    rays_per_path: int = 20
    wavelength: float = 0.0508
    tx_speed: tuple[float, float] = (15.0, 0.0)
    rx_speed: tuple[float, float] = (15.0, 0.0)
    tx_heading: float = 0.0
    rx_heading: float = 0.0
    angle_spread: float = 0.2
    power_decay: float = 1.0
    delay_spread: float = 0.4e-6
    slot_duration: float = 1e-3
    path_mean_aod: tuple[float, ...] | None = None
    path_mean_aoa: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.num_paths < 1 or self.rays_per_path < 1:
            raise ConfigurationError("need >= 1 path and >= 1 ray")
        if self.wavelength <= 0:
            raise ConfigurationError("wavelength must be > 0")
        if self.slot_duration <= 0:
            raise ConfigurationError("slot_duration must be > 0")
        if self.angle_spread < 0 or self.power_decay < 0:
            raise ConfigurationError("spread/decay must be >= 0")
        if self.delay_spread < 0:
            raise ConfigurationError("delay_spread must be >= 0")
        for angles in (self.path_mean_aod, self.path_mean_aoa):
            if angles is not None and len(angles) != self.num_paths:
                raise ConfigurationError(
                    "pinned mean angles must list one value per path")


@dataclass(frozen=True)
class DisturbanceProcess:
    """I.i.d. Gaussian per-slot disturbances for SNR (dB) and CSI error."""

    sigma_snr_db: float = 0.0
    sigma_csi: float = 0.0

    def __post_init__(self):
        if self.sigma_snr_db < 0 or self.sigma_csi < 0:
            raise ConfigurationError("disturbance sigmas must be >= 0")


@dataclass(frozen=True)
class DisturbanceSamples:
    """Per-slot draws: dB offsets added to the link SNR and CSI error stds."""

    snr_offset_db: np.ndarray
    csi_error_std: np.ndarray


@dataclass(frozen=True)
class ChannelRealization:
    """Per-slot channel state.

    gains has shape (num_slots, num_taps); delays is either a (num_taps,)
    integer array of sample offsets (flat/TDL) or a (num_slots, num_taps)
    float array of excess delays in seconds (CIR), distinguished by
    delay_unit. slot_duration is carried so the link layer can quantize
    second-valued delays at its own symbol rate.
    """

    kind: str
    gains: np.ndarray
    delays: np.ndarray
    delay_unit: str
    slot_duration: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        gains = np.asarray(self.gains, dtype=np.complex128)
        if gains.ndim != 2 or gains.shape[1] < 1:
            raise ConfigurationError("gains must be (num_slots, num_taps >= 1)")
        if not np.all(np.isfinite(gains.real)) or not np.all(np.isfinite(gains.imag)):
            raise ConfigurationError("channel gains must be finite")
        gains = gains.copy()
        gains.flags.writeable = False
        object.__setattr__(self, "gains", gains)
        delays = np.asarray(self.delays).copy()
        delays.flags.writeable = False
        object.__setattr__(self, "delays", delays)
        if self.delay_unit not in ("samples", "seconds"):
            raise ConfigurationError(f"bad delay_unit {self.delay_unit!r}")

    @property
    def num_slots(self) -> int:
        return self.gains.shape[0]

    @property
    def num_taps(self) -> int:
        return self.gains.shape[1]

    def mean_power(self) -> float:
        """Average received power per transmitted unit-power symbol."""
        return float(np.mean(np.sum(np.abs(self.gains) ** 2, axis=1)))

    def to_csv(self, path: str | Path) -> None:
        """Export (slot, tap_index, delay, re, im) rows for spectral tools."""
        with open(path, "w") as fh:
            fh.write("slot,tap_index,delay,re,im\n")
            for s in range(self.num_slots):
                for k in range(self.num_taps):
                    d = self.delays[s, k] if self.delays.ndim == 2 \
                        else self.delays[k]
                    g = self.gains[s, k]
                    fh.write(f"{s},{k},{d!r},{g.real!r},{g.imag!r}\n")


def sample_rician(cfg: RicianConfig, num_slots: int, rng_seed: int
                  ) -> ChannelRealization:
    """Per-slot flat Rician gains scaled by sqrt(p0 / d^n).

    The per-slot gain is complex normal with real mean mu and scattered
    variance sigma^2 chosen so E|h|^2 = 1 and K = mu^2 / sigma^2. With
    K_walk_std > 0, K follows a reflected random walk clamped at 0.
    """
    if num_slots < 1:
        raise ConfigurationError("num_slots must be >= 1")
    gain_rng = np.random.default_rng(child_seed(rng_seed, 0))
    walk_rng = np.random.default_rng(child_seed(rng_seed, 1))

    if cfg.K_walk_std > 0:
        steps = walk_rng.normal(0.0, cfg.K_walk_std, size=num_slots)
        k_series = np.abs(cfg.K + np.cumsum(steps))
    else:
        k_series = np.full(num_slots, cfg.K)

    mu = np.sqrt(k_series / (k_series + 1.0))
    scatter_var = 1.0 / (k_series + 1.0)
    noise = gain_rng.normal(0.0, 1.0, size=(num_slots, 2))
    h = mu + np.sqrt(scatter_var / 2.0) * (noise[:, 0] + 1j * noise[:, 1])
    amp = np.sqrt(cfg.p0 / cfg.d_k ** cfg.n)
    gains = (amp * h)[:, None]
    return ChannelRealization(
        kind="flat_rician", gains=gains, delays=np.zeros(1, dtype=np.int64),
        delay_unit="samples",
        metadata={"p0": cfg.p0, "d_k": cfg.d_k, "n": cfg.n, "K": cfg.K})


def sample_v2v_cir(cfg: V2VChannelConfig, num_slots: int, rng_seed: int
                   ) -> ChannelRealization:
    """Time-varying multi-ray cluster CIR sampled at slot resolution.

    Each path n carries M rays with initial phases uniform on (0, 2pi] and
    angles wrapped-Gaussian around the path's mean AoD/AoA. Per-ray Doppler
    combines Tx and Rx terms v(t)/lambda * cos(angle - heading); the phase
    integral is accumulated with the trapezoid rule across slots (exact for
    the linear speed profiles used here). Path powers follow a normalized
    exponential profile and multiply the ray sums directly; excess delays
    are exponential with tau_1 = 0.
    """
    if num_slots < 1:
        raise ConfigurationError("num_slots must be >= 1")
    N, M = cfg.num_paths, cfg.rays_per_path
    phase_rng = np.random.default_rng(child_seed(rng_seed, 0))
    angle_rng = np.random.default_rng(child_seed(rng_seed, 1))
    delay_rng = np.random.default_rng(child_seed(rng_seed, 2))

    powers = np.exp(-cfg.power_decay * np.arange(N))
    powers = powers / powers.sum()

    if N > 1 and cfg.delay_spread > 0:
        extra = np.sort(delay_rng.exponential(cfg.delay_spread, size=N - 1))
        taus = np.concatenate([[0.0], extra])
    else:
        taus = np.zeros(N)

    if cfg.path_mean_aod is not None:
        mean_aod = np.asarray(cfg.path_mean_aod, dtype=np.float64)
    else:
        mean_aod = angle_rng.uniform(0.0, 2.0 * np.pi, size=N)
    if cfg.path_mean_aoa is not None:
        mean_aoa = np.asarray(cfg.path_mean_aoa, dtype=np.float64)
    else:
        mean_aoa = angle_rng.uniform(0.0, 2.0 * np.pi, size=N)

    aod = mean_aod[:, None] + angle_rng.normal(0.0, cfg.angle_spread, (N, M)) \
        if cfg.angle_spread > 0 else np.repeat(mean_aod[:, None], M, axis=1)
    aoa = mean_aoa[:, None] + angle_rng.normal(0.0, cfg.angle_spread, (N, M)) \
        if cfg.angle_spread > 0 else np.repeat(mean_aoa[:, None], M, axis=1)
    theta = phase_rng.uniform(0.0, 2.0 * np.pi, size=(N, M))

    t_slots = np.arange(num_slots) * cfg.slot_duration
    v_tx = cfg.tx_speed[0] + cfg.tx_speed[1] * t_slots
    v_rx = cfg.rx_speed[0] + cfg.rx_speed[1] * t_slots

    # Doppler per (path, ray, slot); headings are piecewise constant.
    cos_tx = np.cos(aod - cfg.tx_heading)[:, :, None]
    cos_rx = np.cos(aoa - cfg.rx_heading)[:, :, None]
    freq = (v_tx[None, None, :] * cos_tx + v_rx[None, None, :] * cos_rx) \
        / cfg.wavelength

    phase = np.zeros_like(freq)
    if num_slots > 1:
        increments = 2.0 * np.pi * cfg.slot_duration \
            * 0.5 * (freq[:, :, 1:] + freq[:, :, :-1])
        phase[:, :, 1:] = np.cumsum(increments, axis=2)

    rays = np.exp(1j * (phase + theta[:, :, None]))
    h_paths = rays.sum(axis=1) / np.sqrt(M)          # (N, num_slots)
    gains = (powers[:, None] * h_paths).T            # (num_slots, N)
    delays = np.repeat(taus[None, :], num_slots, axis=0)
    return ChannelRealization(
        kind="cir_taps", gains=gains, delays=delays, delay_unit="seconds",
        slot_duration=cfg.slot_duration,
        metadata={"num_paths": N, "rays_per_path": M,
                  "wavelength": cfg.wavelength, "powers": powers.tolist()})


def sample_tdl(pdp: list[tuple[int, float]], rng_seed: int, num_slots: int
               ) -> ChannelRealization:
    """Tapped delay line: each tap i.i.d. complex Gaussian per slot.

    pdp lists (delay_in_samples, power) pairs whose powers sum to 1.
    """
    if not pdp:
        raise ConfigurationError("PDP must not be empty")
    if num_slots < 1:
        raise ConfigurationError("num_slots must be >= 1")
    delays = np.array([int(d) for d, _ in pdp], dtype=np.int64)
    powers = np.array([float(p) for _, p in pdp])
    if np.any(delays < 0):
        raise ConfigurationError("tap delays must be >= 0 samples")
    if np.any(powers < 0) or abs(powers.sum() - 1.0) > 1e-9:
        raise ConfigurationError("PDP powers must be >= 0 and sum to 1")
    rng = np.random.default_rng(child_seed(rng_seed, 0))
    noise = rng.normal(0.0, 1.0, size=(num_slots, delays.size, 2))
    gains = np.sqrt(powers / 2.0)[None, :] \
        * (noise[:, :, 0] + 1j * noise[:, :, 1])
    return ChannelRealization(kind="tdl", gains=gains, delays=delays,
                              delay_unit="samples",
                              metadata={"powers": powers.tolist()})


def sample_disturbance(proc: DisturbanceProcess, num_slots: int,
                       rng_seed: int) -> DisturbanceSamples:
    """Draw per-slot (snr_offset_db, csi_error_std) pairs.

    Offsets are N(0, sigma_snr^2) in dB. CSI draws are N(0, sigma_csi^2)
    taken in magnitude, since they act as per-slot error standard
    deviations downstream.
    """
    if num_slots < 1:
        raise ConfigurationError("num_slots must be >= 1")
    snr_rng = np.random.default_rng(child_seed(rng_seed, 0))
    csi_rng = np.random.default_rng(child_seed(rng_seed, 1))
    offsets = proc.sigma_snr_db * snr_rng.standard_normal(num_slots)
    csi = np.abs(proc.sigma_csi * csi_rng.standard_normal(num_slots))
    return DisturbanceSamples(snr_offset_db=offsets, csi_error_std=csi)

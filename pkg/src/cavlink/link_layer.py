"""End-to-end transmission of symbol frames through channel realizations.

Slots are transmitted as a pilot block followed by the payload block, each
with an implicit cyclic extension, so multi-tap channels act as circular
convolutions and zero-forcing stays well defined in the frequency domain.
The nominal SNR is defined at the receiver input per slot relative to the
realization's mean received power (after path loss); per-slot disturbance
offsets shift it in dB.

Noise, CSI-perturbation and any other random draws use separate sub-streams
of the given seed, so disabling one (e.g. sigma_csi = 0) leaves every other
draw bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel_models import ChannelRealization, DisturbanceSamples, child_seed
from .errors import ConfigurationError
from .feature_core import FeatureMap, SymbolFrame, from_symbols, to_symbols

_PILOT_SEED = 0xC4B1E7


def pilot_sequence(n: int) -> np.ndarray:
    """Fixed pseudo-random unit-power QPSK pilot block (same for all runs)."""
    rng = np.random.default_rng(_PILOT_SEED)
    bits = rng.integers(0, 2, size=(n, 2))
    return ((2 * bits[:, 0] - 1) + 1j * (2 * bits[:, 1] - 1)) / np.sqrt(2.0)


@dataclass(frozen=True)
class LinkConfig:
    snr_db: float = 20.0
    pilots_per_slot: int = 4
    csi_mode: str = "perfect"
    extra_csi_error_std: float = 0.0
    zf_epsilon_scale: float = 1e-3

    def __post_init__(self):
        if self.csi_mode not in ("perfect", "ls_estimate"):
            raise ConfigurationError(f"bad csi_mode {self.csi_mode!r}")
        if self.csi_mode == "ls_estimate" and self.pilots_per_slot < 1:
            raise ConfigurationError(
                "ls_estimate needs pilots_per_slot >= 1")
        if self.pilots_per_slot < 0:
            raise ConfigurationError("pilots_per_slot must be >= 0")
        if self.extra_csi_error_std < 0:
            raise ConfigurationError("extra_csi_error_std must be >= 0")
        if self.zf_epsilon_scale <= 0:
            raise ConfigurationError("zf_epsilon_scale must be > 0")


@dataclass
class LinkReport:
    """Per-slot link metrics; filled progressively along the receive chain."""

    effective_snr_db: np.ndarray
    est_err_power: np.ndarray
    erased: np.ndarray
    symbol_mse: float = 0.0
    feature_mse: float = float("nan")
    csi_mode: str = "perfect"

    def erasure_events(self) -> int:
        return int(self.erased.sum())

    def csv_rows(self) -> list[str]:
        rows = ["slot,snr_db_effective,est_err_power,erased"]
        for s in range(self.effective_snr_db.size):
            rows.append(f"{s},{self.effective_snr_db[s]!r},"
                        f"{self.est_err_power[s]!r},{int(self.erased[s])}")
        return rows


@dataclass(frozen=True)
class ChannelEstimate:
    """Per-slot tap estimates: parallel lists of delay and gain arrays."""

    delays: tuple[np.ndarray, ...]
    gains: tuple[np.ndarray, ...]

    @property
    def num_slots(self) -> int:
        return len(self.gains)

    def is_flat(self, s: int) -> bool:
        return self.delays[s].size == 1 and self.delays[s][0] == 0

    def mean_power(self) -> float:
        return float(np.mean([np.sum(np.abs(g) ** 2) for g in self.gains]))


@dataclass(frozen=True)
class RxFrame:
    """Received slots plus the simulation-side truth needed downstream."""

    pilots_rx: np.ndarray        # (num_slots, P)
    payload_rx: np.ndarray       # (num_slots, L)
    pilot_seq: np.ndarray        # (P,)
    tx_payload: np.ndarray       # (num_slots, L) clean transmitted symbols
    true_delays: tuple[np.ndarray, ...]
    true_gains: tuple[np.ndarray, ...]
    noise_var: np.ndarray        # (num_slots,)
    effective_snr_db: np.ndarray
    mean_gain_power: float
    scale: float
    pad: int
    payload_len: int

    @property
    def num_slots(self) -> int:
        return self.payload_rx.shape[0]

    def true_estimate(self) -> ChannelEstimate:
        return ChannelEstimate(self.true_delays, self.true_gains)


def _effective_taps(ch: ChannelRealization, symbols_per_slot: int
                    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Quantize tap delays to sample offsets and merge coincident taps."""
    delays_out, gains_out = [], []
    for s in range(ch.num_slots):
        gains = ch.gains[s]
        if ch.delay_unit == "samples":
            d = ch.delays.astype(np.int64)
        else:
            symbol_duration = ch.slot_duration / symbols_per_slot
            d = np.rint(ch.delays[s] / symbol_duration).astype(np.int64)
        uniq = np.unique(d)
        merged = np.array([gains[d == u].sum() for u in uniq])
        delays_out.append(uniq)
        gains_out.append(merged)
    return delays_out, gains_out


def _circular_apply(block: np.ndarray, delays: np.ndarray,
                    gains: np.ndarray) -> np.ndarray:
    if delays.size == 1 and delays[0] == 0:
        return gains[0] * block
    out = np.zeros_like(block)
    for d, g in zip(delays, gains):
        out += g * np.roll(block, int(d))
    return out


def transmit(frame: SymbolFrame, ch: ChannelRealization, cfg: LinkConfig,
             rng_seed: int, disturbance: DisturbanceSamples | None = None
             ) -> tuple[RxFrame, LinkReport]:
    """Send a frame through the channel with AWGN at the configured SNR."""
    if frame.num_slots != ch.num_slots:
        raise ConfigurationError(
            f"frame has {frame.num_slots} slots, channel {ch.num_slots}")
    P = cfg.pilots_per_slot
    L = frame.slot_len
    pilots = pilot_sequence(P)
    delays, gains = _effective_taps(ch, P + L)
    for d in delays:
        if d.max(initial=0) >= L or (P > 0 and d.max(initial=0) >= P):
            raise ConfigurationError(
                "tap delay exceeds block length; increase slot_len/pilots")

    mean_gain_power = float(np.mean(
        [np.sum(np.abs(g) ** 2) for g in gains]))
    offsets = disturbance.snr_offset_db if disturbance is not None \
        else np.zeros(ch.num_slots)
    if offsets.shape[0] != ch.num_slots:
        raise ConfigurationError("disturbance length != channel slots")
    eff_snr = cfg.snr_db + offsets
    if np.isinf(cfg.snr_db):
        n0 = np.zeros(ch.num_slots)
    else:
        n0 = mean_gain_power * 10.0 ** (-eff_snr / 10.0)

    noise_rng = np.random.default_rng(child_seed(rng_seed, 10))
    pilots_rx = np.zeros((ch.num_slots, P), dtype=np.complex128)
    payload_rx = np.zeros((ch.num_slots, L), dtype=np.complex128)
    tx_payload = np.zeros((ch.num_slots, L), dtype=np.complex128)
    for s in range(ch.num_slots):
        payload = frame.slot(s)
        tx_payload[s] = payload
        if P > 0:
            clean = _circular_apply(pilots, delays[s], gains[s])
            w = noise_rng.normal(0.0, 1.0, (P, 2))
            pilots_rx[s] = clean + np.sqrt(n0[s] / 2.0) * (w[:, 0] + 1j * w[:, 1])
        clean = _circular_apply(payload, delays[s], gains[s])
        w = noise_rng.normal(0.0, 1.0, (L, 2))
        payload_rx[s] = clean + np.sqrt(n0[s] / 2.0) * (w[:, 0] + 1j * w[:, 1])

    rx = RxFrame(pilots_rx=pilots_rx, payload_rx=payload_rx,
                 pilot_seq=pilots, tx_payload=tx_payload,
                 true_delays=tuple(delays), true_gains=tuple(gains),
                 noise_var=n0, effective_snr_db=np.asarray(eff_snr,
                                                           dtype=np.float64),
                 mean_gain_power=mean_gain_power, scale=frame.scale,
                 pad=frame.pad, payload_len=L)
    report = LinkReport(effective_snr_db=rx.effective_snr_db,
                        est_err_power=np.zeros(ch.num_slots),
                        erased=np.zeros(ch.num_slots, dtype=np.int64),
                        csi_mode=cfg.csi_mode)
    return rx, report


def estimate_ls(rx: RxFrame, cfg: LinkConfig, rng_seed: int = 0,
                disturbance: DisturbanceSamples | None = None
                ) -> ChannelEstimate:
    """Pilot-based least-squares channel estimate per slot.

    Flat slots use the scalar correlator sum(y p*) / sum(|p|^2); multi-tap
    slots solve the known-delay cyclic least-squares system (the pilot block
    must be at least as long as the tap span). When a CSI disturbance is
    active, complex Gaussian error with per-slot variance sigma_s^2 * E|h|^2
    is added on top, split evenly across taps.
    """
    P = rx.pilot_seq.size
    if P < 1:
        raise ConfigurationError("LS estimation needs >= 1 pilot per slot")
    pilot_power = float(np.sum(np.abs(rx.pilot_seq) ** 2))
    if pilot_power <= 0:
        raise ConfigurationError("zero-power pilot sequence")
    csi_rng = np.random.default_rng(child_seed(rng_seed, 11))
    sigma = np.full(rx.num_slots, cfg.extra_csi_error_std)
    if disturbance is not None:
        if disturbance.csi_error_std.shape[0] != rx.num_slots:
            raise ConfigurationError("disturbance length != frame slots")
        sigma = np.sqrt(sigma ** 2 + disturbance.csi_error_std ** 2)

    delays_out, gains_out = [], []
    for s in range(rx.num_slots):
        d = rx.true_delays[s]
        if d.size == 1 and d[0] == 0:
            g = np.array([np.sum(rx.pilots_rx[s] * np.conj(rx.pilot_seq))
                          / pilot_power])
        else:
            cols = [np.roll(rx.pilot_seq, int(dj)) for dj in d]
            A = np.stack(cols, axis=1)
            g, *_ = np.linalg.lstsq(A, rx.pilots_rx[s], rcond=None)
        err = csi_rng.normal(0.0, 1.0, (d.size, 2))
        err = (err[:, 0] + 1j * err[:, 1]) / np.sqrt(2.0)
        g = g + sigma[s] * np.sqrt(rx.mean_gain_power / d.size) * err
        delays_out.append(d)
        gains_out.append(g)
    return ChannelEstimate(tuple(delays_out), tuple(gains_out))


def zero_forcing(rx: RxFrame, est: ChannelEstimate, cfg: LinkConfig
                 ) -> tuple[SymbolFrame, np.ndarray]:
    """Equalize the payload by per-slot division through the estimate.

    Flat slots divide by the scalar estimate; multi-tap slots divide in the
    frequency domain over the payload block. Any slot (or frequency bin)
    whose estimated response magnitude is at or below
    zf_epsilon_scale * sqrt(mean estimate power) is zeroed and counted as an
    erasure instead of being divided.
    """
    if est.num_slots != rx.num_slots:
        raise ConfigurationError("estimate slots != frame slots")
    eps = cfg.zf_epsilon_scale * np.sqrt(est.mean_power())
    L = rx.payload_len
    erased = np.zeros(rx.num_slots, dtype=np.int64)
    out = np.zeros_like(rx.payload_rx)
    for s in range(rx.num_slots):
        if est.is_flat(s):
            h = est.gains[s][0]
            if np.abs(h) <= eps:
                erased[s] = 1
            else:
                out[s] = rx.payload_rx[s] / h
        else:
            k = np.arange(L)
            hf = np.zeros(L, dtype=np.complex128)
            for d, g in zip(est.delays[s], est.gains[s]):
                hf += g * np.exp(-2j * np.pi * k * int(d) / L)
            mask = np.abs(hf) > eps
            erased[s] = int(np.sum(~mask))
            spec = np.fft.fft(rx.payload_rx[s])
            spec = np.where(mask, spec / np.where(mask, hf, 1.0), 0.0)
            out[s] = np.fft.ifft(spec)
    bounds = tuple((s * L, (s + 1) * L) for s in range(rx.num_slots))
    frame = SymbolFrame(out.ravel(), rx.scale, rx.pad, bounds)
    return frame, erased


def run_link(f: FeatureMap, ch: ChannelRealization, cfg: LinkConfig,
             slot_len: int, rng_seed: int,
             disturbance: DisturbanceSamples | None = None
             ) -> tuple[FeatureMap, LinkReport]:
    """Full chain: map to symbols, transmit, estimate, equalize, map back."""
    frame = to_symbols(f, slot_len)
    rx, report = transmit(frame, ch, cfg, rng_seed, disturbance)
    if cfg.csi_mode == "perfect":
        est = rx.true_estimate()
    else:
        est = estimate_ls(rx, cfg, rng_seed, disturbance)
        report.est_err_power = np.array([
            float(np.sum(np.abs(est.gains[s] - rx.true_gains[s]) ** 2))
            for s in range(rx.num_slots)])
    eq, erased = zero_forcing(rx, est, cfg)
    report.erased = erased
    report.symbol_mse = float(np.mean(
        np.abs(eq.symbols.reshape(rx.num_slots, -1) - rx.tx_payload) ** 2))
    f_hat = from_symbols(eq, f.shape)
    f_hat = FeatureMap(f.channels, f.height, f.width, f_hat.data,
                       frame_id=f.frame_id, cav_id=f.cav_id)
    report.feature_mse = float(np.mean((f_hat.data - f.data) ** 2))
    return f_hat, report

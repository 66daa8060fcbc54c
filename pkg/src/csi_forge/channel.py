"""Synthetic wideband MIMO channel and the comb-type pilot observation.

The channel is a 32-tap wide-sense-stationary tapped delay line. Tap delays
are drawn uniformly from a window of known center and length, and each tap
gain evolves as a sum of 64 complex sinusoids whose frequencies are drawn
uniformly from [-w/2, w/2]. Ensemble averages then give

    E[g(t) g*(t + dt)] ~ sinc(w * dt)

per tap, a rectangular Doppler spectrum of total width w. Gains are drawn
independently per (Rx, Tx) pair; delays are shared, as paths are a property
of the propagation geometry rather than of the antenna pair. The per-entry
channel power is 1 by construction.

Symbol timing is continuous across slot boundaries: symbol l (1-based) of
slot n sits at t = (14 n + l - 1) * T.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DELAY_LEN_RANGES, SYMBOLS_PER_SLOT, SimConfig

N_TAPS = 32
N_SINUSOIDS = 64


@dataclass
class ChannelRealization:
    """One channel draw, valid for ``n_slots`` consecutive slots."""

    config: SimConfig
    n_slots: int
    genie_center: float            # delay window center, seconds
    genie_len: float               # delay window length, seconds
    genie_doppler: float           # two-sided Doppler width, Hz
    tap_delays: np.ndarray         # [N_TAPS] seconds
    doppler_freqs: np.ndarray      # [n_rx, n_tx, N_TAPS, N_SINUSOIDS] Hz
    doppler_phases: np.ndarray     # [n_rx, n_tx, N_TAPS, N_SINUSOIDS] rad

    def symbol_times(self, slot: int, symbols=None) -> np.ndarray:
        """Absolute times of the given 1-based symbol indices within a slot."""
        if symbols is None:
            symbols = np.arange(1, SYMBOLS_PER_SLOT + 1)
        symbols = np.asarray(symbols)
        return (slot * SYMBOLS_PER_SLOT + symbols - 1) * self.config.symbol_duration

    def tap_gains(self, times) -> np.ndarray:
        """Tap gain processes sampled at absolute times.

        Returns [len(times), n_rx, n_tx, N_TAPS]. Each tap is a sum of
        N_SINUSOIDS unit phasors scaled to unit variance; the extra
        1/sqrt(N_TAPS) makes the summed per-entry channel power 1.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.empty(times.shape + self.doppler_freqs.shape[:3], dtype=complex)
        # chunk the time axis to bound the [T, r, t, taps, sinusoids] temporary
        chunk = max(1, int(4_000_000 // self.doppler_freqs.size))
        for a in range(0, len(times), chunk):
            t = times[a:a + chunk, None, None, None, None]
            phase = 2.0 * np.pi * self.doppler_freqs[None] * t + self.doppler_phases[None]
            out[a:a + chunk] = np.exp(1j * phase).sum(axis=-1)
        n_taps, n_sin = self.doppler_freqs.shape[-2:]
        return out / np.sqrt(n_sin * n_taps)

    def response(self, subcarriers, times) -> np.ndarray:
        """Frequency response at 0-based subcarrier indices and absolute times.

        Returns [len(subcarriers), len(times), n_rx, n_tx].
        """
        subcarriers = np.atleast_1d(np.asarray(subcarriers))
        freqs = subcarriers * self.config.f_sc
        steer = np.exp(-2j * np.pi * np.outer(freqs, self.tap_delays))  # [K', taps]
        gains = self.tap_gains(times)                                   # [T, r, c, taps]
        return np.einsum("sp,trcp->strc", steer, gains)

    def _pilot_response_at(self, times: np.ndarray) -> np.ndarray:
        """Channel on each antenna's own pilot comb at the given times.

        Returns [n_tx, n_groups, len(times), n_rx]. Only the Tx column that
        actually transmits on a comb is evaluated.
        """
        cfg = self.config
        gains = self.tap_gains(times)                       # [T, r, c, taps]
        m_idx = np.arange(cfg.n_groups)
        out = np.empty((cfg.n_tx, cfg.n_groups, len(times), cfg.n_rx), dtype=complex)
        for j in range(cfg.n_tx):
            freqs = (m_idx * cfg.group_size + j) * cfg.f_sc
            steer = np.exp(-2j * np.pi * np.outer(freqs, self.tap_delays))
            out[j] = np.einsum("sp,trp->str", steer, gains[:, :, j, :])
        return out

    def pilot_response(self, slot: int) -> np.ndarray:
        """True channel at the pilot positions of one slot.

        Returns [n_tx, n_groups, |S|, n_rx]: entry [j, m, l, i] is the channel
        from Tx j to Rx i on the pilot subcarrier of group m at pilot symbol l.
        """
        return self._pilot_response_at(self.symbol_times(slot, self.config.pilot_symbols))

    def pilot_response_block(self, slots) -> np.ndarray:
        """Pilot-position channel for several slots in one evaluation.

        Returns [n_slots, n_tx, n_groups, |S|, n_rx], bit-identical to calling
        :meth:`pilot_response` slot by slot.
        """
        cfg = self.config
        slots = list(slots)
        n_sym = len(cfg.pilot_symbols)
        times = np.concatenate([self.symbol_times(n, cfg.pilot_symbols) for n in slots])
        resp = self._pilot_response_at(times)               # [n_tx, B, n_slots*|S|, r]
        resp = resp.reshape(cfg.n_tx, cfg.n_groups, len(slots), n_sym, cfg.n_rx)
        return resp.transpose(2, 0, 1, 3, 4)

    @property
    def h(self) -> np.ndarray:
        """Fully materialized tensor [K, 14, n_slots, n_rx, n_tx].

        Convenience for small setups; large configurations should evaluate
        slices through :meth:`response` instead.
        """
        cfg = self.config
        times = np.concatenate([self.symbol_times(n) for n in range(self.n_slots)])
        resp = self.response(np.arange(cfg.n_subcarriers), times)
        resp = resp.reshape(cfg.n_subcarriers, self.n_slots, SYMBOLS_PER_SLOT,
                            cfg.n_rx, cfg.n_tx)
        return resp.transpose(0, 2, 1, 3, 4)


def generate_channel(cfg: SimConfig, n_slots: int, seed: int) -> ChannelRealization:
    """Draw one channel realization.

    Draw order (fixed for reproducibility): window length, window center,
    tap delays, Doppler frequencies, Doppler phases.
    """
    rng = np.random.default_rng(seed)
    lo, hi = DELAY_LEN_RANGES[cfg.channel_type]
    genie_len = float(rng.uniform(lo, hi))
    center_max = 1.0 / (2.0 * cfg.group_size * cfg.f_sc) - genie_len / 2.0
    genie_center = float(rng.uniform(0.0, max(center_max, 0.0)))
    taps = rng.uniform(genie_center - genie_len / 2.0,
                       genie_center + genie_len / 2.0, size=N_TAPS)
    w = cfg.doppler_width
    shape = (cfg.n_rx, cfg.n_tx, N_TAPS, N_SINUSOIDS)
    freqs = rng.uniform(-w / 2.0, w / 2.0, size=shape)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    return ChannelRealization(
        config=cfg,
        n_slots=n_slots,
        genie_center=genie_center,
        genie_len=genie_len,
        genie_doppler=w,
        tap_delays=taps,
        doppler_freqs=freqs,
        doppler_phases=phases,
    )


@dataclass
class PilotObservation:
    """Received pilots and noise-only samples for one slot."""

    config: SimConfig
    slot_index: int
    h_tilde: np.ndarray    # [n_tx, n_groups, |S|, n_rx] received pilots
    z_tilde: np.ndarray    # [n_groups * n_zero, |S|, n_rx] noise-only samples


def noise_covariance(cfg: SimConfig) -> np.ndarray:
    """Receiver noise covariance: sigma2 on the diagonal, rho*sigma2 off it."""
    s2 = cfg.noise_power
    n = cfg.n_rx
    return s2 * ((1.0 - cfg.noise_rho) * np.eye(n) + cfg.noise_rho * np.ones((n, n)))


def _observe(cfg: SimConfig, h_true: np.ndarray, slot: int,
             noise_seed: int) -> PilotObservation:
    """Add receiver noise to the true pilot channel of one slot."""
    rng = np.random.default_rng(np.random.SeedSequence([noise_seed, slot]))
    n_sym = len(cfg.pilot_symbols)
    # iid complex noise on every subcarrier of every group, then mix across
    # antennas when the receiver noise is correlated
    z = rng.standard_normal((cfg.n_groups, cfg.group_size, n_sym, cfg.n_rx)) \
        + 1j * rng.standard_normal((cfg.n_groups, cfg.group_size, n_sym, cfg.n_rx))
    z *= np.sqrt(cfg.noise_power / 2.0)
    if cfg.noise_rho > 0.0:
        chol = np.linalg.cholesky(noise_covariance(cfg) / cfg.noise_power)
        z = z @ chol.T

    z_pilot = z[:, :cfg.n_tx].transpose(1, 0, 2, 3)         # [n_tx, B, |S|, n_rx]
    h_tilde = np.sqrt(cfg.pilot_power) * h_true + z_pilot
    z_tilde = z[:, cfg.n_tx:].reshape(cfg.n_groups * cfg.n_zero, n_sym, cfg.n_rx)
    return PilotObservation(config=cfg, slot_index=slot,
                            h_tilde=h_tilde, z_tilde=z_tilde)


def transmit_pilots(cfg: SimConfig, chan: ChannelRealization, slot: int,
                    noise_seed: int) -> PilotObservation:
    """Send the comb pilots of one slot through the channel.

    Tx antenna j (0-based) transmits sqrt(P) on subcarrier M*m + j of every
    group m at every pilot symbol; subcarriers M*m + n_tx .. M*m + M - 1 are
    left silent and provide the noise-only samples. Noise sample k of the
    flattened noise block maps to group k // n_zero, silent offset k % n_zero.
    """
    return _observe(cfg, chan.pilot_response(slot), slot, noise_seed)


def transmit_pilot_run(cfg: SimConfig, chan: ChannelRealization, slots,
                       noise_seed: int, block: int = 25):
    """Observations for many slots of one run.

    Yields (PilotObservation, true pilot channel) per slot. Channel gains are
    evaluated in slot blocks, which is much faster than per-slot calls but
    produces byte-identical observations.
    """
    slots = list(slots)
    for a in range(0, len(slots), block):
        part = slots[a:a + block]
        h_true = chan.pilot_response_block(part)
        for n, h_slot in zip(part, h_true):
            yield _observe(cfg, h_slot, n, noise_seed), h_slot

"""Simulation configuration and the sampling universe it is drawn from.

A configuration fixes one cell setup: antenna counts, OFDM grid, pilot
layout and the operating SNR. Random draws use per-index substreams so
that configuration ``i`` of a campaign is reproducible in isolation.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SPEED_OF_LIGHT = 3e8

CHANNEL_TYPES = ("UMi", "UMa", "RMa")

# genie delay-window length ranges per scenario, seconds
DELAY_LEN_RANGES = {
    "UMi": (50e-9, 300e-9),
    "UMa": (100e-9, 600e-9),
    "RMa": (30e-9, 150e-9),
}

# carrier frequency paired with subcarrier spacing
CARRIER_SCS_PAIRS = ((2.6e9, 15e3), (3.5e9, 30e3))

SNR_RANGE_DB = (0.0, 30.0)

SPEEDS_KMH = (3.0, 10.0, 30.0, 60.0, 90.0)

ANTENNA_PAIRS = ((4, 1), (4, 2), (4, 4), (8, 1), (8, 2), (8, 4))

GROUP_COUNTS = (25, 50, 75, 100)

GROUP_SIZES = (12, 24, 48)

PILOT_SYMBOL_SETS = ((2, 8), (2, 6, 10), (4, 8, 12), (2, 5, 8, 11))

SYMBOLS_PER_SLOT = 14

_M64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 sequence starting at state ``x``."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix_seed(master_seed: int, *parts: int) -> int:
    """Mix a master seed with substream indices into one 64-bit seed."""
    s = splitmix64(master_seed & _M64)
    for p in parts:
        s = splitmix64(s ^ (p & _M64))
    return s


def next_pow2(n: int) -> int:
    """Smallest power of two that is >= n."""
    if n < 1:
        raise ValueError("n must be positive")
    p = 1
    while p < n:
        p <<= 1
    return p


@dataclass(frozen=True)
class SimConfig:
    channel_type: str            # UMi / UMa / RMa
    f_carrier: float             # carrier frequency, Hz
    f_sc: float                  # subcarrier spacing, Hz
    snr_db: float                # pilot SNR, dB
    speed_kmh: float             # UE speed
    n_tx: int                    # Tx antennas N_T
    n_rx: int                    # Rx antennas N_R
    n_groups: int                # subcarrier groups B
    group_size: int              # subcarriers per group M
    pilot_symbols: tuple[int, ...] = (2, 5, 8, 11)   # S, 1-based symbol indices
    noise_rho: float = 0.0       # cross-antenna noise correlation
    n_fft: int | None = None     # IDFT size override for delay profiling

    def __post_init__(self):
        if self.channel_type not in CHANNEL_TYPES:
            raise ValueError(f"unknown channel type {self.channel_type!r}")
        if self.n_zero < 1:
            raise ValueError(
                f"need at least one zeroed subcarrier per group, "
                f"got M={self.group_size}, N_T={self.n_tx}"
            )
        if not all(1 <= l <= SYMBOLS_PER_SLOT for l in self.pilot_symbols):
            raise ValueError("pilot symbol indices must lie in 1..14")
        if not 0.0 <= self.noise_rho < 1.0:
            raise ValueError("noise_rho must lie in [0, 1)")

    # ---- derived quantities -------------------------------------------------

    @property
    def n_subcarriers(self) -> int:
        """Total subcarriers K = B * M."""
        return self.n_groups * self.group_size

    @property
    def n_zero(self) -> int:
        """Zeroed subcarriers per group, N_Z = M - N_T."""
        return self.group_size - self.n_tx

    @property
    def pilot_power(self) -> float:
        """Pilot power P for unit noise variance: snr_db = 10 log10(P / sigma2)."""
        return 10.0 ** (self.snr_db / 10.0)

    @property
    def noise_power(self) -> float:
        """Per-antenna noise variance sigma2 (fixed at 1, SNR is set via P)."""
        return 1.0

    @property
    def symbol_duration(self) -> float:
        """OFDM symbol duration incl. cyclic prefix, seconds.

        NR numerology: a 14-symbol slot lasts 1 ms at 15 kHz spacing and
        halves for each doubling of the spacing.
        """
        return 1e-3 / SYMBOLS_PER_SLOT / (self.f_sc / 15e3)

    @property
    def doppler_width(self) -> float:
        """Two-sided Doppler spread w = 2 * v * f_carrier / c, Hz."""
        v = self.speed_kmh / 3.6
        return 2.0 * v * self.f_carrier / SPEED_OF_LIGHT

    @property
    def delay_fft_size(self) -> int:
        """IDFT size used for delay profiling (default: next power of 2 above K)."""
        if self.n_fft is not None:
            return self.n_fft
        return next_pow2(self.n_subcarriers)

    def pilot_subcarrier(self, m: int, j: int) -> int:
        """0-based subcarrier index of the pilot for Tx antenna j in group m."""
        return m * self.group_size + j

    def zero_subcarrier(self, m: int, q: int) -> int:
        """0-based subcarrier index of the q-th zeroed subcarrier in group m."""
        return m * self.group_size + self.n_tx + q

    def with_snr(self, snr_db: float) -> "SimConfig":
        return replace(self, snr_db=snr_db)


def sample_config(master_seed: int, index: int, max_rejects: int = 64) -> SimConfig:
    """Draw configuration ``index`` of the campaign keyed by ``master_seed``.

    Each index gets its own substream, so sampling config 17 does not require
    sampling configs 0..16 first. Combinations without at least one zeroed
    subcarrier per group are rejected and redrawn from the same substream.
    """
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, index]))
    for _ in range(max_rejects):
        channel_type = CHANNEL_TYPES[rng.integers(len(CHANNEL_TYPES))]
        f_carrier, f_sc = CARRIER_SCS_PAIRS[rng.integers(len(CARRIER_SCS_PAIRS))]
        snr_db = float(rng.uniform(*SNR_RANGE_DB))
        speed = SPEEDS_KMH[rng.integers(len(SPEEDS_KMH))]
        n_tx, n_rx = ANTENNA_PAIRS[rng.integers(len(ANTENNA_PAIRS))]
        n_groups = GROUP_COUNTS[rng.integers(len(GROUP_COUNTS))]
        group_size = GROUP_SIZES[rng.integers(len(GROUP_SIZES))]
        pilots = PILOT_SYMBOL_SETS[rng.integers(len(PILOT_SYMBOL_SETS))]
        if group_size - n_tx < 1:
            continue
        return SimConfig(
            channel_type=channel_type,
            f_carrier=f_carrier,
            f_sc=f_sc,
            snr_db=snr_db,
            speed_kmh=float(speed),
            n_tx=int(n_tx),
            n_rx=int(n_rx),
            n_groups=int(n_groups),
            group_size=int(group_size),
            pilot_symbols=tuple(int(l) for l in pilots),
        )
    raise RuntimeError(f"no valid configuration after {max_rejects} draws")

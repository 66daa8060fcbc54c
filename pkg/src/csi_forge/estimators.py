"""Classical per-slot CSI estimation from comb-type pilot observations.

The stages mirror a conventional receiver: noise covariance from silent
subcarriers, pilot power, a thresholded delay profile that parametrizes a
robust frequency correlation, a Doppler width fitted on a candidate grid,
robust MMSE smoothing of the raw pilot estimates, and finally precoder and
rank selection over a DFT-subset codebook together with the implied
spectral efficiency.

Conventions used throughout:
  * h_tilde is [n_tx, n_groups, |S|, n_rx], z_tilde is [B * n_zero, |S|, n_rx]
  * the delay-domain IDFT is scaled by n_fft / sqrt(B) on top of numpy's
    ifft so that the per-bin noise power equals sigma2, which makes the
    3 * sigma2 detection threshold a plain noise-floor test
  * all argmax / argmin selections break ties toward the first (lowest)
    index, with a small relative tolerance so that analytically tied scores
    do not fall to floating-point ulps
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .channel import PilotObservation
from .config import SimConfig

EPS_POWER = 1e-9       # floor for the signal power estimate
EPS_DIAG = 1e-9        # floor for diagonal entries before correlation scaling
TIE_RTOL = 1e-9        # relative tolerance for score ties

DOPPLER_GRID_SIZE = 64
DOPPLER_GRID_RANGE = (1.0, 1200.0)


def doppler_grid() -> np.ndarray:
    """Default Doppler candidate grid: 64 log-spaced points in [1, 1200] Hz."""
    lo, hi = DOPPLER_GRID_RANGE
    return np.logspace(np.log10(lo), np.log10(hi), DOPPLER_GRID_SIZE)


def _first_max(scores: np.ndarray) -> int:
    """Index of the maximum, ties (within TIE_RTOL) going to the lowest index."""
    scores = np.asarray(scores, dtype=float)
    best = scores.max()
    tol = TIE_RTOL * max(1.0, abs(best))
    return int(np.nonzero(scores >= best - tol)[0][0])


def _first_min(scores: np.ndarray) -> int:
    return _first_max(-np.asarray(scores, dtype=float))


def _hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a.conj(), -1, -2))


# ---------------------------------------------------------------------------
# noise and power
# ---------------------------------------------------------------------------

@dataclass
class NoiseEstimate:
    c_n: np.ndarray        # [n_rx, n_rx] noise covariance
    sigma2: np.ndarray     # [n_rx] per-antenna noise power (real diagonal)


def estimate_noise_covariance(z_tilde: np.ndarray) -> NoiseEstimate:
    """Sample covariance of the noise-only samples, averaged over all of them."""
    n_samples = z_tilde.shape[0] * z_tilde.shape[1]
    c = np.einsum("kli,klj->ij", z_tilde, z_tilde.conj()) / n_samples
    c = _hermitize(c)
    return NoiseEstimate(c_n=c, sigma2=np.real(np.diag(c)).copy())


@dataclass
class PowerEstimate:
    value: float           # floored at EPS_POWER, used downstream
    raw: float             # unfloored estimate, kept for diagnostics


def estimate_signal_power(h_tilde: np.ndarray, noise: NoiseEstimate) -> PowerEstimate:
    """Average received pilot power minus the average noise power."""
    raw = float(np.mean(np.abs(h_tilde) ** 2) - np.mean(noise.sigma2))
    return PowerEstimate(value=max(raw, EPS_POWER), raw=raw)


# ---------------------------------------------------------------------------
# delay profile
# ---------------------------------------------------------------------------

def min_circular_cover(indices, n: int) -> tuple[int, int]:
    """Shortest circular window [start, end] (inclusive) covering the indices.

    Of the gaps between circularly consecutive detected bins, the largest one
    is excluded; the window runs from the bin after that gap to the bin before
    it. Ties between equally large gaps go to the window with the smallest
    start index.
    """
    d = np.unique(np.asarray(indices, dtype=int))
    if d.size == 0:
        raise ValueError("empty index set has no cover")
    if np.any((d < 0) | (d >= n)):
        raise ValueError("indices out of range")
    if d.size == 1:
        return int(d[0]), int(d[0])
    gaps = np.concatenate([np.diff(d), [d[0] + n - d[-1]]])
    starts = np.concatenate([d[1:], [d[0]]])
    best = gaps.max()
    tied = np.nonzero(gaps == best)[0]
    gi = tied[np.argmin(starts[tied])]
    return int(starts[gi]), int(d[gi])


def robust_freq_correlation(center: float, length: float, n_groups: int,
                            spacing: float) -> np.ndarray:
    """Correlation across pilot groups for a flat delay window.

    Entry [m1, m2] is exp(-2j pi center d spacing) * sinc(length d spacing)
    with d = m1 - m2 and spacing the group pilot spacing M * f_sc in Hz.
    """
    d = np.subtract.outer(np.arange(n_groups), np.arange(n_groups)) * spacing
    return np.exp(-2j * np.pi * center * d) * np.sinc(length * d)


@dataclass
class DelayProfileEstimate:
    profile: np.ndarray        # [n_rx, n_fft] averaged delay-power profile
    n_fft: int
    bin_seconds: float         # delay resolution 1 / (M * f_sc * n_fft)
    detected: list             # per antenna, indices above threshold
    window: np.ndarray         # [n_rx, 2] cover (start, end) bins
    center: np.ndarray         # [n_rx] window center estimate, seconds
    length: np.ndarray         # [n_rx] window length estimate, seconds
    r_f: np.ndarray            # [n_rx, B, B] robust frequency correlation


def estimate_delay_profile(h_tilde: np.ndarray, noise: NoiseEstimate,
                           cfg: SimConfig, n_fft: int | None = None) -> DelayProfileEstimate:
    """Delay window (center, length) per Rx antenna from the pilot CFRs.

    Per (Rx, Tx, symbol) the B-point CFR is zero-padded to n_fft and turned
    into a delay profile through an IDFT; profiles are averaged over Tx
    antennas and pilot symbols. Bins above 3 * sigma2 form the detection set,
    whose minimal circular cover gives the window. An empty detection set
    falls back to the strongest bin with a one-bin window.
    """
    n_tx, n_groups, n_sym, n_rx = h_tilde.shape
    n_fft = int(n_fft) if n_fft is not None else cfg.delay_fft_size
    if n_fft < n_groups:
        raise ValueError("n_fft must be at least the CFR length")
    spacing = cfg.group_size * cfg.f_sc
    bin_s = 1.0 / (spacing * n_fft)

    # [n_tx, B, |S|, n_rx] -> IDFT over the group axis, noise floor = sigma2
    cir = np.fft.ifft(h_tilde, n=n_fft, axis=1) * (n_fft / np.sqrt(n_groups))
    profile = np.mean(np.abs(cir) ** 2, axis=(0, 2)).T            # [n_rx, n_fft]

    detected, window = [], np.zeros((n_rx, 2), dtype=int)
    center = np.zeros(n_rx)
    length = np.zeros(n_rx)
    r_f = np.zeros((n_rx, n_groups, n_groups), dtype=complex)
    for i in range(n_rx):
        above = np.nonzero(profile[i] > 3.0 * noise.sigma2[i])[0]
        detected.append(above)
        if above.size == 0:
            peak = int(np.argmax(profile[i]))
            window[i] = (peak, peak)
            center[i] = peak * bin_s
            length[i] = bin_s
        else:
            start, end = min_circular_cover(above, n_fft)
            window[i] = (start, end)
            center[i] = 0.5 * (start + end) * bin_s
            length[i] = (((end - start) % n_fft) + 1) * bin_s
        r_f[i] = robust_freq_correlation(center[i], length[i], n_groups, spacing)
    return DelayProfileEstimate(profile=profile, n_fft=n_fft, bin_seconds=bin_s,
                                detected=detected, window=window,
                                center=center, length=length, r_f=r_f)


# ---------------------------------------------------------------------------
# Doppler
# ---------------------------------------------------------------------------

def time_correlation(width: float, pilot_symbols, symbol_duration: float) -> np.ndarray:
    """Model correlation across pilot symbols for Doppler width ``width`` Hz."""
    t = np.asarray(pilot_symbols, dtype=float) * symbol_duration
    return np.sinc(width * np.subtract.outer(t, t))


@dataclass
class DopplerEstimate:
    c_time: np.ndarray     # [n_rx, |S|, |S|] time covariance
    r_time: np.ndarray     # [n_rx, |S|, |S|] normalized time correlation
    width: np.ndarray      # [n_rx] fitted Doppler width, Hz
    r_t: np.ndarray        # [n_rx, |S|, |S|] model correlation at the fit
    grid: np.ndarray       # candidate widths


def estimate_doppler(h_tilde: np.ndarray, noise: NoiseEstimate, cfg: SimConfig,
                     grid: np.ndarray | None = None) -> DopplerEstimate:
    """Doppler width per Rx antenna by matching the pilot-symbol correlation.

    The sample covariance across pilot symbols (averaged over Tx antennas and
    groups, noise power removed from the diagonal) is normalized to a
    correlation matrix and compared against sinc model correlations on the
    candidate grid; the best Frobenius fit wins, ties toward the smaller
    width.
    """
    if grid is None:
        grid = doppler_grid()
    grid = np.asarray(grid, dtype=float)
    n_tx, n_groups, n_sym, n_rx = h_tilde.shape
    models = np.stack([time_correlation(w, cfg.pilot_symbols, cfg.symbol_duration)
                       for w in grid])

    c_time = np.zeros((n_rx, n_sym, n_sym), dtype=complex)
    r_time = np.zeros_like(c_time)
    width = np.zeros(n_rx)
    r_t = np.zeros_like(c_time)
    for i in range(n_rx):
        v = h_tilde[:, :, :, i]
        c = np.einsum("jma,jmb->ab", v, v.conj()) / (n_tx * n_groups)
        c = _hermitize(c) - noise.sigma2[i] * np.eye(n_sym)
        diag = np.sqrt(np.maximum(np.real(np.diag(c)), EPS_DIAG))
        r = c / np.outer(diag, diag)
        costs = np.linalg.norm(models - r[None], axis=(1, 2))
        k = _first_min(costs)
        c_time[i], r_time[i], width[i], r_t[i] = c, r, grid[k], models[k]
    return DopplerEstimate(c_time=c_time, r_time=r_time, width=width,
                           r_t=r_t, grid=grid)


# ---------------------------------------------------------------------------
# robust MMSE smoothing
# ---------------------------------------------------------------------------

@dataclass
class ChannelEstimate:
    h_hat: np.ndarray      # [B, |S|, n_rx, n_tx] channel estimate, unit scale
    p_hat: float           # signal power used for scaling


def robust_channel_estimate(h_tilde: np.ndarray, noise: NoiseEstimate,
                            power: PowerEstimate, delay: DelayProfileEstimate,
                            doppler: DopplerEstimate) -> ChannelEstimate:
    """MMSE smoothing under the separable robust correlation model.

    The prior correlation across (group, symbol) is the Kronecker product
    r_t kron r_f; the filter r (r + sigma2 / P I)^-1 is applied through the
    eigenbases of the two small factors instead of forming the B|S| x B|S|
    matrix. The filtered pilots are finally scaled by 1 / sqrt(P) to unit
    channel scale.
    """
    n_tx, n_groups, n_sym, n_rx = h_tilde.shape
    h_hat = np.empty((n_groups, n_sym, n_rx, n_tx), dtype=complex)
    for i in range(n_rx):
        lam_f, u_f = np.linalg.eigh(delay.r_f[i])
        lam_t, u_t = np.linalg.eigh(doppler.r_t[i])
        alpha = noise.sigma2[i] / power.value
        lam = np.outer(lam_f, lam_t)
        gain = lam / (lam + alpha)                      # [B, |S|]
        x = h_tilde[:, :, :, i]                         # [n_tx, B, |S|]
        x = np.matmul(u_f.conj().T[None], x)
        x = np.matmul(x, u_t.conj()[None])
        x = np.matmul(u_f[None], gain[None] * x)
        x = np.matmul(x, u_t.T[None])
        h_hat[:, :, i, :] = x.transpose(1, 2, 0)
    return ChannelEstimate(h_hat=h_hat / np.sqrt(power.value), p_hat=power.value)


# ---------------------------------------------------------------------------
# precoding and rank
# ---------------------------------------------------------------------------

def whitened_spatial_covariance(h_hat: np.ndarray, noise: NoiseEstimate) -> np.ndarray:
    """Average of H^H C_n^-1 H over all pilot positions, [n_tx, n_tx]."""
    c_n = noise.c_n
    n_rx = c_n.shape[0]
    if np.linalg.cond(c_n) > 1e12:
        c_n = c_n + (1e-9 * np.trace(c_n).real / n_rx) * np.eye(n_rx)
    c_inv = np.linalg.inv(c_n)
    n_pos = h_hat.shape[0] * h_hat.shape[1]
    c_s = np.einsum("mlia,ik,mlkb->ab", h_hat.conj(), c_inv, h_hat) / n_pos
    return _hermitize(c_s)


def build_dft_codebook(n_tx: int, rank: int) -> np.ndarray:
    """All rank-column subsets of the n_tx DFT matrix, unit Frobenius norm.

    Returns [n_candidates, n_tx, rank] with candidates in lexicographic order
    of the chosen column indices.
    """
    if not 1 <= rank <= n_tx:
        raise ValueError(f"rank must lie in 1..{n_tx}")
    dft = np.exp(-2j * np.pi * np.outer(np.arange(n_tx), np.arange(n_tx)) / n_tx)
    dft /= np.sqrt(n_tx)
    cands = [dft[:, list(cols)] / np.sqrt(rank)
             for cols in itertools.combinations(range(n_tx), rank)]
    return np.stack(cands)


def precoder_scores(c_s: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """log det(I + W^H C_s W) for every candidate."""
    rank = codebook.shape[2]
    eye = np.eye(rank)
    gram = np.einsum("nar,ab,nbs->nrs", codebook.conj(), c_s, codebook)
    sign, logdet = np.linalg.slogdet(eye[None] + gram)
    return logdet


def select_precoder(c_s: np.ndarray, codebook: np.ndarray) -> tuple[int, float]:
    """Best codebook index and its score, first index winning ties."""
    scores = precoder_scores(c_s, codebook)
    k = _first_max(scores)
    return k, float(scores[k])


@dataclass
class PrecoderReport:
    c_s: np.ndarray            # [n_tx, n_tx] whitened spatial covariance
    w: np.ndarray              # [n_tx, rank] selected precoder
    rank: int                  # selected rank
    rank_scores: np.ndarray    # best score per rank 1..max_rank
    codebook_id: str = "dft-subsets"
    spectral_eff: float | None = None   # filled by the pipeline


def select_rank(c_s: np.ndarray, max_rank: int) -> PrecoderReport:
    """Pick rank and precoder jointly: best per-rank score, then best rank.

    Rank ties break toward the smaller rank, candidate ties toward the first
    candidate in codebook order.
    """
    best_w, scores = [], []
    for rank in range(1, max_rank + 1):
        book = build_dft_codebook(c_s.shape[0], rank)
        k, score = select_precoder(c_s, book)
        best_w.append(book[k])
        scores.append(score)
    scores = np.asarray(scores)
    r = _first_max(scores)
    return PrecoderReport(c_s=c_s, w=best_w[r], rank=r + 1, rank_scores=scores)


def spectral_efficiency(h: np.ndarray, c_n: np.ndarray, power: float,
                        w: np.ndarray) -> float:
    """Average log det(C_n + P H W W^H H^H) over channel matrices.

    ``h`` is [..., n_rx, n_tx]; leading axes enumerate positions. Natural
    logarithm, nats per channel use.
    """
    h = h.reshape(-1, h.shape[-2], h.shape[-1])
    hw = h @ w                                           # [n, n_rx, rank]
    a = c_n[None] + power * (hw @ np.swapaxes(hw.conj(), 1, 2))
    sign, logdet = np.linalg.slogdet(a)
    return float(np.mean(logdet))


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass
class FeatureRecord:
    """All per-slot features produced by the estimation pipeline."""

    channel_type: str
    n_subcarriers: int
    noise_cov: np.ndarray      # [n_rx, n_rx]
    freq_corr: np.ndarray      # [B, B] robust frequency correlation
    time_cov: np.ndarray       # [|S|, |S|]
    time_corr: np.ndarray      # [|S|, |S|]
    delay_center: float
    delay_len: float
    doppler_width: float
    precoder: np.ndarray       # [n_tx, rank]
    rank: int
    spectral_eff: float
    slot_index: int = 0
    config_id: int = 0

    TARGETS = ("delay_center", "delay_len", "doppler_width", "precoder", "rank")


def run_pipeline(obs: PilotObservation, n_fft: int | None = None,
                 grid: np.ndarray | None = None, config_id: int = 0,
                 with_estimate: bool = False):
    """Estimate every feature of one slot.

    Per-antenna scalar estimates are reduced by the arithmetic mean over Rx
    antennas, per-antenna correlation matrices by the entrywise mean.
    Returns the FeatureRecord, or (record, ChannelEstimate) when
    ``with_estimate`` is set.
    """
    cfg = obs.config
    noise = estimate_noise_covariance(obs.z_tilde)
    power = estimate_signal_power(obs.h_tilde, noise)
    delay = estimate_delay_profile(obs.h_tilde, noise, cfg, n_fft=n_fft)
    doppler = estimate_doppler(obs.h_tilde, noise, cfg, grid=grid)
    est = robust_channel_estimate(obs.h_tilde, noise, power, delay, doppler)
    c_s = whitened_spatial_covariance(est.h_hat, noise)
    report = select_rank(c_s, cfg.n_rx)
    report.spectral_eff = spectral_efficiency(
        est.h_hat.reshape(-1, cfg.n_rx, cfg.n_tx), noise.c_n, power.value, report.w)
    record = FeatureRecord(
        channel_type=cfg.channel_type,
        n_subcarriers=cfg.n_subcarriers,
        noise_cov=noise.c_n,
        freq_corr=delay.r_f.mean(axis=0),
        time_cov=doppler.c_time.mean(axis=0),
        time_corr=doppler.r_time.mean(axis=0),
        delay_center=float(delay.center.mean()),
        delay_len=float(delay.length.mean()),
        doppler_width=float(doppler.width.mean()),
        precoder=report.w,
        rank=report.rank,
        spectral_eff=float(report.spectral_eff),
        slot_index=obs.slot_index,
        config_id=config_id,
    )
    if with_estimate:
        return record, est
    return record

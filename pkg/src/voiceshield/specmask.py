"""Stage 1: greedy spectral masking.

Scores every sufficiently energetic STFT row by how much its removal
bends the log-mel representation, keeps the top k, and realizes the mask
either offline (exact row zeroing) or as a causal notch cascade for the
streaming path.  The two realizations share one FrequencyMask but are
not bit-equivalent; each is held to its own contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import MEL_FLOOR, Spectrogram, StftConfig, Waveform, istft, mel_filterbank, stft
from .errors import ValidationError
from .filters import BiquadChain, design_dc_cut, design_notch, design_nyquist_cut

N_SCORE_BANDS = 80  # same mel resolution the encoders consume

NOTCH_Q_DEFAULT = 30.0
EDGE_CUT_DB = -40.0  # DC/Nyquist bins get a first-order shelf this deep


@dataclass(frozen=True)
class FrequencyMask:
    bins: tuple
    k: int

    def __post_init__(self):
        bins = tuple(int(b) for b in self.bins)
        object.__setattr__(self, "bins", bins)
        if len(bins) != self.k:
            raise ValidationError(f"mask holds {len(bins)} bins but k={self.k}")
        if len(set(bins)) != len(bins):
            raise ValidationError("mask bins must be unique")
        if any(b < 0 for b in bins):
            raise ValidationError("mask bins must be non-negative")
        if tuple(sorted(bins)) != bins:
            raise ValidationError("mask bins must be sorted")


@dataclass
class GreedyMaskConfig:
    k: int = 12
    tau_p_rel: float = 0.01

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError("k must be non-negative")
        if not 0.0 < self.tau_p_rel <= 1.0:
            raise ValidationError("tau_p_rel must lie in (0, 1]")


def power_candidates(spec: Spectrogram, cfg: GreedyMaskConfig) -> np.ndarray:
    """Row indices whose norm clears the relative power threshold.

    The threshold is relative to the strongest row, so scaling the input
    rescales nothing; an all-silent spectrogram keeps every row as a
    zero-score candidate rather than failing.
    """
    norms = np.linalg.norm(spec.magnitude(), axis=1)
    tau_p = cfg.tau_p_rel * float(norms.max()) if norms.size else 0.0
    return np.flatnonzero(norms >= tau_p)


def mel_deltas(spec: Spectrogram, bins) -> np.ndarray:
    """Log-mel deviation each listed row would cause if zeroed."""
    mag = spec.magnitude()
    fb = mel_filterbank(N_SCORE_BANDS, spec.config.fft_size,
                        spec.config.sample_rate)
    energies = fb @ mag
    base = np.log(np.maximum(energies, MEL_FLOOR))
    # a column feeds at most two overlapping triangles, so each candidate
    # only perturbs those rows
    deltas = np.zeros(len(bins))
    for j, i in enumerate(bins):
        rows = np.flatnonzero(fb[:, i])
        if rows.size == 0:
            continue
        bent = energies[rows] - np.outer(fb[rows, i], mag[i])
        bent_log = np.log(np.maximum(bent, MEL_FLOOR))
        deltas[j] = float(np.sqrt(np.sum((bent_log - base[rows]) ** 2)))
    return deltas


def _candidate_deltas(spec: Spectrogram, cfg: GreedyMaskConfig):
    cand = power_candidates(spec, cfg)
    return cand, mel_deltas(spec, cand)


def greedy_select(spec: Spectrogram, cfg: GreedyMaskConfig) -> FrequencyMask:
    """Top-k rows by mel impact, ties broken toward the lower bin index."""
    cand, deltas = _candidate_deltas(spec, cfg)
    if len(cand) < cfg.k:
        raise ValidationError(
            f"only {len(cand)} rows pass the power threshold, need k={cfg.k}")
    order = np.lexsort((cand, -deltas))  # score desc, then bin asc
    chosen = sorted(int(cand[i]) for i in order[:cfg.k])
    return FrequencyMask(tuple(chosen), cfg.k)


def apply_mask(wave: Waveform, mask: FrequencyMask,
               stft_cfg: StftConfig | None = None) -> Waveform:
    """Zero the masked STFT rows and resynthesize at the input length.

    The signal is zero-padded by one FFT length on both sides first, so
    every real sample has full overlap coverage; without this, modified
    spectra divide leaked energy by a vanishing window sum at the edges.
    """
    stft_cfg = stft_cfg or StftConfig()
    if any(b >= stft_cfg.n_bins for b in mask.bins):
        raise ValidationError("mask bin outside the spectrogram range")
    n = stft_cfg.fft_size
    padded = Waveform(np.concatenate([np.zeros(n), wave.samples, np.zeros(n)]),
                      wave.sample_rate)
    spec = stft(padded, stft_cfg)
    bins = spec.bins.copy()
    if mask.bins:
        bins[list(mask.bins)] = 0.0
    out = istft(Spectrogram(bins, stft_cfg))
    out = out[n:n + len(wave.samples)]
    if len(out) < len(wave.samples):
        out = np.concatenate([out, np.zeros(len(wave.samples) - len(out))])
    return Waveform(out, wave.sample_rate)


def compile_notch_cascade(mask: FrequencyMask, sample_rate: int,
                          fft_size: int, q: float = NOTCH_Q_DEFAULT) -> BiquadChain:
    """Causal zero-lookahead realization of the mask: one notch per bin.

    The DC and Nyquist bins have no notch center; they become first-order
    shelving cuts of EDGE_CUT_DB instead.
    """
    if not mask.bins:
        raise ValidationError("cannot compile an empty mask")
    if any(b > fft_size // 2 for b in mask.bins):
        raise ValidationError("mask bin outside the spectrogram range")
    bin_hz = sample_rate / fft_size
    sections = []
    for b in mask.bins:
        if b == 0:
            sections.append(design_dc_cut(1.5 * bin_hz, EDGE_CUT_DB, sample_rate))
        elif b == fft_size // 2:
            sections.append(design_nyquist_cut(sample_rate / 2.0 - 1.5 * bin_hz,
                                               EDGE_CUT_DB, sample_rate))
        else:
            sections.append(design_notch(b * bin_hz, q, sample_rate))
    return BiquadChain(sections)

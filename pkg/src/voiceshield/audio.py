"""Core audio containers and DSP primitives.

Everything downstream (masking, style transfer, reverberation, streaming)
sits on the operations in this module: WAV I/O, short-time Fourier analysis
and resynthesis, log-mel spectrograms, FFT convolution, and band-limited
resampling.  Samples are float64 mono in [-1, 1] at a caller-chosen rate;
the pipeline default is 48 kHz.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import AudioIOError, ValidationError

DEFAULT_SAMPLE_RATE = 48000

# Spectral floor applied before the log in mel().  Keeps silence finite.
MEL_FLOOR = 1e-10


def _as_samples(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValidationError(f"expected mono 1-D samples, got shape {a.shape}")
    return np.ascontiguousarray(a)


@dataclass
class Waveform:
    """Mono audio buffer: float64 samples plus their sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = _as_samples(self.samples)
        if not isinstance(self.sample_rate, (int, np.integer)) or self.sample_rate <= 0:
            raise ValidationError(f"bad sample rate {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)

    def validate(self):
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("waveform contains NaN or Inf")
        return self

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self.samples) else 0.0


def periodic_hann(n: int) -> np.ndarray:
    # periodic (DFT-even) variant: w[k] = 0.5 (1 - cos(2 pi k / n))
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def _check_cola(window: np.ndarray, hop: int) -> bool:
    """Constant-overlap-add check for the analysis window at the given hop."""
    n = len(window)
    span = 8 * n
    acc = np.zeros(span + n)
    for start in range(0, span, hop):
        acc[start:start + n] += window
    interior = acc[n:span - n]
    if len(interior) == 0:
        return False
    return float(np.ptp(interior)) <= 1e-8 * float(np.mean(interior))


@dataclass
class StftConfig:
    """Analysis parameters for stft()/istft().

    Defaults give 1025 frequency rows at 48 kHz with 75% overlap; the
    periodic Hann window satisfies constant overlap-add at that hop.
    """

    fft_size: int = 2048
    hop: int = 512
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.fft_size <= 0 or self.fft_size % 2 != 0:
            raise ValidationError(f"fft_size must be positive and even, got {self.fft_size}")
        if not (0 < self.hop <= self.fft_size):
            raise ValidationError(f"hop must be in (0, fft_size], got {self.hop}")
        if self.sample_rate <= 0:
            raise ValidationError(f"bad sample rate {self.sample_rate}")
        if not _check_cola(periodic_hann(self.fft_size), self.hop):
            raise ValidationError(
                f"window does not satisfy constant overlap-add at hop {self.hop}")
        return self

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        return periodic_hann(self.fft_size)

    def bin_frequency(self, i) -> np.ndarray:
        return np.asarray(i) * self.sample_rate / self.fft_size

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.fft_size:
            raise ValidationError(
                f"need at least fft_size={self.fft_size} samples, got {n_samples}")
        return 1 + (n_samples - self.fft_size) // self.hop


@dataclass
class Spectrogram:
    """Complex STFT, shape (n_bins, n_frames), plus the config that made it."""

    bins: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2 or self.bins.shape[0] != self.config.n_bins:
            raise ValidationError(
                f"spectrogram shape {self.bins.shape} does not match "
                f"fft_size {self.config.fft_size}")

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def copy(self) -> "Spectrogram":
        return Spectrogram(self.bins.copy(), self.config)


@dataclass
class MelSpectrogram:
    """Log-compressed mel energies, shape (n_bands, n_frames)."""

    values: np.ndarray
    n_bands: int
    fmin: float
    fmax: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.n_bands:
            raise ValidationError(
                f"mel shape {self.values.shape} does not match n_bands {self.n_bands}")


def frame_signal(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(n_frames, fft_size) view of hop-spaced frames.  Tail samples that do
    not fill a whole frame are dropped."""
    n = cfg.n_frames(len(samples))
    frames = sliding_window_view(samples, cfg.fft_size)[::cfg.hop]
    return frames[:n]


def stft(wave: Waveform, cfg: StftConfig | None = None) -> Spectrogram:
    """Windowed real FFT of hop-spaced frames.

    Linear in the input; istft(stft(x)) reproduces every covered sample
    except index 0 (the periodic Hann window is zero there).
    """
    cfg = cfg or StftConfig(sample_rate=wave.sample_rate)
    x = wave.samples
    if len(x) < cfg.fft_size:
        raise ValidationError(
            f"waveform too short for stft: {len(x)} < fft_size {cfg.fft_size}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite samples in stft input")
    frames = frame_signal(x, cfg) * cfg.window()
    bins = np.fft.rfft(frames, n=cfg.fft_size, axis=1).T
    return Spectrogram(bins, cfg)


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Plain overlap-add resynthesis normalized by the summed analysis window.

    Each frame's inverse transform is accumulated unwindowed, then divided
    by the overlap-added window.  For untouched spectra this reconstructs
    exactly wherever coverage is nonzero; for modified spectra it cancels
    per-frame window leakage that a squared-window synthesis would keep.
    Returns fft_size + (n_frames - 1) * hop samples unless `length` asks for
    a trim or zero-pad.  Positions with negligible window coverage (sample 0
    for the periodic Hann) come back as zero.
    """
    cfg = spec.config
    w = cfg.window()
    frames = np.fft.irfft(spec.bins.T, n=cfg.fft_size, axis=1)
    n_frames = frames.shape[0]
    out_len = cfg.fft_size + (n_frames - 1) * cfg.hop
    acc = np.zeros(out_len)
    wsum = np.zeros(out_len)
    for m in range(n_frames):
        start = m * cfg.hop
        acc[start:start + cfg.fft_size] += frames[m]
        wsum[start:start + cfg.fft_size] += w
    out = np.where(wsum > 1e-12, acc / np.maximum(wsum, 1e-12), 0.0)
    if length is not None:
        if length <= out_len:
            out = out[:length]
        else:
            out = np.concatenate([out, np.zeros(length - out_len)])
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bands: int, fft_size: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank, shape (n_bands, fft_size // 2 + 1).

    Band edges are equally spaced on the mel scale; each row is a triangle
    rising from edge b to a peak at edge b+1 and falling to edge b+2,
    evaluated at the FFT bin frequencies.  Rows are non-negative and
    unimodal; rows can be all-zero when the FFT grid is too coarse to hit a
    narrow triangle.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    if not (0.0 <= fmin < fmax <= sample_rate / 2.0 + 1e-9):
        raise ValidationError(f"bad mel range [{fmin}, {fmax}] at rate {sample_rate}")
    if n_bands < 1:
        raise ValidationError(f"n_bands must be >= 1, got {n_bands}")
    n_bins = fft_size // 2 + 1
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    freqs = np.arange(n_bins) * sample_rate / fft_size
    fb = np.zeros((n_bands, n_bins))
    for b in range(n_bands):
        lo, mid, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        fb[b] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel(spec: Spectrogram, n_bands: int = 80,
        fmin: float = 0.0, fmax: float | None = None,
        filterbank: np.ndarray | None = None) -> MelSpectrogram:
    """Log mel energies of an STFT magnitude: log(max(F |X|, floor)).

    Monotone: increasing any magnitude bin never decreases any output cell.
    """
    cfg = spec.config
    if fmax is None:
        fmax = cfg.sample_rate / 2.0
    if filterbank is None:
        filterbank = mel_filterbank(n_bands, cfg.fft_size, cfg.sample_rate, fmin, fmax)
    energies = filterbank @ spec.magnitude()
    values = np.log(np.maximum(energies, MEL_FLOOR))
    return MelSpectrogram(values, n_bands, fmin, fmax)


def convolve(wave: Waveform, impulse: np.ndarray,
             renormalize: bool = True) -> Waveform:
    """FFT convolution with an impulse response, truncated to the input length.

    If the raw result would peak above 1.0 (and `renormalize` is left on)
    the output is scaled back to the input's peak.  Silence stays silence.
    """
    h = np.asarray(impulse, dtype=np.float64)
    if h.ndim != 1 or len(h) == 0:
        raise ValidationError(f"impulse response must be non-empty 1-D, got shape {h.shape}")
    x = wave.samples
    if len(x) == 0:
        return Waveform(x.copy(), wave.sample_rate)
    n = len(x) + len(h) - 1
    nfft = 1 << max(1, (n - 1).bit_length())
    y = np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)[:len(x)]
    if renormalize:
        peak = np.max(np.abs(y))
        in_peak = wave.peak()
        if peak > 1.0 and peak > 0.0:
            y = y * (in_peak / peak)
    return Waveform(y, wave.sample_rate)


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to `target_rate`."""
    if target_rate <= 0:
        raise ValidationError(f"bad target rate {target_rate}")
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    g = np.gcd(int(wave.sample_rate), int(target_rate))
    up, down = target_rate // g, wave.sample_rate // g
    y = resample_poly(wave.samples, up, down)
    return Waveform(y, target_rate)


def load_wav(path: str | os.PathLike) -> Waveform:
    """Read a mono PCM16 or IEEE-float32 WAV file.

    Raises AudioIOError for missing/malformed files and unsupported
    encodings; multichannel input is rejected explicitly.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise AudioIOError(f"no such file: {path}")
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:  # scipy raises bare ValueError on bad headers
        raise AudioIOError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise AudioIOError(
            f"{path}: {data.shape[1]} channels; only mono input is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise AudioIOError(f"{path}: unsupported sample encoding {data.dtype}")
    return Waveform(samples, int(rate))


def save_wav(path: str | os.PathLike, wave: Waveform,
             encoding: str = "float32") -> None:
    """Write a mono WAV file as PCM16 or IEEE-float32.

    PCM16 quantizes with rounding (the round trip stays within 1 LSB) and
    clips anything beyond [-1, 1].
    """
    path = os.fspath(path)
    wave.validate()
    if encoding == "float32":
        data = wave.samples.astype(np.float32)
    elif encoding == "pcm16":
        scaled = np.round(wave.samples * 32767.0)
        data = np.clip(scaled, -32768, 32767).astype(np.int16)
    else:
        raise ValidationError(f"unknown encoding {encoding!r}")
    try:
        wavfile.write(path, wave.sample_rate, data)
    except OSError as exc:
        raise AudioIOError(f"cannot write WAV {path}: {exc}") from exc

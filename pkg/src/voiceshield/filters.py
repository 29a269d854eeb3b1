"""Causal second-order filter sections and stateful cascades.

Shared by the streaming notch realization of frequency masks, the
parametric EQ inside the style chain, and the real-time output path.
Designs follow the standard audio-EQ biquad recipes; first-order
shelving sections reuse the same coefficient container with the
second-order terms zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ValidationError


@dataclass(frozen=True)
class BiquadCoeffs:
    """Normalized (a0 = 1) transfer b / a with b = (b0, b1, b2), a = (1, a1, a2)."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    def as_ba(self):
        return (np.array([self.b0, self.b1, self.b2]),
                np.array([1.0, self.a1, self.a2]))

    def response(self, freqs_hz: np.ndarray, sample_rate: int) -> np.ndarray:
        """Complex frequency response at the given frequencies."""
        z = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=np.float64)
                   / sample_rate)
        num = self.b0 + self.b1 * z + self.b2 * z * z
        den = 1.0 + self.a1 * z + self.a2 * z * z
        return num / den


def _check_freq(f0: float, sample_rate: int):
    if not 0.0 < f0 < sample_rate / 2.0:
        raise ValidationError(f"center frequency {f0} Hz outside (0, Nyquist)")


def design_notch(f0: float, q: float, sample_rate: int) -> BiquadCoeffs:
    _check_freq(f0, sample_rate)
    if q <= 0:
        raise ValidationError("notch Q must be positive")
    w0 = 2.0 * np.pi * f0 / sample_rate
    alpha = np.sin(w0) / (2.0 * q)
    cw = np.cos(w0)
    a0 = 1.0 + alpha
    return BiquadCoeffs(1.0 / a0, -2.0 * cw / a0, 1.0 / a0,
                        -2.0 * cw / a0, (1.0 - alpha) / a0)


def design_peaking(f0: float, q: float, gain_db: float,
                   sample_rate: int) -> BiquadCoeffs:
    _check_freq(f0, sample_rate)
    if q <= 0:
        raise ValidationError("peaking Q must be positive")
    big_a = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / sample_rate
    alpha = np.sin(w0) / (2.0 * q)
    cw = np.cos(w0)
    a0 = 1.0 + alpha / big_a
    return BiquadCoeffs((1.0 + alpha * big_a) / a0, -2.0 * cw / a0,
                        (1.0 - alpha * big_a) / a0,
                        -2.0 * cw / a0, (1.0 - alpha / big_a) / a0)


def design_dc_cut(edge_hz: float, cut_db: float,
                  sample_rate: int) -> BiquadCoeffs:
    """First-order shelf: gain cut_db at DC, unity at Nyquist.

    Bilinear transform of (s + g*w1)/(s + w1), prewarped at the edge.
    """
    _check_freq(edge_hz, sample_rate)
    g = 10.0 ** (cut_db / 20.0)
    w1 = 2.0 * np.pi * edge_hz
    k = w1 / np.tan(np.pi * edge_hz / sample_rate)
    a0 = k + w1
    return BiquadCoeffs((k + g * w1) / a0, (-k + g * w1) / a0, 0.0,
                        (-k + w1) / a0, 0.0)


def design_nyquist_cut(edge_hz: float, cut_db: float,
                       sample_rate: int) -> BiquadCoeffs:
    """First-order shelf: gain cut_db at Nyquist, unity at DC."""
    _check_freq(edge_hz, sample_rate)
    g = 10.0 ** (cut_db / 20.0)
    w1 = 2.0 * np.pi * edge_hz
    k = w1 / np.tan(np.pi * edge_hz / sample_rate)
    a0 = k + w1
    return BiquadCoeffs((g * k + w1) / a0, (-g * k + w1) / a0, 0.0,
                        (-k + w1) / a0, 0.0)


class BiquadChain:
    """Sequential cascade with per-section state; causal, no lookahead.

    One instance serves one stream: process() consumes consecutive chunks
    (any length, including single samples) and is exactly equivalent to
    filtering the concatenation in one call.
    """

    def __init__(self, sections: list):
        if not sections:
            raise ValidationError("cascade needs at least one section")
        self.sections = list(sections)
        # (b0,b1,b2,a1,a2) per section, plus scipy-form arrays for chunks
        self._ba = [s.as_ba() for s in self.sections]
        self._state = np.zeros((len(self.sections), 2))

    def reset(self) -> None:
        self._state[:] = 0.0

    def process_sample(self, x: float) -> float:
        """Single-sample path, transposed direct form II."""
        st = self._state
        for i, s in enumerate(self.sections):
            y = s.b0 * x + st[i, 0]
            st[i, 0] = s.b1 * x - s.a1 * y + st[i, 1]
            st[i, 1] = s.b2 * x - s.a2 * y
            x = y
        return x

    def process(self, chunk: np.ndarray) -> np.ndarray:
        x = np.asarray(chunk, dtype=np.float64)
        if x.ndim != 1:
            raise ValidationError("chunk must be 1-D")
        if len(x) == 0:
            return x.copy()
        if len(x) == 1:
            return np.array([self.process_sample(float(x[0]))])
        for i, (b, a) in enumerate(self._ba):
            x, self._state[i] = lfilter(b, a, x, zi=self._state[i])
        return x

    def response(self, freqs_hz: np.ndarray, sample_rate: int) -> np.ndarray:
        h = np.ones(len(np.atleast_1d(freqs_hz)), dtype=np.complex128)
        for s in self.sections:
            h *= s.response(freqs_hz, sample_rate)
        return h

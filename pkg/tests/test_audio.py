import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voiceshield import (
    AudioIOError,
    Spectrogram,
    StftConfig,
    ValidationError,
    Waveform,
    convolve,
    istft,
    load_wav,
    mel,
    mel_filterbank,
    resample,
    save_wav,
    stft,
)
from voiceshield.audio import hz_to_mel, mel_to_hz, periodic_hann, MEL_FLOOR


# ---------------------------------------------------------------- oracles

def conv_bruteforce(x, h):
    """O(n*m) direct convolution, truncated to len(x)."""
    y = np.zeros(len(x))
    for n in range(len(x)):
        for m in range(len(h)):
            if 0 <= n - m < len(x):
                y[n] += x[n - m] * h[m]
    return y


def mel_filterbank_explicit(n_bands, fft_size, sample_rate):
    """Per-bin loop construction straight from the triangle definition."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    fmax = sample_rate / 2.0
    pts = [to_hz(to_mel(0.0) + (to_mel(fmax) - to_mel(0.0)) * i / (n_bands + 1))
           for i in range(n_bands + 2)]
    n_bins = fft_size // 2 + 1
    fb = np.zeros((n_bands, n_bins))
    for b in range(n_bands):
        lo, mid, hi = pts[b], pts[b + 1], pts[b + 2]
        for k in range(n_bins):
            f = k * sample_rate / fft_size
            if lo < f <= mid:
                fb[b, k] = (f - lo) / (mid - lo)
            elif mid < f < hi:
                fb[b, k] = (hi - f) / (hi - mid)
            elif f == lo == mid:
                fb[b, k] = 1.0
    return fb


def tone(freq, seconds=1.0, rate=48000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


# ------------------------------------------------------------------ stft

def test_tone_lands_in_expected_bin():
    # oracle: bin index = round(f * fft_size / rate) = round(1000*2048/48000) = 43
    assert round(1000 * 2048 / 48000) == 43
    spec = stft(tone(1000.0))
    mean_mag = spec.magnitude().mean(axis=1)
    assert int(np.argmax(mean_mag)) == 43


def test_round_trip_interior():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(48000) * 0.3
    w = Waveform(x)
    cfg = StftConfig()
    out = istft(stft(w, cfg))
    n = len(out)
    # exact everywhere covered except sample 0 (window is zero there)
    assert np.max(np.abs(out[1:] - x[1:n])) <= 1e-6
    interior = slice(cfg.fft_size, n - cfg.fft_size)
    assert np.max(np.abs(out[interior] - x[interior])) <= 1e-9


def test_round_trip_with_length_padding():
    rng = np.random.default_rng(8)
    x = rng.standard_normal(20000) * 0.2
    spec = stft(Waveform(x))
    out = istft(spec, length=20000)
    assert len(out) == 20000


def test_energy_conservation_parseval():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(48000) * 0.25
    cfg = StftConfig()
    spec = stft(Waveform(x), cfg)
    # one-sided spectrum: double interior bins, then Parseval per frame
    mag2 = np.abs(spec.bins) ** 2
    spectral = mag2[0] + mag2[-1] + 2.0 * mag2[1:-1].sum(axis=0)
    spectral = spectral.sum() / cfg.fft_size
    # oracle: direct windowed-frame energy in the time domain
    w = periodic_hann(cfg.fft_size)
    direct = 0.0
    for m in range(cfg.n_frames(len(x))):
        fr = x[m * cfg.hop:m * cfg.hop + cfg.fft_size] * w
        direct += np.sum(fr * fr)
    assert abs(spectral - direct) <= 1e-3 * direct


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 2.0), st.floats(0.1, 2.0))
def test_stft_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(4096)
    y = rng.standard_normal(4096)
    cfg = StftConfig()
    sx = stft(Waveform(x), cfg).bins
    sy = stft(Waveform(y), cfg).bins
    sxy = stft(Waveform(a * x + b * y), cfg).bins
    assert np.allclose(sxy, a * sx + b * sy, atol=1e-8)


def test_stft_rejects_short_and_nonfinite():
    with pytest.raises(ValidationError):
        stft(Waveform(np.zeros(100)))
    bad = np.zeros(4096)
    bad[5] = np.nan
    with pytest.raises(ValidationError):
        stft(Waveform(bad))


def test_stft_config_validation():
    with pytest.raises(ValidationError):
        StftConfig(fft_size=2048, hop=0)
    with pytest.raises(ValidationError):
        StftConfig(fft_size=2047)
    # hop with no constant overlap-add for the Hann window
    with pytest.raises(ValidationError):
        StftConfig(fft_size=2048, hop=700)
    StftConfig(fft_size=2048, hop=1024)  # 50% overlap is fine


# ------------------------------------------------------------------- mel

def test_filterbank_matches_explicit_construction():
    got = mel_filterbank(80, 2048, 48000)
    want = mel_filterbank_explicit(80, 2048, 48000)
    assert got.shape == (80, 1025)
    assert np.max(np.abs(got - want)) <= 1e-9


def test_filterbank_rows_nonnegative_unimodal():
    fb = mel_filterbank(80, 2048, 48000)
    assert np.all(fb >= 0.0)
    for row in fb:
        if not row.any():
            continue
        peak = int(np.argmax(row))
        assert np.all(np.diff(row[:peak + 1]) >= -1e-12)
        assert np.all(np.diff(row[peak:]) <= 1e-12)


def test_mel_scale_round_trip():
    f = np.array([0.0, 100.0, 1000.0, 8000.0, 24000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-6)


def test_mel_floor_on_silence():
    spec = stft(Waveform(np.zeros(8192)))
    m = mel(spec)
    assert np.allclose(m.values, np.log(MEL_FLOOR))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_mel_monotone_in_magnitude(seed):
    # raising any |X| cell never lowers any mel cell
    rng = np.random.default_rng(seed)
    cfg = StftConfig()
    mag = rng.uniform(0.0, 2.0, size=(cfg.n_bins, 4))
    spec = Spectrogram(mag.astype(np.complex128), cfg)
    base = mel(spec).values
    bumped = mag.copy()
    i = rng.integers(0, cfg.n_bins)
    j = rng.integers(0, 4)
    bumped[i, j] += rng.uniform(0.1, 3.0)
    after = mel(Spectrogram(bumped.astype(np.complex128), cfg)).values
    assert np.all(after - base >= -1e-12)


def test_mel_tone_band_dominates():
    m = mel(stft(tone(1000.0)))
    band_means = m.values.mean(axis=1)
    fb = mel_filterbank(80, 2048, 48000)
    # band whose filter peaks nearest 1 kHz should carry the most energy
    centers = np.array([np.argmax(r) for r in fb]) * 48000 / 2048
    expect = int(np.argmin(np.abs(centers - 1000.0)))
    assert abs(int(np.argmax(band_means)) - expect) <= 1


# -------------------------------------------------------------- convolve

def test_convolve_matches_bruteforce():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(400) * 0.2
    h = rng.standard_normal(31) * 0.1
    got = convolve(Waveform(x), h).samples
    want = conv_bruteforce(x, h)
    scale = max(1.0, np.max(np.abs(want)))
    assert np.max(np.abs(got - want)) <= 1e-9 * scale


def test_convolve_identity_impulse():
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.9, 0.9, 1000)
    y = convolve(Waveform(x), np.array([1.0])).samples
    assert np.max(np.abs(y - x)) <= 1e-12


def test_convolve_delay_impulse():
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.5, 0.5, 1000)
    h = np.zeros(11)
    h[10] = 1.0
    y = convolve(Waveform(x), h).samples
    assert np.allclose(y[10:], x[:-10], atol=1e-12)
    assert np.allclose(y[:10], 0.0, atol=1e-12)


def test_convolve_peak_renormalization():
    x = np.full(100, 0.9)
    h = np.array([1.0, 1.0, 1.0])  # raw peak would be 2.7
    y = convolve(Waveform(x), h)
    assert y.peak() <= 0.9 + 1e-12
    # renorm only triggers when the raw peak would clip
    y2 = convolve(Waveform(x * 0.1), h)
    assert abs(y2.peak() - 0.27) <= 1e-9


def test_convolve_silence_stays_silence():
    y = convolve(Waveform(np.zeros(500)), np.array([0.5, 0.25]))
    assert y.peak() == 0.0


def test_convolve_rejects_empty_impulse():
    with pytest.raises(ValidationError):
        convolve(Waveform(np.zeros(10)), np.array([]))


# -------------------------------------------------------------- resample

def test_resample_round_trip_preserves_lowband_tone():
    w = tone(440.0, seconds=1.0)
    down = resample(w, 8000)
    assert down.sample_rate == 8000
    assert len(down.samples) == 8000
    back = resample(down, 48000)
    assert len(back.samples) == 48000
    # compare away from filter edge transients
    a, b = 2000, 46000
    err = np.max(np.abs(back.samples[a:b] - w.samples[a:b]))
    assert err <= 0.01


def test_resample_removes_band_above_target_nyquist():
    w = tone(6000.0, seconds=0.5)
    down = resample(w, 8000)  # 6 kHz exceeds the 4 kHz Nyquist
    rms = np.sqrt(np.mean(down.samples ** 2))
    assert rms <= 0.01


def test_resample_identity_rate():
    w = tone(100.0, seconds=0.1)
    same = resample(w, 48000)
    assert np.array_equal(same.samples, w.samples)


def test_resample_rejects_bad_rate():
    with pytest.raises(ValidationError):
        resample(tone(100.0, 0.1), 0)


# ------------------------------------------------------------------- I/O

def test_wav_float32_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    w = Waveform(rng.uniform(-0.99, 0.99, 4800))
    p = tmp_path / "f32.wav"
    save_wav(p, w, encoding="float32")
    back = load_wav(p)
    assert back.sample_rate == 48000
    assert np.max(np.abs(back.samples - w.samples)) <= 1e-7


def test_wav_pcm16_round_trip_within_one_lsb(tmp_path):
    w = Waveform(np.full(1000, 0.5))
    p = tmp_path / "p16.wav"
    save_wav(p, w, encoding="pcm16")
    back = load_wav(p)
    assert np.max(np.abs(back.samples - 0.5)) <= 2.0 ** -15


def test_wav_multichannel_rejected(tmp_path):
    from scipy.io import wavfile
    p = tmp_path / "stereo.wav"
    wavfile.write(p, 48000, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(AudioIOError):
        load_wav(p)


def test_wav_malformed_header_rejected(tmp_path):
    p = tmp_path / "junk.wav"
    p.write_bytes(b"RIFFgarbage-not-a-wav-file")
    with pytest.raises(AudioIOError):
        load_wav(p)


def test_wav_missing_file_rejected(tmp_path):
    with pytest.raises(AudioIOError):
        load_wav(tmp_path / "nope.wav")


def test_wav_unsupported_encoding_rejected(tmp_path):
    from scipy.io import wavfile
    p = tmp_path / "i32.wav"
    wavfile.write(p, 48000, np.zeros(100, dtype=np.int32))
    with pytest.raises(AudioIOError):
        load_wav(p)


def test_save_rejects_nonfinite(tmp_path):
    bad = Waveform(np.zeros(100))
    bad.samples[3] = np.inf
    with pytest.raises(ValidationError):
        save_wav(tmp_path / "x.wav", bad)


def test_waveform_rejects_2d():
    with pytest.raises(ValidationError):
        Waveform(np.zeros((2, 100)))

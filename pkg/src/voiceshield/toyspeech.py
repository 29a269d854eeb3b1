"""Deterministic synthetic multi-speaker speech.

Not a TTS system: utterances are harmonic pulse trains shaped by cascaded
formant resonators, chopped into short random "phones".  The point is a
hermetic corpus that carries stable per-speaker identity (f0, formant
layout, vibrato) so encoders can be trained and the protection pipeline
exercised without any external data.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .audio import DEFAULT_SAMPLE_RATE, Waveform, load_wav, save_wav
from .errors import AudioIOError, ValidationError

F0_RANGE = (90.0, 300.0)
FORMANT_RANGES = ((350.0, 900.0), (1100.0, 2300.0), (2600.0, 3800.0))
BANDWIDTH_RANGES = ((60.0, 120.0), (80.0, 160.0), (100.0, 200.0))
VIBRATO_RATE_RANGE = (4.0, 7.0)
VIBRATO_DEPTH_RANGE = (10.0, 40.0)  # cents

PHONE_LEN_RANGE = (0.080, 0.240)  # seconds
PHONE_F0_JITTER = 0.20
PHONE_FORMANT_JITTER = 0.15

# harmonics above this add nothing the formants care about
SOURCE_BANDLIMIT_HZ = 5000.0


@dataclass
class SpeakerProfile:
    f0_base: float
    formants: tuple  # 3 center frequencies, Hz, strictly increasing
    bandwidths: tuple  # matching -3 dB bandwidths, Hz
    vibrato_rate: float  # Hz
    vibrato_depth: float  # cents
    seed: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.formants = tuple(float(f) for f in self.formants)
        self.bandwidths = tuple(float(b) for b in self.bandwidths)
        self.validate()

    def validate(self):
        if not (F0_RANGE[0] <= self.f0_base <= F0_RANGE[1]):
            raise ValidationError(f"f0_base {self.f0_base} outside {F0_RANGE}")
        if len(self.formants) != 3 or len(self.bandwidths) != 3:
            raise ValidationError("exactly 3 formants with bandwidths required")
        if list(self.formants) != sorted(self.formants) or \
                len(set(self.formants)) != 3:
            raise ValidationError(f"formants must be strictly increasing: {self.formants}")
        if self.formants[-1] >= self.sample_rate / 2:
            raise ValidationError("formant above Nyquist")
        return self


def sample_speaker(seed: int) -> SpeakerProfile:
    """Draw a speaker identity.  Same seed, same profile."""
    rng = np.random.default_rng(seed)
    f0 = rng.uniform(*F0_RANGE)
    formants = tuple(rng.uniform(lo, hi) for lo, hi in FORMANT_RANGES)
    bws = tuple(rng.uniform(lo, hi) for lo, hi in BANDWIDTH_RANGES)
    rate = rng.uniform(*VIBRATO_RATE_RANGE)
    depth = rng.uniform(*VIBRATO_DEPTH_RANGE)
    return SpeakerProfile(f0, formants, bws, rate, depth, seed=int(seed))


def _resonator_coeffs(center_hz: float, bandwidth_hz: float, sr: int):
    """Two-pole resonance normalized to unit DC gain, so a cascade keeps
    every formant visible as a local spectral peak."""
    r = np.exp(-np.pi * bandwidth_hz / sr)
    omega = 2.0 * np.pi * center_hz / sr
    a = np.array([1.0, -2.0 * r * np.cos(omega), r * r])
    return np.array([a.sum()]), a


def gen_utterance(profile: SpeakerProfile, duration_s: float, seed: int) -> Waveform:
    """Synthesize one utterance.

    Phones of 80-240 ms tile the requested duration (3-8 of them at the
    sub-second durations this was sized for); each phone perturbs F0 by
    +-20% and the formants by +-15%.  Output peak is kept at or below 0.9.
    """
    if duration_s < 0.5:
        raise ValidationError(f"duration_s must be >= 0.5, got {duration_s}")
    sr = profile.sample_rate
    n = int(round(duration_s * sr))
    rng = np.random.default_rng(seed)

    # phone boundaries
    bounds = [0]
    while bounds[-1] < n:
        seg = int(rng.uniform(*PHONE_LEN_RANGE) * sr)
        bounds.append(min(n, bounds[-1] + seg))
    starts, stops = bounds[:-1], bounds[1:]

    # per-sample F0 track: per-phone jitter times vibrato
    f0 = np.empty(n)
    for a, b in zip(starts, stops):
        f0[a:b] = profile.f0_base * (1.0 + rng.uniform(-PHONE_F0_JITTER, PHONE_F0_JITTER))
    t = np.arange(n) / sr
    vib = 2.0 ** ((profile.vibrato_depth / 1200.0) * np.sin(2 * np.pi * profile.vibrato_rate * t))
    f0 = f0 * vib

    # harmonic source, band-limited, 1/k rolloff
    phase = np.cumsum(2.0 * np.pi * f0 / sr)
    min_f0 = float(np.min(f0))
    n_harm = max(1, int(SOURCE_BANDLIMIT_HZ / max(min_f0, 1.0)))
    source = np.zeros(n)
    for k in range(1, n_harm + 1):
        source += np.cos(k * phase) / k

    # formant shaping, phone by phone, filter state carried across edges
    out = np.empty(n)
    n_res = len(profile.formants)
    zis = [np.zeros(2) for _ in range(n_res)]
    for a, b in zip(starts, stops):
        centers = np.array(profile.formants) * \
            (1.0 + rng.uniform(-PHONE_FORMANT_JITTER, PHONE_FORMANT_JITTER, size=n_res))
        centers = np.sort(centers)
        seg = source[a:b]
        for i in range(n_res):
            bcoef, acoef = _resonator_coeffs(centers[i], profile.bandwidths[i], sr)
            seg, zis[i] = lfilter(bcoef, acoef, seg, zi=zis[i])
        out[a:b] = seg

    # radiation-style pre-emphasis lifts the upper formants out of the
    # 1/k source rolloff so each resonance is visible in the spectrum
    out = np.concatenate([[out[0]], np.diff(out)])

    # per-phone level with short raised-cosine edge fades
    fade = int(0.010 * sr)
    env = np.empty(n)
    for a, b in zip(starts, stops):
        env[a:b] = rng.uniform(0.5, 1.0)
    ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(fade) / fade))
    for a in starts[1:]:
        lo = max(0, a - fade // 2)
        hi = min(n, a + fade // 2)
        if hi - lo >= 2:
            mid = 0.5 * (env[lo] + env[hi - 1])
            env[lo:hi] = np.linspace(env[lo], env[hi - 1], hi - lo)
    out = out * env
    k = min(fade, n // 2)
    out[:k] *= ramp[:k]
    out[n - k:] *= ramp[:k][::-1]

    peak = np.max(np.abs(out))
    target = 0.6 + 0.25 * rng.uniform()
    if peak > 0.0:
        out = out * (target / peak)
    return Waveform(out, sr)


# ---------------------------------------------------------------- corpus

@dataclass
class Utterance:
    speaker_id: str
    utt_id: str
    wave: Waveform


@dataclass
class Corpus:
    utterances: list = field(default_factory=list)

    def validate(self):
        for u in self.utterances:
            if u.wave.duration_s < 1.0 - 1e-9:
                raise ValidationError(
                    f"utterance {u.speaker_id}/{u.utt_id} shorter than 1.0 s")
            u.wave.validate()
        return self

    def speakers(self) -> list:
        seen = dict.fromkeys(u.speaker_id for u in self.utterances)
        return list(seen)

    def by_speaker(self, speaker_id: str) -> list:
        return [u for u in self.utterances if u.speaker_id == speaker_id]

    def total_seconds(self, speaker_id: str | None = None) -> float:
        us = self.utterances if speaker_id is None else self.by_speaker(speaker_id)
        return sum(u.wave.duration_s for u in us)


def build_corpus(n_speakers: int, utts_per_speaker: int, duration_s: float,
                 seed: int) -> Corpus:
    """Generate a corpus in memory.  Deterministic given the seed."""
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValidationError("need at least one speaker and one utterance")
    corpus = Corpus()
    for i in range(n_speakers):
        profile = sample_speaker(seed * 1_000_003 + i)
        sid = f"spk{i:03d}"
        for j in range(utts_per_speaker):
            utt_seed = seed * 1_000_003 + i * 1009 + j + 17
            wave = gen_utterance(profile, duration_s, utt_seed)
            corpus.utterances.append(Utterance(sid, f"utt{j:03d}", wave))
    return corpus.validate()


def corpus_hash(corpus: Corpus) -> str:
    """sha256 over speaker/utterance ids and float32 sample bytes."""
    h = hashlib.sha256()
    for u in corpus.utterances:
        h.update(u.speaker_id.encode())
        h.update(u.utt_id.encode())
        h.update(np.int64(u.wave.sample_rate).tobytes())
        h.update(u.wave.samples.astype(np.float32).tobytes())
    return h.hexdigest()


def save_corpus(corpus: Corpus, root: str | os.PathLike) -> None:
    """Write `<root>/<speaker_id>/<utt_id>.wav` plus manifest.json."""
    root = os.fspath(root)
    os.makedirs(root, exist_ok=True)
    entries = []
    for u in corpus.utterances:
        d = os.path.join(root, u.speaker_id)
        os.makedirs(d, exist_ok=True)
        rel = os.path.join(u.speaker_id, u.utt_id + ".wav")
        save_wav(os.path.join(root, rel), u.wave, encoding="float32")
        entries.append({
            "speaker": u.speaker_id,
            "utt": u.utt_id,
            "path": rel,
            "seconds": round(u.wave.duration_s, 6),
        })
    manifest = {"sample_rate": corpus.utterances[0].wave.sample_rate if entries else 0,
                "entries": entries}
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_corpus(root: str | os.PathLike) -> Corpus:
    root = os.fspath(root)
    mpath = os.path.join(root, "manifest.json")
    if not os.path.exists(mpath):
        raise AudioIOError(f"no manifest.json under {root}")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise AudioIOError(f"cannot read manifest {mpath}: {exc}") from exc
    corpus = Corpus()
    for e in manifest.get("entries", []):
        wave = load_wav(os.path.join(root, e["path"]))
        if abs(wave.duration_s - float(e["seconds"])) > 1.0 / wave.sample_rate + 1e-6:
            raise ValidationError(
                f"manifest duration {e['seconds']} does not match audio "
                f"{wave.duration_s:.6f} for {e['path']}")
        corpus.utterances.append(Utterance(e["speaker"], e["utt"], wave))
    return corpus.validate()

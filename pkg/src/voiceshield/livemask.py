"""Real-time protection: one calibrated profile, then causal streaming.

Offline, a speaker's corpus is distilled into a universal frequency
mask (bins whose removal bends the log-mel representation the most,
summed over utterances) and a universal impulse response (sign-PGD
against the whole corpus at once, with a smaller step and a longer
budget than the per-utterance refiner).  Live audio then runs through
the notch cascade and a direct-form FIR with that impulse response;
both are strictly causal, so the only latency is the FIR's own length.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .audio import StftConfig, Waveform, stft
from .encoders import (EnsembleConfig, distance_grad, ensemble_embed,
                       ensemble_pullback, weighted_embedding_loss)
from .errors import AudioIOError, ValidationError
from .filters import BiquadChain
from .reverb import (MAX_RIR_MS, RirOptConfig, RirOptTrace, RirSelectConfig,
                     _mean_cosine)
from .specmask import (NOTCH_Q_DEFAULT, FrequencyMask, GreedyMaskConfig,
                       compile_notch_cascade, mel_deltas, power_candidates)
from .toyspeech import Corpus, corpus_hash

PROFILE_VERSION = 1
LIVE_MASK_K = 16
CALIBRATION_MIN_SECONDS = 150.0
LIVE_MAX_ITERS = 2000
LIVE_ALPHA_DIV = 30.0  # step = epsilon / 30 for the corpus-level search


# ------------------------------------------------------- calibration

def calibrate_mask(corpus: Corpus, k: int = LIVE_MASK_K,
                   tau_p_rel: float = 0.01):
    """Universal masked bins: per-bin mel deviations summed over the corpus.

    Candidacy is the union of each utterance's power-thresholded rows;
    scores add across utterances, ties go to the lower bin index.  A
    single-utterance corpus reproduces the per-utterance greedy mask.
    """
    if not corpus.utterances:
        raise ValidationError("cannot calibrate on an empty corpus")
    total = corpus.total_seconds()
    if total < CALIBRATION_MIN_SECONDS:
        warnings.warn(
            f"calibration corpus holds {total:.1f} s, below the recommended "
            f"{CALIBRATION_MIN_SECONDS:.0f} s", UserWarning, stacklevel=2)
    cfg = GreedyMaskConfig(k=k, tau_p_rel=tau_p_rel)
    specs = [stft(u.wave, StftConfig(sample_rate=u.wave.sample_rate))
             for u in corpus.utterances]
    union = sorted(set().union(*[map(int, power_candidates(s, cfg))
                                 for s in specs]))
    if len(union) < k:
        raise ValidationError(
            f"only {len(union)} rows pass the power threshold, need k={k}")
    agg = np.zeros(len(union))
    for s in specs:
        agg += mel_deltas(s, union)
    order = np.lexsort((np.asarray(union), -agg))
    return tuple(sorted(int(union[i]) for i in order[:k]))


def _notch_filtered(corpus: Corpus, mask: FrequencyMask, notch_q: float):
    out = []
    for u in corpus.utterances:
        chain = compile_notch_cascade(mask, u.wave.sample_rate,
                                      StftConfig().fft_size, q=notch_q)
        out.append(Waveform(chain.process(u.wave.samples), u.wave.sample_rate))
    return out


def _conv_trim_samples(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return fftconvolve(x, taps)[:len(x)]


def _centroid_target(pool: Corpus, centroids, ens: EnsembleConfig,
                     excluded_speakers):
    cands = [u for u in pool.utterances
             if u.speaker_id not in excluded_speakers]
    if len({u.speaker_id for u in cands}) < 2:
        raise ValidationError(
            "target pool needs at least 2 speakers besides the calibrated one")
    best, best_score = None, np.inf
    for u in cands:
        score = _mean_cosine(ensemble_embed(ens, u.wave), centroids)
        if score < best_score:
            best, best_score = u, score
    return best, best_score


@dataclass
class UniversalRir:
    """Corpus-level refinement output plus the choices that shaped it."""

    taps: np.ndarray
    trace: RirOptTrace
    seed_source: str
    target_speaker: str
    target_score: float


def calibrate_rir(corpus: Corpus, masked_bins, seeds, pool,
                  ens: EnsembleConfig, cfg: RirOptConfig | None = None,
                  select_cfg: RirSelectConfig | None = None,
                  notch_q: float = NOTCH_Q_DEFAULT) -> UniversalRir:
    """One impulse response serving a whole corpus of notch-filtered audio.

    The objective is the per-utterance refinement objective summed over
    the corpus, with one shared target chosen against the corpus
    centroid embedding.  The unset step defaults to epsilon/30 and the
    budget to 2000 iterations: slower, longer, corpus-wide.
    """
    if not corpus.utterances:
        raise ValidationError("cannot calibrate on an empty corpus")
    if not seeds:
        raise ValidationError("need at least one RIR seed")
    cfg = cfg or RirOptConfig(max_iters=LIVE_MAX_ITERS)
    select_cfg = select_cfg or RirSelectConfig()
    mask = FrequencyMask(tuple(masked_bins), len(masked_bins))
    filtered = _notch_filtered(corpus, mask, notch_q)
    raws = [u.wave for u in corpus.utterances]
    n_enc = len(ens.encoders)

    embs_raw = [ensemble_embed(ens, w) for w in raws]
    centroids = [np.mean([e[i] for e in embs_raw], axis=0)
                 for i in range(n_enc)]
    target, target_score = _centroid_target(
        pool, centroids, ens, set(corpus.speakers()))
    embs_tgt = ensemble_embed(ens, target.wave)

    # corpus-mean displacement objective picks the seed to refine
    def mean_objective(seed):
        losses = [weighted_embedding_loss(
            ens.weights,
            ensemble_embed(ens, Waveform(
                _conv_trim_samples(f.samples, seed.taps), f.sample_rate)),
            embs_raw[i]) for i, f in enumerate(filtered)]
        return float(np.mean(losses)) - select_cfg.lambda_l * seed.duration_ms

    scores = [mean_objective(s) for s in seeds]
    best = 0
    for i in range(1, len(seeds)):
        s, b = seeds[i], seeds[best]
        if (scores[i] > scores[best]
                or (scores[i] == scores[best]
                    and (s.duration_ms < b.duration_ms
                         or (s.duration_ms == b.duration_ms
                             and s.source < b.source)))):
            best = i
    h_star = seeds[best]

    taps0 = h_star.taps
    eps = cfg.epsilon_rel * float(np.max(np.abs(taps0)))
    alpha = eps / LIVE_ALPHA_DIV if cfg.alpha is None else cfg.alpha
    lam = cfg.lambda_target

    delta = np.zeros_like(taps0)
    best_j = [np.inf] * n_enc
    stall = [0] * n_enc
    frozen = [False] * n_enc
    frozen_at = [None] * n_enc
    trace = RirOptTrace(epsilon=eps, alpha=alpha, frozen_at=frozen_at)

    for it in range(cfg.max_iters):
        # phase one: corpus-summed per-encoder objective, caches kept
        j_enc = np.zeros(n_enc)
        states = []
        for i, f in enumerate(filtered):
            y = Waveform(_conv_trim_samples(f.samples, taps0 + delta),
                         f.sample_rate)
            embs_y, pull = ensemble_pullback(ens, y)
            for e in range(n_enc):
                j_enc[e] += ens.weights[e] * (
                    float(np.linalg.norm(embs_y[e] - embs_tgt[e]))
                    - lam * float(np.linalg.norm(embs_y[e] - embs_raw[i][e])))
            states.append((f.samples, embs_y, pull, embs_raw[i]))
        for e in range(n_enc):
            if frozen[e]:
                continue
            if j_enc[e] < best_j[e]:
                best_j[e] = j_enc[e]
                stall[e] = 0
            else:
                stall[e] += 1
                if stall[e] >= cfg.k_c:
                    frozen[e] = True
                    frozen_at[e] = it
        trace.entries.append({
            "iteration": it,
            "j_total": float(np.sum(j_enc)),
            "j_encoders": [float(j) for j in j_enc],
            "frozen": list(frozen),
            "delta_linf": float(np.max(np.abs(delta))),
        })
        if all(frozen):
            break
        # phase two: gradient from the surviving encoders only, so a
        # freeze decided this iteration already silences its term
        grad = np.zeros_like(taps0)
        for xs, embs_y, pull, embs_r in states:
            g_embs = [None if frozen[e] else
                      ens.weights[e] * (distance_grad(embs_y[e], embs_tgt[e])
                                        - lam * distance_grad(embs_y[e],
                                                              embs_r[e]))
                      for e in range(n_enc)]
            g_y = pull(g_embs)
            n = len(xs)
            grad += fftconvolve(g_y, xs[::-1])[n - 1:n - 1 + len(taps0)]
        delta = np.clip(delta - alpha * np.sign(grad), -eps, eps)

    trace.final_delta_linf = float(np.max(np.abs(delta)))
    return UniversalRir(taps0 + delta, trace, h_star.source,
                        target.speaker_id, target_score)


# ----------------------------------------------------------- profile

@dataclass
class LiveMaskProfile:
    """Everything the streaming processor needs, plus how it was made."""

    sample_rate: int
    masked_bins: tuple
    notch_q: float
    rir: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.masked_bins = tuple(int(b) for b in self.masked_bins)
        self.rir = np.asarray(self.rir, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValidationError(f"bad sample rate {self.sample_rate}")
        if len(set(self.masked_bins)) != len(self.masked_bins):
            raise ValidationError("masked_bins must be unique")
        if not (self.notch_q > 0):
            raise ValidationError(f"notch_q must be positive, got {self.notch_q}")
        if self.rir.ndim != 1 or len(self.rir) == 0:
            raise ValidationError("universal rir must be non-empty 1-D")
        if not np.all(np.isfinite(self.rir)):
            raise ValidationError("universal rir contains NaN or Inf")
        limit = int(MAX_RIR_MS * 1e-3 * self.sample_rate)
        if len(self.rir) > limit:
            raise ValidationError(
                f"universal rir has {len(self.rir)} taps, limit {limit}")

    @property
    def k(self) -> int:
        return len(self.masked_bins)


def calibrate_profile(corpus: Corpus, seeds, pool, ens: EnsembleConfig,
                      k: int = LIVE_MASK_K, notch_q: float = NOTCH_Q_DEFAULT,
                      tau_p_rel: float = 0.01,
                      opt: RirOptConfig | None = None,
                      select_cfg: RirSelectConfig | None = None) -> LiveMaskProfile:
    """Full calibration: universal mask, universal RIR, replay metadata."""
    opt = opt or RirOptConfig(max_iters=LIVE_MAX_ITERS)
    select_cfg = select_cfg or RirSelectConfig()
    bins = calibrate_mask(corpus, k=k, tau_p_rel=tau_p_rel)
    ur = calibrate_rir(corpus, bins, seeds, pool, ens, cfg=opt,
                       select_cfg=select_cfg, notch_q=notch_q)
    sr = corpus.utterances[0].wave.sample_rate
    meta = {
        "corpus_hash": corpus_hash(corpus),
        "speakers": corpus.speakers(),
        "seeds": {"opt_seed": opt.seed},
        "config": {
            "k": k,
            "tau_p_rel": tau_p_rel,
            "notch_q": notch_q,
            "epsilon_rel": opt.epsilon_rel,
            "alpha": opt.alpha,
            "max_iters": opt.max_iters,
            "k_c": opt.k_c,
            "lambda_target": opt.lambda_target,
            "lambda_l": select_cfg.lambda_l,
        },
        "rir_source": ur.seed_source,
        "target_speaker": ur.target_speaker,
    }
    return LiveMaskProfile(sr, bins, notch_q, ur.taps, meta)


def _round9(x: float) -> float:
    return float(f"{float(x):.9g}")


def save_profile(profile: LiveMaskProfile, path) -> None:
    """Canonical JSON: sorted keys, taps at 9 significant digits."""
    doc = {
        "version": PROFILE_VERSION,
        "sample_rate": profile.sample_rate,
        "masked_bins": list(profile.masked_bins),
        "notch_q": _round9(profile.notch_q),
        "rir": [_round9(t) for t in profile.rir],
        "meta": profile.meta,
    }
    with open(os.fspath(path), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(doc: dict, name: str, kind) -> object:
    if name not in doc:
        raise ValidationError(f"profile is missing field {name!r}")
    value = doc[name]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ValidationError(
            f"profile field {name!r} has type {type(value).__name__}")
    return value


def load_profile(path) -> LiveMaskProfile:
    try:
        with open(os.fspath(path)) as f:
            doc = json.load(f)
    except OSError as exc:
        raise AudioIOError(f"cannot read profile {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"profile {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("profile root must be a JSON object")
    version = _require(doc, "version", int)
    if version != PROFILE_VERSION:
        raise ValidationError(
            f"profile version {version} is not supported (want {PROFILE_VERSION})")
    sr = _require(doc, "sample_rate", int)
    bins = _require(doc, "masked_bins", list)
    if not all(isinstance(b, int) and not isinstance(b, bool) for b in bins):
        raise ValidationError("profile field 'masked_bins' must hold integers")
    q = _require(doc, "notch_q", (int, float))
    rir = _require(doc, "rir", list)
    if not all(isinstance(t, (int, float)) and not isinstance(t, bool)
               for t in rir):
        raise ValidationError("profile field 'rir' must hold numbers")
    meta = _require(doc, "meta", dict)
    return LiveMaskProfile(sr, tuple(bins), float(q),
                           np.array(rir, dtype=np.float64), meta)


# --------------------------------------------------------- streaming

@dataclass
class StreamState:
    """Causal per-stream state: notch memories plus the FIR delay line."""

    chain: BiquadChain
    fir_taps: np.ndarray
    fir_zi: np.ndarray
    samples_processed: int = 0


def make_stream(profile: LiveMaskProfile) -> StreamState:
    mask = FrequencyMask(tuple(sorted(profile.masked_bins)),
                         len(profile.masked_bins))
    chain = compile_notch_cascade(mask, profile.sample_rate,
                                  StftConfig().fft_size, q=profile.notch_q)
    taps = np.asarray(profile.rir, dtype=np.float64)
    return StreamState(chain, taps, np.zeros(len(taps) - 1))


def stream_process(state: StreamState, chunk) -> np.ndarray:
    """Filter one ordered chunk; output sample n sees input only up to n."""
    x = np.asarray(chunk, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise ValidationError(f"chunk must be non-empty 1-D, got shape {x.shape}")
    y = state.chain.process(x)
    if len(state.fir_zi):
        y, state.fir_zi = lfilter(state.fir_taps, [1.0], y, zi=state.fir_zi)
    else:
        y = state.fir_taps[0] * y
    state.samples_processed += len(x)
    return y

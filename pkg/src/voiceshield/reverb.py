"""Room-impulse-response stage: seed preparation, selection, refinement.

Seeds are short measured or synthetic impulse responses, clipped to the
echo-threshold length so the reverb reads as coloration rather than a
distinct repeat.  Selection scores each seed by how far convolution
pushes the ensemble embeddings from the original voice, minus a length
penalty.  Refinement then runs sign projected-gradient steps on an
additive tap perturbation, pulling the embeddings toward a deliberately
dissimilar target speaker while keeping the perturbation inside an
l-infinity box.  Encoders whose term of the objective stops improving
are frozen one by one so no single model dominates the search.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .audio import StftConfig, Waveform, convolve, load_wav, resample, stft
from .encoders import (EnsembleConfig, distance_grad, ensemble_embed,
                       ensemble_loss, ensemble_pullback)
from .errors import ValidationError
from .specmask import FrequencyMask, GreedyMaskConfig, apply_mask, greedy_select
from .styler import (StyleTransferConfig, StyleVector, optimize_style_traced,
                     spectrogram_distance)

MAX_RIR_MS = 30.0
ONSET_REL = 0.1
FADE_FRAC = 0.05
PIPELINE_RATE = 48000


@dataclass
class RirSeed:
    """Clipped, peak-normalized impulse response at the pipeline rate."""

    taps: np.ndarray
    source: str
    sample_rate: int = PIPELINE_RATE

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or len(self.taps) == 0:
            raise ValidationError(f"taps must be non-empty 1-D, got shape {self.taps.shape}")
        if not np.all(np.isfinite(self.taps)):
            raise ValidationError(f"seed {self.source!r} contains NaN or Inf")
        if self.duration_ms > MAX_RIR_MS + 1e-9:
            raise ValidationError(
                f"seed {self.source!r} is {self.duration_ms:.2f} ms, limit {MAX_RIR_MS}")
        peak = float(np.max(np.abs(self.taps)))
        if abs(peak - 1.0) > 1e-6:
            raise ValidationError(f"seed {self.source!r} peak {peak} is not 1")

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self.taps) / self.sample_rate


@dataclass
class RirSelectConfig:
    """Length penalty (loss units per millisecond) for seed selection."""

    lambda_l: float = 0.01

    def __post_init__(self):
        if not (self.lambda_l >= 0.0):
            raise ValidationError(f"lambda_l must be >= 0, got {self.lambda_l}")


@dataclass
class RirOptConfig:
    """Sign-PGD settings for tap refinement.

    The box radius is epsilon_rel times the seed's peak tap; alpha
    defaults to a tenth of that radius.
    """

    epsilon_rel: float = 0.3
    alpha: float | None = None
    max_iters: int = 500
    k_c: int = 20
    lambda_target: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (self.epsilon_rel > 0.0):
            raise ValidationError(f"epsilon_rel must be positive, got {self.epsilon_rel}")
        if self.alpha is not None and not (self.alpha >= 0.0):
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.max_iters < 0:
            raise ValidationError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.k_c < 1:
            raise ValidationError(f"k_c must be >= 1, got {self.k_c}")
        if not (self.lambda_target >= 0.0):
            raise ValidationError(f"lambda_target must be >= 0, got {self.lambda_target}")


@dataclass
class TargetSample:
    """A pool utterance chosen for being unlike the protected voice."""

    wave: Waveform
    speaker_id: str
    score: float  # mean per-encoder cosine similarity to the protected input


# ------------------------------------------------------------- seeds

def _prepare_one(wave: Waveform, source: str) -> RirSeed:
    if wave.sample_rate != PIPELINE_RATE:
        wave = resample(wave, PIPELINE_RATE)
    x = wave.samples
    peak = float(np.max(np.abs(x))) if len(x) else 0.0
    if peak < 1e-12:
        raise ValidationError(f"impulse file {source!r} is silent")
    x = x / peak
    onset = int(np.argmax(np.abs(x) >= ONSET_REL))
    clip = x[onset:onset + int(MAX_RIR_MS * 1e-3 * PIPELINE_RATE)].copy()
    n_fade = int(round(FADE_FRAC * len(clip)))
    if n_fade >= 1:
        clip[len(clip) - n_fade:] *= 1.0 - np.arange(1, n_fade + 1) / n_fade
    peak = float(np.max(np.abs(clip)))
    if peak < 1e-12:
        raise ValidationError(f"impulse file {source!r} degenerates to silence")
    return RirSeed(clip / peak, source)


def prepare_rir_seeds(directory) -> list:
    """Load every WAV in the directory as a clipped, faded, unit-peak seed."""
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(".wav"))
    if not names:
        raise ValidationError(f"no WAV files in {os.fspath(directory)!r}")
    seeds = []
    for name in names:
        wave = load_wav(os.path.join(directory, name))
        seeds.append(_prepare_one(wave, os.path.splitext(name)[0]))
    return seeds


# --------------------------------------------------------- selection

def _conv_trim(x: Waveform, taps: np.ndarray) -> Waveform:
    return convolve(x, taps, renormalize=False)


def rir_objective(seed: RirSeed, x_out: Waveform, x_in: Waveform,
                  ens: EnsembleConfig, cfg: RirSelectConfig) -> float:
    """Embedding displacement from x_in minus the length penalty."""
    return ensemble_loss(ens, _conv_trim(x_out, seed.taps), x_in) \
        - cfg.lambda_l * seed.duration_ms


def select_rir_scored(seeds, x_out: Waveform, x_in: Waveform,
                      ens: EnsembleConfig, cfg: RirSelectConfig):
    """(winning seed, its score, all scores in seed order)."""
    if not seeds:
        raise ValidationError("need at least one RIR seed")
    scores = [rir_objective(s, x_out, x_in, ens, cfg) for s in seeds]
    best = 0
    for i in range(1, len(seeds)):
        s, b = seeds[i], seeds[best]
        if (scores[i] > scores[best]
                or (scores[i] == scores[best]
                    and (s.duration_ms < b.duration_ms
                         or (s.duration_ms == b.duration_ms
                             and s.source < b.source)))):
            best = i
    return seeds[best], scores[best], scores


def select_rir(seeds, x_out: Waveform, x_in: Waveform, ens: EnsembleConfig,
               cfg: RirSelectConfig) -> RirSeed:
    return select_rir_scored(seeds, x_out, x_in, ens, cfg)[0]


def _mean_cosine(embs_a, embs_b) -> float:
    out = 0.0
    for a, b in zip(embs_a, embs_b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        out += float(np.dot(a, b) / max(na * nb, 1e-12))
    return out / len(embs_a)


def select_target(pool, x_in: Waveform, ens: EnsembleConfig,
                  protected_speaker: str | None = None) -> TargetSample:
    """Pool utterance whose embeddings are least like the input's."""
    cands = [u for u in pool.utterances
             if u.speaker_id != protected_speaker]
    if len({u.speaker_id for u in cands}) < 2:
        raise ValidationError(
            "target pool needs at least 2 speakers besides the protected one")
    embs_in = ensemble_embed(ens, x_in)
    best = None
    best_score = np.inf
    for u in cands:
        score = _mean_cosine(ensemble_embed(ens, u.wave), embs_in)
        if score < best_score:
            best, best_score = u, score
    return TargetSample(best.wave, best.speaker_id, best_score)


# -------------------------------------------------------- refinement

@dataclass
class RirOptTrace:
    """Per-iteration objective values, freeze flags, and box norms."""

    entries: list = field(default_factory=list)
    epsilon: float = 0.0
    alpha: float = 0.0
    frozen_at: list = field(default_factory=list)
    final_delta_linf: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "frozen_at": self.frozen_at,
            "final_delta_linf": self.final_delta_linf,
            "iterations": self.entries,
        }, indent=2)


def optimize_rir(h_star: RirSeed, x_out: Waveform, x_in: Waveform,
                 x_tgt: Waveform, ens: EnsembleConfig, cfg: RirOptConfig):
    """Refine the seed's taps toward the target voice; returns (taps, trace).

    Minimizes  L(x_tgt, x_out * h) - lambda * L(x_in, x_out * h)  over an
    additive tap perturbation clamped to the l-infinity box, one sign
    step per iteration.  An encoder whose term stops improving for k_c
    consecutive iterations no longer contributes gradient.
    """
    taps0 = h_star.taps
    eps = cfg.epsilon_rel * float(np.max(np.abs(taps0)))
    alpha = eps / 10.0 if cfg.alpha is None else cfg.alpha
    lam = cfg.lambda_target
    x = x_out.samples
    n = len(x)
    n_enc = len(ens.encoders)

    embs_in = ensemble_embed(ens, x_in)
    embs_tgt = ensemble_embed(ens, x_tgt)

    delta = np.zeros_like(taps0)
    best = [np.inf] * n_enc
    stall = [0] * n_enc
    frozen = [False] * n_enc
    frozen_at = [None] * n_enc
    trace = RirOptTrace(epsilon=eps, alpha=alpha, frozen_at=frozen_at)

    for it in range(cfg.max_iters):
        y = _conv_trim(x_out, taps0 + delta)
        embs_y, pull = ensemble_pullback(ens, y)
        j_enc = [w * (float(np.linalg.norm(e - t)) - lam * float(np.linalg.norm(e - r)))
                 for w, e, t, r in zip(ens.weights, embs_y, embs_tgt, embs_in)]
        for i in range(n_enc):
            if frozen[i]:
                continue
            if j_enc[i] < best[i]:
                best[i] = j_enc[i]
                stall[i] = 0
            else:
                stall[i] += 1
                if stall[i] >= cfg.k_c:
                    frozen[i] = True
                    frozen_at[i] = it
        trace.entries.append({
            "iteration": it,
            "j_total": float(sum(j_enc)),
            "j_encoders": [float(j) for j in j_enc],
            "frozen": list(frozen),
            "delta_linf": float(np.max(np.abs(delta))),
        })
        if all(frozen):
            break
        g_embs = [None if frozen[i] else
                  ens.weights[i] * (distance_grad(embs_y[i], embs_tgt[i])
                                    - lam * distance_grad(embs_y[i], embs_in[i]))
                  for i in range(n_enc)]
        g_y = pull(g_embs)
        grad = fftconvolve(g_y, x[::-1])[n - 1:n - 1 + len(taps0)]
        delta = np.clip(delta - alpha * np.sign(grad), -eps, eps)

    trace.final_delta_linf = float(np.max(np.abs(delta)))
    return taps0 + delta, trace


# ----------------------------------------------------------- protect

@dataclass
class ProtectConfig:
    """Bundle of the per-stage settings for the full pipeline."""

    mask: GreedyMaskConfig = field(default_factory=GreedyMaskConfig)
    style: StyleTransferConfig = field(default_factory=StyleTransferConfig)
    rir_select: RirSelectConfig = field(default_factory=RirSelectConfig)
    rir_opt: RirOptConfig = field(default_factory=RirOptConfig)
    protected_speaker: str | None = None


@dataclass
class ProtectionResult:
    """Protected audio plus everything needed to audit how it was made."""

    protected: Waveform
    mask: FrequencyMask
    style_vector: StyleVector
    rir_source: str
    rir_taps: np.ndarray
    target_speaker: str
    metrics: dict
    style_trace: object
    rir_trace: RirOptTrace

    def report_json(self) -> str:
        return json.dumps({
            "metrics": self.metrics,
            "mask_bins": list(self.mask.bins),
            "rir_source": self.rir_source,
            "target_speaker": self.target_speaker,
            "style_trace": json.loads(self.style_trace.to_json()),
            "rir_trace": json.loads(self.rir_trace.to_json()),
        }, indent=2)


def protect(x_raw: Waveform, models: EnsembleConfig, seeds, pool,
            config: ProtectConfig | None = None) -> ProtectionResult:
    """Run masking, style transfer, and reverb end to end on one utterance."""
    cfg = config or ProtectConfig()
    x_raw.validate()

    spec = stft(x_raw, StftConfig(sample_rate=x_raw.sample_rate))
    mask = greedy_select(spec, cfg.mask)
    x_m = apply_mask(x_raw, mask)

    style_vec, x_s, style_trace = optimize_style_traced(
        x_raw, x_m, models, cfg.style)

    seed, seed_score, _ = select_rir_scored(
        seeds, x_s, x_raw, models, cfg.rir_select)
    target = select_target(pool, x_raw, models,
                           protected_speaker=cfg.protected_speaker)
    taps, rir_trace = optimize_rir(seed, x_s, x_raw, target.wave, models,
                                   cfg.rir_opt)
    x_p = convolve(x_s, taps, renormalize=True)

    losses = {name: ensemble_loss(models, w, x_raw)
              for name, w in (("mask", x_m), ("style", x_s),
                              ("reverb_seed", _conv_trim(x_s, seed.taps)),
                              ("reverb_opt", x_p))}
    distortion = {name: spectrogram_distance(w, x_raw)
                  for name, w in (("mask", x_m), ("style", x_s),
                                  ("reverb_opt", x_p))}
    metrics = {
        "ensemble_loss": losses,
        "spectral_distortion": distortion,
        "rir_objective": seed_score,
        "target_similarity": target.score,
    }
    for group in (losses, distortion):
        for k, v in group.items():
            if not np.isfinite(v):
                raise ValidationError(f"non-finite metric {k}: {v}")

    return ProtectionResult(x_p, mask, style_vec, seed.source, taps,
                            target.speaker_id, metrics, style_trace, rir_trace)

"""Speaker-embedding encoders, their training, and gradients to the waveform.

Four small architectures consume 80-band log-mel features.  Three of them
(stat-pool, conv-pool, ema-pool) form the optimization ensemble; the fourth
("holdout") is architecturally distinct and reserved for evaluation, standing
in for an attacker's unseen verifier.  Forward and reverse passes are written
out by hand so the ensemble loss can be differentiated through the log-mel
front end, the STFT magnitude, and the framing/window down to raw samples.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import StftConfig, Waveform, mel_filterbank, MEL_FLOOR, stft
from .errors import NumericalError, ValidationError
from .toyspeech import Corpus, corpus_hash

N_MEL_BANDS = 80

ENSEMBLE_ARCHS = ("stat-pool", "conv-pool", "ema-pool")
ALL_ARCHS = ENSEMBLE_ARCHS + ("holdout",)

# model-directory filenames, e1..e3 ensemble + e4 holdout
ARCH_FILENAMES = {
    "stat-pool": "e1.json",
    "conv-pool": "e2.json",
    "ema-pool": "e3.json",
    "holdout": "e4.json",
}

_STAT_EPS = 1e-8  # inside the std sqrt, keeps the backward finite


@dataclass
class FrontendConfig:
    sample_rate: int = 48000
    fft_size: int = 2048
    hop: int = 512
    n_bands: int = N_MEL_BANDS

    def stft_config(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop, self.sample_rate)


@dataclass
class SpeakerEncoder:
    """Immutable-after-training embedding model."""

    arch: str
    params: dict
    embedding_dim: int
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ALL_ARCHS:
            raise ValidationError(f"unknown encoder architecture {self.arch!r}")
        if self.embedding_dim <= 0:
            raise ValidationError("embedding_dim must be positive")


def _rng_dense(rng, fan_out, fan_in):
    # Glorot-style scale keeps random-init activations in range
    s = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, s, size=(fan_out, fan_in))


def init_encoder(arch: str, seed: int = 0,
                 frontend: FrontendConfig | None = None) -> SpeakerEncoder:
    """Random-initialized encoder.  Training replaces these parameters;
    untrained instances are still valid embedding maps (useful for gradient
    checks, which don't care about speaker quality)."""
    frontend = frontend or FrontendConfig()
    rng = np.random.default_rng(seed)
    nb = frontend.n_bands
    p = {
        "in_mean": np.zeros(nb),
        "in_scale": np.ones(nb),
    }
    if arch == "stat-pool":
        p["w1"] = _rng_dense(rng, 128, 2 * nb)
        p["b1"] = np.zeros(128)
        p["w2"] = _rng_dense(rng, 64, 128)
        p["b2"] = np.zeros(64)
        dim = 64
    elif arch == "conv-pool":
        p["wc"] = _rng_dense(rng, 96, nb * 5)  # kernel width 5, flattened
        p["bc"] = np.zeros(96)
        p["w1"] = _rng_dense(rng, 128, 96)
        p["b1"] = np.zeros(128)
        dim = 128
    elif arch == "ema-pool":
        # decays start at ~0.6 (fast) and ~0.97 (slow), learned per band
        p["rho_fast"] = np.full(nb, 0.405465)
        p["rho_slow"] = np.full(nb, 3.476099)
        p["w1"] = _rng_dense(rng, 128, 2 * nb)
        p["b1"] = np.zeros(128)
        dim = 128
    elif arch == "holdout":
        p["w1"] = _rng_dense(rng, 96, 2 * nb)
        p["b1"] = np.zeros(96)
        p["w2"] = _rng_dense(rng, 96, 96)
        p["b2"] = np.zeros(96)
        dim = 96
    else:
        raise ValidationError(f"unknown encoder architecture {arch!r}")
    return SpeakerEncoder(arch, p, dim, frontend)


# ------------------------------------------------------------- front end

def logmel_forward(wave: Waveform, frontend: FrontendConfig):
    """Log-mel features plus everything the adjoint pass needs."""
    cfg = frontend.stft_config()
    spec = stft(wave, cfg)
    mag = np.abs(spec.bins)
    fb = _cached_filterbank(frontend)
    energies = fb @ mag
    mel_vals = np.log(np.maximum(energies, MEL_FLOOR))
    cache = {
        "bins": spec.bins, "mag": mag, "energies": energies,
        "fb": fb, "cfg": cfg, "n_samples": len(wave.samples),
    }
    return mel_vals, cache


_FB_CACHE: dict = {}


def _cached_filterbank(frontend: FrontendConfig) -> np.ndarray:
    key = (frontend.n_bands, frontend.fft_size, frontend.sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def logmel_pullback(g_mel: np.ndarray, cache: dict) -> np.ndarray:
    """Adjoint of logmel_forward: mel-cell gradients -> sample gradients.

    Chain: log(max(F|X|, floor)) -> |X| -> complex bins -> windowed frames
    -> overlap-add into sample positions.  Cells clamped at the floor and
    zero-magnitude bins contribute nothing (subgradient 0).
    """
    energies, mag, bins = cache["energies"], cache["mag"], cache["bins"]
    fb, cfg = cache["fb"], cache["cfg"]
    g_energy = np.where(energies > MEL_FLOOR, g_mel / np.maximum(energies, MEL_FLOOR), 0.0)
    g_mag = fb.T @ g_energy
    with np.errstate(invalid="ignore", divide="ignore"):
        phase = np.where(mag > 0.0, bins / np.where(mag > 0.0, mag, 1.0), 0.0)
    g_bins = g_mag * phase
    # adjoint of the one-sided rfft: dL/dx_n = Re(sum_k G_k e^{+2pi i k n / N})
    n = cfg.fft_size
    g_full = np.zeros((n, g_bins.shape[1]), dtype=np.complex128)
    g_full[: cfg.n_bins] = g_bins
    g_frames = np.fft.ifft(g_full, axis=0).real * n  # (fft_size, n_frames)
    g_frames *= cfg.window()[:, None]
    g_x = np.zeros(cache["n_samples"])
    for m in range(g_frames.shape[1]):
        start = m * cfg.hop
        g_x[start:start + n] += g_frames[:, m]
    return g_x


# ------------------------------------------------- architecture passes

def _l2_normalize(v: np.ndarray):
    r = float(np.linalg.norm(v))
    r = max(r, 1e-12)
    return v / r, r


def _l2_normalize_backward(g_y, y, r):
    return (g_y - y * float(np.dot(g_y, y))) / r


def _stat_features(x: np.ndarray):
    # x: (bands, frames) -> concat(per-band mean, per-band std)
    mu = x.mean(axis=1)
    var = ((x - mu[:, None]) ** 2).mean(axis=1)
    sd = np.sqrt(var + _STAT_EPS)
    return mu, sd


def _stat_features_backward(g_mu, g_sd, x, mu, sd):
    t = x.shape[1]
    g_x = np.broadcast_to(g_mu[:, None] / t, x.shape).copy()
    g_x += (g_sd / (t * sd))[:, None] * (x - mu[:, None])
    return g_x


def _ema_weights(gamma: np.ndarray, t: int):
    """Coefficient matrix c[b, t'] with feature_b = sum_t' c[b,t'] x[b,t']."""
    kk = np.arange(t - 1, -1, -1.0)  # exponent per frame, T-1 .. 0
    with np.errstate(divide="ignore"):
        logg = np.log(gamma)
    p = np.exp(np.outer(logg, kk))  # gamma^(T-1-t')
    c = p * (1.0 - gamma)[:, None]
    c[:, 0] = p[:, 0]  # first frame seeds the average
    return c, p, kk


def _encoder_forward(enc: SpeakerEncoder, mel_vals: np.ndarray):
    """Embedding plus a cache for the backward pass.  Input is the raw
    log-mel matrix; per-band normalization happens here."""
    p = enc.params
    x = (mel_vals - p["in_mean"][:, None]) / p["in_scale"][:, None]
    cache = {"x": x}
    if enc.arch in ("stat-pool", "holdout"):
        mu, sd = _stat_features(x)
        f = np.concatenate([mu, sd])
        z1 = p["w1"] @ f + p["b1"]
        if enc.arch == "stat-pool":
            h1 = np.tanh(z1)
        else:
            h1 = np.maximum(z1, 0.0)
        raw = p["w2"] @ h1 + p["b2"]
        cache.update(mu=mu, sd=sd, f=f, z1=z1, h1=h1)
    elif enc.arch == "conv-pool":
        t = x.shape[1]
        if t < 5:
            raise ValidationError("conv-pool needs at least 5 frames")
        xc = np.concatenate([x[:, k:t - 4 + k] for k in range(5)], axis=0)
        z = p["wc"] @ xc + p["bc"][:, None]
        r = np.maximum(z, 0.0)
        pool = r.mean(axis=1)
        raw = p["w1"] @ pool + p["b1"]
        cache.update(xc=xc, z=z, r=r, pool=pool)
    elif enc.arch == "ema-pool":
        t = x.shape[1]
        gf = 1.0 / (1.0 + np.exp(-p["rho_fast"]))
        gs = 1.0 / (1.0 + np.exp(-p["rho_slow"]))
        cf, pf, kk = _ema_weights(gf, t)
        cs, ps, _ = _ema_weights(gs, t)
        f = np.concatenate([(cf * x).sum(axis=1), (cs * x).sum(axis=1)])
        raw = p["w1"] @ f + p["b1"]
        cache.update(gf=gf, gs=gs, cf=cf, cs=cs, pf=pf, ps=ps, kk=kk, f=f)
    else:
        raise ValidationError(f"unknown encoder architecture {enc.arch!r}")
    e, r_norm = _l2_normalize(raw)
    cache.update(raw=raw, e=e, r_norm=r_norm)
    return e, cache


def _ema_decay_grad(g_feat, x, gamma, c, p_pow, kk):
    """d(feature)/d(rho) for one EMA pooling; all arrays are per-band."""
    t = x.shape[1]
    if t == 1:
        return np.zeros_like(gamma)
    with np.errstate(divide="ignore"):
        logg = np.log(gamma)
    q = np.where(kk[None, :] > 0, np.exp(logg[:, None] * (kk[None, :] - 1.0)), 0.0)
    # frame 0: d(gamma^(T-1))/dgamma; frames >=1: d((1-gamma) gamma^kk)/dgamma
    d = -p_pow + (1.0 - gamma)[:, None] * kk[None, :] * q
    d[:, 0] = (t - 1.0) * q[:, 0]
    dfeat_dg = (d * x).sum(axis=1)
    return g_feat * dfeat_dg * gamma * (1.0 - gamma)


def _encoder_backward(enc: SpeakerEncoder, cache: dict, g_e: np.ndarray,
                      want_input_grad: bool, want_param_grads: bool):
    p = enc.params
    x = cache["x"]
    g_raw = _l2_normalize_backward(g_e, cache["e"], cache["r_norm"])
    grads = {} if want_param_grads else None
    g_x = None
    if enc.arch in ("stat-pool", "holdout"):
        h1, z1, f = cache["h1"], cache["z1"], cache["f"]
        if want_param_grads:
            grads["w2"] = np.outer(g_raw, h1)
            grads["b2"] = g_raw.copy()
        g_h1 = p["w2"].T @ g_raw
        if enc.arch == "stat-pool":
            g_z1 = g_h1 * (1.0 - h1 * h1)
        else:
            g_z1 = g_h1 * (z1 > 0.0)
        if want_param_grads:
            grads["w1"] = np.outer(g_z1, f)
            grads["b1"] = g_z1.copy()
        g_f = p["w1"].T @ g_z1
        nb = x.shape[0]
        g_x = _stat_features_backward(g_f[:nb], g_f[nb:], x, cache["mu"], cache["sd"])
    elif enc.arch == "conv-pool":
        z, r, pool, xc = cache["z"], cache["r"], cache["pool"], cache["xc"]
        if want_param_grads:
            grads["w1"] = np.outer(g_raw, pool)
            grads["b1"] = g_raw.copy()
        g_pool = p["w1"].T @ g_raw
        g_r = np.broadcast_to(g_pool[:, None] / r.shape[1], r.shape)
        g_z = g_r * (z > 0.0)
        if want_param_grads:
            grads["wc"] = g_z @ xc.T
            grads["bc"] = g_z.sum(axis=1)
        g_xc = p["wc"].T @ g_z
        nb = x.shape[0]
        g_x = np.zeros_like(x)
        tv = g_xc.shape[1]
        for k in range(5):
            g_x[:, k:tv + k] += g_xc[k * nb:(k + 1) * nb]
    elif enc.arch == "ema-pool":
        f, cf, cs = cache["f"], cache["cf"], cache["cs"]
        if want_param_grads:
            grads["w1"] = np.outer(g_raw, f)
            grads["b1"] = g_raw.copy()
        g_f = p["w1"].T @ g_raw
        nb = x.shape[0]
        g_x = g_f[:nb, None] * cf + g_f[nb:, None] * cs
        if want_param_grads:
            grads["rho_fast"] = _ema_decay_grad(
                g_f[:nb], x, cache["gf"], cf, cache["pf"], cache["kk"])
            grads["rho_slow"] = _ema_decay_grad(
                g_f[nb:], x, cache["gs"], cs, cache["ps"], cache["kk"])
    if want_input_grad:
        g_mel = g_x / p["in_scale"][:, None]
    else:
        g_mel = None
    return g_mel, grads


# --------------------------------------------------------------- embed

def _check_embed_input(enc: SpeakerEncoder, wave: Waveform):
    if wave.sample_rate != enc.frontend.sample_rate:
        raise ValidationError(
            f"encoder expects {enc.frontend.sample_rate} Hz audio, "
            f"got {wave.sample_rate}")
    if wave.duration_s < 1.0 - 1e-9:
        raise ValidationError(
            f"embed needs at least 1.0 s of audio, got {wave.duration_s:.3f} s")


def embed(enc: SpeakerEncoder, wave: Waveform) -> np.ndarray:
    """Unit-norm speaker embedding of a waveform."""
    _check_embed_input(enc, wave)
    mel_vals, _ = logmel_forward(wave, enc.frontend)
    e, _ = _encoder_forward(enc, mel_vals)
    return e


# ------------------------------------------------------------ ensemble

def default_weight(enc: SpeakerEncoder) -> float:
    # normalizes the expected distance scale across embedding sizes
    return 1.0 / np.sqrt(enc.embedding_dim)


@dataclass
class EnsembleConfig:
    """Ordered encoders plus positive per-encoder weights.

    The holdout architecture is rejected here by construction: anything
    accepting an EnsembleConfig is an optimization surface, and the holdout
    encoder must stay unseen by all of them.
    """

    encoders: list
    weights: list | None = None

    def __post_init__(self):
        if not self.encoders:
            raise ValidationError("ensemble needs at least one encoder")
        for enc in self.encoders:
            if enc.arch == "holdout":
                raise ValidationError(
                    "holdout encoder cannot join an optimization ensemble")
        if self.weights is None:
            self.weights = [default_weight(e) for e in self.encoders]
        if len(self.weights) != len(self.encoders):
            raise ValidationError("need exactly one weight per encoder")
        self.weights = [float(w) for w in self.weights]
        if any(w <= 0 for w in self.weights):
            raise ValidationError("ensemble weights must be positive")

    def frontend(self) -> FrontendConfig:
        return self.encoders[0].frontend


def ensemble_embed(cfg: EnsembleConfig, wave: Waveform) -> list:
    """Per-encoder embeddings, front end computed once."""
    _check_embed_input(cfg.encoders[0], wave)
    mel_vals, _ = logmel_forward(wave, cfg.frontend())
    return [_encoder_forward(enc, mel_vals)[0] for enc in cfg.encoders]


def weighted_embedding_loss(weights, embs_a, embs_b) -> float:
    """Sum of weighted per-encoder embedding distances."""
    return float(sum(w * np.linalg.norm(np.asarray(x) - np.asarray(y))
                     for w, x, y in zip(weights, embs_a, embs_b)))


def ensemble_loss(cfg: EnsembleConfig, a: Waveform, b: Waveform) -> float:
    """Weighted sum of per-encoder embedding distances between a and b."""
    return weighted_embedding_loss(cfg.weights, ensemble_embed(cfg, a),
                                   ensemble_embed(cfg, b))


def ensemble_pullback(cfg: EnsembleConfig, wave: Waveform):
    """(embeddings, pull) where pull maps per-encoder embedding gradients
    to a gradient over the waveform's samples."""
    _check_embed_input(cfg.encoders[0], wave)
    mel_vals, front_cache = logmel_forward(wave, cfg.frontend())
    embs, caches = [], []
    for enc in cfg.encoders:
        e, c = _encoder_forward(enc, mel_vals)
        embs.append(e)
        caches.append(c)

    def pull(g_embs) -> np.ndarray:
        g_mel = np.zeros_like(mel_vals)
        for enc, cache, g_e in zip(cfg.encoders, caches, g_embs):
            if g_e is None:
                continue
            g, _ = _encoder_backward(enc, cache, np.asarray(g_e, dtype=np.float64),
                                     want_input_grad=True, want_param_grads=False)
            g_mel += g
        return logmel_pullback(g_mel, front_cache)

    return embs, pull


def distance_grad(e_a: np.ndarray, e_ref: np.ndarray) -> np.ndarray:
    """d||e_a - e_ref||/d e_a with the subgradient-0 convention at the kink."""
    diff = e_a - e_ref
    d = float(np.linalg.norm(diff))
    if d <= 0.0:
        return np.zeros_like(diff)
    return diff / d


def loss_grad_wrt_waveform(cfg: EnsembleConfig, a: Waveform,
                           ref: Waveform) -> np.ndarray:
    """Gradient of ensemble_loss(cfg, a, ref) over a's samples."""
    e_ref = ensemble_embed(cfg, ref)
    e_a, pull = ensemble_pullback(cfg, a)
    g_embs = [w * distance_grad(x, y)
              for w, x, y in zip(cfg.weights, e_a, e_ref)]
    return pull(g_embs)


@dataclass
class GradReport:
    analytic: np.ndarray
    finite_diff: np.ndarray
    coords: np.ndarray
    valid: np.ndarray
    max_rel_err: float

    def __post_init__(self):
        n = len(self.analytic)
        if any(len(v) != n for v in (self.finite_diff, self.coords, self.valid)):
            raise ValidationError("gradient report vectors must align")


def _embeddings_and_relu_masks(cfg: EnsembleConfig, wave: Waveform):
    mel_vals, _ = logmel_forward(wave, cfg.frontend())
    embs, masks = [], []
    for enc in cfg.encoders:
        e, cache = _encoder_forward(enc, mel_vals)
        embs.append(e)
        if enc.arch == "conv-pool":
            masks.append(cache["z"] > 0.0)
    return embs, masks


def grad_check(cfg: EnsembleConfig, wave: Waveform, n_coords: int = 100,
               seed: int = 0, step: float = 1e-4) -> GradReport:
    """Central-difference validation of loss_grad_wrt_waveform.

    The reference waveform is the input plus a small seeded perturbation
    (the loss needs two distinct points; the perturbation is deterministic).
    Coordinates whose +/-step evaluations flip any ReLU activation are
    marked invalid: the secant straddles a kink there, so the difference
    quotient stops being an oracle for the one-sided derivative.  The
    reported error is over valid coordinates, scaled by their largest
    finite-difference magnitude so near-zero entries don't divide by dust.
    """
    if n_coords < 0:
        raise ValidationError("n_coords must be non-negative")
    if n_coords == 0:
        z = np.zeros(0)
        return GradReport(z, z.copy(), np.zeros(0, dtype=int),
                          np.zeros(0, dtype=bool), 0.0)
    rng = np.random.default_rng(seed)
    rms = float(np.sqrt(np.mean(wave.samples ** 2)))
    ref = Waveform(wave.samples + rng.normal(0.0, 0.05 * rms + 1e-4,
                                             size=len(wave.samples)),
                   wave.sample_rate)
    ref_embs = ensemble_embed(cfg, ref)
    analytic_full = loss_grad_wrt_waveform(cfg, wave, ref)
    _, base_masks = _embeddings_and_relu_masks(cfg, wave)
    coords = rng.choice(len(wave.samples), size=min(n_coords, len(wave.samples)),
                        replace=False)
    fd = np.zeros(len(coords))
    valid = np.ones(len(coords), dtype=bool)
    x = wave.samples
    for i, c in enumerate(coords):
        for sgn in (+1.0, -1.0):
            bumped = x.copy()
            bumped[c] += sgn * step
            embs, masks = _embeddings_and_relu_masks(
                cfg, Waveform(bumped, wave.sample_rate))
            fd[i] += sgn * weighted_embedding_loss(cfg.weights, embs, ref_embs)
            if any(not np.array_equal(m, b) for m, b in zip(masks, base_masks)):
                valid[i] = False
        fd[i] /= 2.0 * step
    analytic = analytic_full[coords]
    if not np.any(valid):
        return GradReport(analytic, fd, coords, valid, float("inf"))
    scale = max(float(np.max(np.abs(fd[valid]))), 1e-12)
    max_rel = float(np.max(np.abs(analytic[valid] - fd[valid]))) / scale
    return GradReport(analytic, fd, coords, valid, max_rel)


# ------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    val_per_speaker: int = 2

    def validate(self):
        if self.lr <= 0 or not (0 <= self.momentum < 1):
            raise ValidationError("bad optimizer hyperparameters")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        return self


def _softmax(z):
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def train_encoder(arch: str, corpus: Corpus,
                  hyper: TrainConfig | None = None) -> SpeakerEncoder:
    """Fit one encoder with a throwaway softmax speaker-classification head.

    Momentum SGD over shuffled batches; the head is dropped afterward and
    the embedding model returned.  Deterministic for a fixed seed.
    """
    hyper = (hyper or TrainConfig()).validate()
    speakers = corpus.speakers()
    if len(speakers) < 10:
        raise ValidationError(f"training needs >= 10 speakers, got {len(speakers)}")
    for s in speakers:
        if corpus.total_seconds(s) < 60.0 - 1e-9:
            raise ValidationError(f"speaker {s} has under 60 s of audio")

    enc = init_encoder(arch, seed=hyper.seed)
    rng = np.random.default_rng(hyper.seed + 1)
    spk_index = {s: i for i, s in enumerate(speakers)}

    # features once per utterance; normalization constants from train split
    train_set, val_set = [], []
    for s in speakers:
        us = corpus.by_speaker(s)
        n_val = min(hyper.val_per_speaker, max(0, len(us) - 1))
        split = len(us) - n_val
        for u in us[:split]:
            train_set.append((spk_index[s], u))
        for u in us[split:]:
            val_set.append((spk_index[s], u))

    feats = {}
    acc_sum = np.zeros(enc.frontend.n_bands)
    acc_sq = np.zeros(enc.frontend.n_bands)
    acc_n = 0
    for label, u in train_set + val_set:
        m, _ = logmel_forward(u.wave, enc.frontend)
        feats[id(u)] = m
    for label, u in train_set:
        m = feats[id(u)]
        acc_sum += m.sum(axis=1)
        acc_sq += (m * m).sum(axis=1)
        acc_n += m.shape[1]
    mean = acc_sum / acc_n
    var = acc_sq / acc_n - mean ** 2
    enc.params["in_mean"] = mean
    enc.params["in_scale"] = np.maximum(np.sqrt(np.maximum(var, 0.0)), 1e-3)

    n_spk = len(speakers)
    head_w = rng.normal(0.0, 0.01, size=(n_spk, enc.embedding_dim))
    head_b = np.zeros(n_spk)
    trainable = [k for k in enc.params if k not in ("in_mean", "in_scale")]
    vel = {k: np.zeros_like(enc.params[k]) for k in trainable}
    vel_hw = np.zeros_like(head_w)
    vel_hb = np.zeros_like(head_b)

    final_loss = 0.0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            g_params = {k: np.zeros_like(enc.params[k]) for k in trainable}
            g_hw = np.zeros_like(head_w)
            g_hb = np.zeros_like(head_b)
            batch_loss = 0.0
            for j in idx:
                label, u = train_set[j]
                e, cache = _encoder_forward(enc, feats[id(u)])
                logits = head_w @ e + head_b
                probs = _softmax(logits)
                batch_loss += -float(np.log(max(probs[label], 1e-300)))
                g_logits = probs.copy()
                g_logits[label] -= 1.0
                g_hw += np.outer(g_logits, e)
                g_hb += g_logits
                g_e = head_w.T @ g_logits
                _, grads = _encoder_backward(enc, cache, g_e,
                                             want_input_grad=False,
                                             want_param_grads=True)
                for k, g in grads.items():
                    g_params[k] += g
            scale = 1.0 / len(idx)
            if not np.isfinite(batch_loss):
                raise NumericalError("training loss diverged (NaN/Inf)")
            for k in trainable:
                vel[k] = hyper.momentum * vel[k] - hyper.lr * g_params[k] * scale
                enc.params[k] = enc.params[k] + vel[k]
            vel_hw = hyper.momentum * vel_hw - hyper.lr * g_hw * scale
            head_w = head_w + vel_hw
            vel_hb = hyper.momentum * vel_hb - hyper.lr * g_hb * scale
            head_b = head_b + vel_hb
            epoch_loss += batch_loss
        final_loss = epoch_loss / max(1, len(train_set))

    correct = 0
    for label, u in val_set:
        e, _ = _encoder_forward(enc, feats[id(u)])
        if int(np.argmax(head_w @ e + head_b)) == label:
            correct += 1
    val_acc = correct / len(val_set) if val_set else float("nan")

    enc.training = {
        "seed": hyper.seed,
        "corpus_hash": corpus_hash(corpus),
        "n_speakers": n_spk,
        "epochs": hyper.epochs,
        "final_train_loss": final_loss,
        "val_accuracy": val_acc,
    }
    return enc


# -------------------------------------------------------- serialization

def save_encoder(enc: SpeakerEncoder, path: str | os.PathLike) -> None:
    doc = {
        "format_version": 1,
        "arch": enc.arch,
        "embedding_dim": enc.embedding_dim,
        "frontend": {
            "sample_rate": enc.frontend.sample_rate,
            "fft_size": enc.frontend.fft_size,
            "hop": enc.frontend.hop,
            "n_bands": enc.frontend.n_bands,
        },
        "shapes": {k: list(v.shape) for k, v in enc.params.items()},
        "weights": {k: v.tolist() for k, v in enc.params.items()},
        "training": enc.training,
    }
    with open(os.fspath(path), "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_encoder(path: str | os.PathLike) -> SpeakerEncoder:
    try:
        with open(os.fspath(path)) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read encoder file {path}: {exc}") from exc
    for key in ("arch", "embedding_dim", "frontend", "shapes", "weights"):
        if key not in doc:
            raise ValidationError(f"encoder file {path} missing field {key!r}")
    params = {}
    for k, w in doc["weights"].items():
        arr = np.asarray(w, dtype=np.float64)
        declared = tuple(doc["shapes"].get(k, ()))
        if arr.shape != declared:
            raise ValidationError(
                f"parameter {k} shape {arr.shape} != declared {declared}")
        params[k] = arr
    fe = doc["frontend"]
    frontend = FrontendConfig(fe["sample_rate"], fe["fft_size"], fe["hop"],
                              fe["n_bands"])
    return SpeakerEncoder(doc["arch"], params, int(doc["embedding_dim"]),
                          frontend, doc.get("training", {}))


def save_models(model_dir: str | os.PathLike, encoders: list) -> None:
    os.makedirs(os.fspath(model_dir), exist_ok=True)
    for enc in encoders:
        save_encoder(enc, os.path.join(os.fspath(model_dir),
                                       ARCH_FILENAMES[enc.arch]))


def load_ensemble(model_dir: str | os.PathLike,
                  weights: list | None = None) -> EnsembleConfig:
    """The optimization ensemble: e1..e3.  Never includes the holdout."""
    encs = []
    for arch in ENSEMBLE_ARCHS:
        p = os.path.join(os.fspath(model_dir), ARCH_FILENAMES[arch])
        if not os.path.exists(p):
            raise ValidationError(f"missing encoder file {p}")
        encs.append(load_encoder(p))
    return EnsembleConfig(encs, weights)


def load_holdout(model_dir: str | os.PathLike) -> SpeakerEncoder:
    p = os.path.join(os.fspath(model_dir), ARCH_FILENAMES["holdout"])
    if not os.path.exists(p):
        raise ValidationError(f"missing encoder file {p}")
    enc = load_encoder(p)
    if enc.arch != "holdout":
        raise ValidationError(f"{p} does not hold the holdout architecture")
    return enc

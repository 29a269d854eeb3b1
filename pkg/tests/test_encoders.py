"""Encoder forward/backward, ensemble loss, training, serialization.

The load-bearing oracle is central differencing: every hand-written
backward pass (input gradients through the whole front end, and parameter
gradients used by training) is checked against finite differences computed
inline here, never against the code under test.
"""

import json
import os

import numpy as np
import pytest

from voiceshield.audio import Waveform
from voiceshield.encoders import (
    ALL_ARCHS, ARCH_FILENAMES, ENSEMBLE_ARCHS, EnsembleConfig, FrontendConfig,
    TrainConfig, _embeddings_and_relu_masks, _encoder_backward,
    _encoder_forward, embed, ensemble_embed, ensemble_loss, grad_check,
    init_encoder, load_encoder, load_ensemble, load_holdout,
    loss_grad_wrt_waveform, save_encoder, save_models, train_encoder,
    weighted_embedding_loss,
)
from voiceshield.errors import ValidationError
from voiceshield.toyspeech import build_corpus, gen_utterance, sample_speaker


def _utt(speaker_seed, utt_seed, dur=1.0):
    return gen_utterance(sample_speaker(speaker_seed), dur, utt_seed)


def _dithered(speaker_seed, utt_seed, dur=1.0, sigma=1e-2):
    """Utterance plus a broadband noise floor.  The synthetic source is
    band-limited, so without the floor some mel bands carry only spectral
    leakage and d(log E) = dE/E becomes too curved for a 1e-4 finite
    difference to track; real recordings always have such a floor."""
    w = _utt(speaker_seed, utt_seed, dur)
    rng = np.random.default_rng(utt_seed * 7 + 1)
    return Waveform(w.samples + rng.normal(0.0, sigma, len(w.samples)),
                    w.sample_rate)


@pytest.fixture(scope="module")
def small_ensemble():
    return EnsembleConfig([init_encoder(a, seed=i + 1)
                           for i, a in enumerate(ENSEMBLE_ARCHS)])


@pytest.fixture(scope="module")
def train_corpus():
    # 10 speakers x 10 utts x 6 s: exactly the 60 s/speaker minimum
    return build_corpus(n_speakers=10, utts_per_speaker=10, duration_s=6.0,
                        seed=77)


@pytest.fixture(scope="module")
def trained_stat(train_corpus):
    return train_encoder("stat-pool", train_corpus, TrainConfig(seed=5))


# ------------------------------------------------------------ embed

def test_embed_unit_norm_all_archs():
    w = _utt(3, 30)
    for i, arch in enumerate(ALL_ARCHS):
        e = embed(init_encoder(arch, seed=i), w)
        assert abs(np.linalg.norm(e) - 1.0) <= 1e-6


def test_embed_deterministic():
    enc = init_encoder("stat-pool", seed=0)
    w = _utt(4, 40)
    assert np.array_equal(embed(enc, w), embed(enc, w))


def test_embed_rejects_short_and_wrong_rate():
    enc = init_encoder("stat-pool", seed=0)
    with pytest.raises(ValidationError):
        embed(enc, _utt(5, 50, dur=0.8))
    w = _utt(5, 51)
    with pytest.raises(ValidationError):
        embed(enc, Waveform(w.samples, 16000))


def test_embed_scaling_changes_embedding():
    # log-mel shifts under gain, so no invariance is expected; the cosine
    # just has to be a sane number
    enc = init_encoder("stat-pool", seed=0)
    w = _utt(6, 60)
    e1 = embed(enc, w)
    e2 = embed(enc, Waveform(0.5 * w.samples, w.sample_rate))
    assert not np.array_equal(e1, e2)
    cos = float(np.dot(e1, e2))
    assert -1.0 <= cos <= 1.0


def test_embedding_dims_match_arch():
    dims = {"stat-pool": 64, "conv-pool": 128, "ema-pool": 128, "holdout": 96}
    w = _utt(7, 70)
    for arch, d in dims.items():
        enc = init_encoder(arch, seed=2)
        assert enc.embedding_dim == d
        assert embed(enc, w).shape == (d,)


# ----------------------------------------------------- ensemble loss

def test_loss_zero_on_identical_input(small_ensemble):
    w = _utt(8, 80)
    assert ensemble_loss(small_ensemble, w, w) == 0.0


def test_unit_vector_geometry():
    # single encoder, weight 1, orthogonal unit embeddings
    val = weighted_embedding_loss([1.0], [np.array([1.0, 0.0])],
                                  [np.array([0.0, 1.0])])
    assert abs(val - np.sqrt(2.0)) <= 1e-12


def test_loss_equals_componentwise_sum(small_ensemble):
    a, b = _utt(9, 90), _utt(10, 100)
    total = ensemble_loss(small_ensemble, a, b)
    by_hand = sum(w * np.linalg.norm(embed(enc, a) - embed(enc, b))
                  for w, enc in zip(small_ensemble.weights,
                                    small_ensemble.encoders))
    assert abs(total - by_hand) <= 1e-12
    assert total > 0.0


def test_loss_symmetry_exact(small_ensemble):
    a, b = _utt(11, 110), _utt(12, 120)
    assert ensemble_loss(small_ensemble, a, b) == ensemble_loss(small_ensemble, b, a)


def test_loss_triangle_bound(small_ensemble):
    a, b, c = _utt(13, 130), _utt(14, 140), _utt(15, 150)
    lab = ensemble_loss(small_ensemble, a, b)
    lbc = ensemble_loss(small_ensemble, b, c)
    lac = ensemble_loss(small_ensemble, a, c)
    assert lac <= lab + lbc + 1e-6


def test_lambda_scaling(small_ensemble):
    a, b = _utt(16, 160), _utt(17, 170)
    base = ensemble_loss(small_ensemble, a, b)
    # power-of-two factor scales each product and partial sum exactly
    doubled = EnsembleConfig(small_ensemble.encoders,
                             [2.0 * w for w in small_ensemble.weights])
    assert ensemble_loss(doubled, a, b) == 2.0 * base
    # any positive factor preserves candidate ordering
    cands = [_utt(18, 180 + i) for i in range(4)]
    tripled = EnsembleConfig(small_ensemble.encoders,
                             [3.0 * w for w in small_ensemble.weights])
    order_base = np.argsort([ensemble_loss(small_ensemble, a, c) for c in cands])
    order_scaled = np.argsort([ensemble_loss(tripled, a, c) for c in cands])
    assert np.array_equal(order_base, order_scaled)


def test_holdout_never_joins_ensemble():
    good = init_encoder("stat-pool", seed=0)
    bad = init_encoder("holdout", seed=1)
    with pytest.raises(ValidationError):
        EnsembleConfig([bad])
    with pytest.raises(ValidationError):
        EnsembleConfig([good, bad])


def test_ensemble_weight_validation():
    encs = [init_encoder("stat-pool", seed=0)]
    with pytest.raises(ValidationError):
        EnsembleConfig(encs, [0.0])
    with pytest.raises(ValidationError):
        EnsembleConfig(encs, [1.0, 2.0])
    with pytest.raises(ValidationError):
        EnsembleConfig([])
    cfg = EnsembleConfig(encs)
    assert cfg.weights == [1.0 / np.sqrt(64)]


# ------------------------------------------- gradients vs finite diff

def test_waveform_gradient_matches_central_difference(small_ensemble):
    # white noise puts every FFT bin well away from the |X| kink, which a
    # band-limited signal cannot; the 1e-4 secant needs that smoothness
    rng0 = np.random.default_rng(5)
    a = Waveform(rng0.normal(0.0, 0.15, 48000), 48000)
    ref = Waveform(rng0.normal(0.0, 0.15, 48000), 48000)
    ref_embs = ensemble_embed(small_ensemble, ref)
    g = loss_grad_wrt_waveform(small_ensemble, a, ref)
    assert g.shape == a.samples.shape
    _, base_masks = _embeddings_and_relu_masks(small_ensemble, a)
    rng = np.random.default_rng(99)
    coords = rng.choice(len(a.samples), size=100, replace=False)
    h = 1e-4
    fd = np.zeros(len(coords))
    clean = np.ones(len(coords), dtype=bool)
    for i, c in enumerate(coords):
        for sgn in (1.0, -1.0):
            bumped = a.samples.copy()
            bumped[c] += sgn * h
            embs, masks = _embeddings_and_relu_masks(
                small_ensemble, Waveform(bumped, a.sample_rate))
            fd[i] += sgn * weighted_embedding_loss(small_ensemble.weights,
                                                   embs, ref_embs)
            # a flipped ReLU puts a kink inside the secant: the difference
            # quotient is no oracle for the derivative at such coords
            if any(not np.array_equal(m, b)
                   for m, b in zip(masks, base_masks)):
                clean[i] = False
        fd[i] /= 2.0 * h
    assert np.count_nonzero(clean) >= 70
    scale = max(np.max(np.abs(fd[clean])), 1e-12)
    assert np.max(np.abs(g[coords][clean] - fd[clean])) / scale <= 1e-5


def test_gradient_zero_at_reference(small_ensemble):
    w = _utt(22, 220)
    g = loss_grad_wrt_waveform(small_ensemble, w, w)
    assert np.all(g == 0.0)


def test_trailing_pad_leaves_gradient_alone(small_ensemble):
    # frame-aligned base length; a sub-hop pad adds no frame, so the padded
    # samples sit outside every analysis window
    cfg = small_ensemble.frontend()
    n = cfg.fft_size + 90 * cfg.hop  # 48128 samples, just over 1 s
    spk = sample_speaker(23)
    base = gen_utterance(spk, (n + 500) / cfg.sample_rate, 230)
    a = Waveform(base.samples[:n].copy(), cfg.sample_rate)
    ref = _utt(24, 240)
    g_base = loss_grad_wrt_waveform(small_ensemble, a, ref)
    padded = Waveform(np.concatenate([a.samples, np.zeros(400)]), cfg.sample_rate)
    g_pad = loss_grad_wrt_waveform(small_ensemble, padded, ref)
    assert np.max(np.abs(g_pad[:n] - g_base)) <= 1e-6
    assert np.all(g_pad[n:] == 0.0)


def test_grad_check_report(small_ensemble):
    w = _dithered(25, 250)
    rep = grad_check(small_ensemble, w, n_coords=40, seed=3)
    assert rep.max_rel_err <= 1e-3
    assert len(rep.analytic) == len(rep.finite_diff) == len(rep.coords) == 40
    assert rep.valid.dtype == bool and np.count_nonzero(rep.valid) > 0
    rep2 = grad_check(small_ensemble, w, n_coords=40, seed=3)
    assert np.array_equal(rep.coords, rep2.coords)
    assert np.array_equal(rep.finite_diff, rep2.finite_diff)
    assert np.array_equal(rep.valid, rep2.valid)
    assert rep.max_rel_err == rep2.max_rel_err


def test_grad_check_zero_coords(small_ensemble):
    rep = grad_check(small_ensemble, _utt(26, 260), n_coords=0)
    assert len(rep.analytic) == 0 and len(rep.finite_diff) == 0
    assert rep.max_rel_err == 0.0


def _param_fd_check(arch, names, seed=0, t=12):
    """Central-difference check of parameter gradients on a raw mel matrix."""
    enc = init_encoder(arch, seed=seed)
    rng = np.random.default_rng(seed + 100)
    mel_vals = rng.normal(-5.0, 2.0, size=(enc.frontend.n_bands, t))
    probe = rng.normal(size=enc.embedding_dim)

    def loss():
        e, _ = _encoder_forward(enc, mel_vals)
        return float(np.dot(probe, e))

    e, cache = _encoder_forward(enc, mel_vals)
    _, grads = _encoder_backward(enc, cache, probe, want_input_grad=False,
                                 want_param_grads=True)
    h = 1e-6
    for name in names:
        flat = enc.params[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(8, flat.size), replace=False)
        for j in picks:
            keep = flat[j]
            flat[j] = keep + h
            up = loss()
            flat[j] = keep - h
            dn = loss()
            flat[j] = keep
            fd = (up - dn) / (2.0 * h)
            an = grads[name].reshape(-1)[j]
            assert abs(an - fd) <= 1e-6 + 1e-4 * abs(fd), \
                f"{arch}.{name}[{j}]: analytic {an} vs fd {fd}"


def test_param_grads_stat_pool():
    _param_fd_check("stat-pool", ["w1", "b1", "w2", "b2"])


def test_param_grads_conv_pool():
    _param_fd_check("conv-pool", ["wc", "bc", "w1", "b1"])


def test_param_grads_ema_pool():
    # includes the closed-form decay-parameter gradients
    _param_fd_check("ema-pool", ["rho_fast", "rho_slow", "w1", "b1"])


def test_param_grads_holdout():
    _param_fd_check("holdout", ["w1", "b1", "w2", "b2"])


# ------------------------------------------------------------ training

def test_training_rejects_small_corpus():
    tiny = build_corpus(n_speakers=4, utts_per_speaker=2, duration_s=1.5, seed=1)
    with pytest.raises(ValidationError):
        train_encoder("stat-pool", tiny, TrainConfig(epochs=1))
    short = build_corpus(n_speakers=10, utts_per_speaker=2, duration_s=1.5, seed=1)
    with pytest.raises(ValidationError):
        train_encoder("stat-pool", short, TrainConfig(epochs=1))


def test_training_is_deterministic(train_corpus, trained_stat):
    again = train_encoder("stat-pool", train_corpus, TrainConfig(seed=5))
    assert set(again.params) == set(trained_stat.params)
    for k in again.params:
        assert np.array_equal(again.params[k], trained_stat.params[k]), k


def test_training_metadata(trained_stat, train_corpus):
    meta = trained_stat.training
    assert meta["seed"] == 5
    assert meta["n_speakers"] == 10
    assert len(meta["corpus_hash"]) == 64
    assert np.isfinite(meta["final_train_loss"])


def test_trained_encoder_separates_speakers(trained_stat, train_corpus):
    # same-speaker cosine beats the cross-speaker average, corpus-wide
    embs = {}
    for s in train_corpus.speakers():
        us = train_corpus.by_speaker(s)[:3]
        embs[s] = [embed(trained_stat, u.wave) for u in us]
    same, cross = [], []
    speakers = list(embs)
    for s in speakers:
        for i in range(len(embs[s])):
            for j in range(i + 1, len(embs[s])):
                same.append(float(np.dot(embs[s][i], embs[s][j])))
    for i in range(len(speakers)):
        for j in range(i + 1, len(speakers)):
            cross.append(float(np.dot(embs[speakers[i]][0],
                                      embs[speakers[j]][0])))
    assert np.mean(same) > np.mean(cross)


def test_trained_encoder_classifies_validation_split(trained_stat):
    assert trained_stat.training["val_accuracy"] >= 0.8


# ------------------------------------------------------- serialization

def test_save_load_round_trip(tmp_path, trained_stat):
    p = tmp_path / "enc.json"
    save_encoder(trained_stat, p)
    back = load_encoder(p)
    assert back.arch == trained_stat.arch
    assert back.embedding_dim == trained_stat.embedding_dim
    for k, v in trained_stat.params.items():
        assert np.array_equal(back.params[k], v), k
    w = _utt(30, 300)
    assert np.array_equal(embed(back, w), embed(trained_stat, w))


def test_save_load_round_trip_untrained(tmp_path):
    for i, arch in enumerate(ALL_ARCHS):
        enc = init_encoder(arch, seed=i + 7)
        p = tmp_path / f"{arch}.json"
        save_encoder(enc, p)
        back = load_encoder(p)
        for k, v in enc.params.items():
            assert np.array_equal(back.params[k], v)


def test_load_rejects_bad_files(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ValidationError):
        load_encoder(missing)
    garbled = tmp_path / "garbled.json"
    garbled.write_text("{not json")
    with pytest.raises(ValidationError):
        load_encoder(garbled)
    enc = init_encoder("stat-pool", seed=0)
    p = tmp_path / "tampered.json"
    save_encoder(enc, p)
    doc = json.loads(p.read_text())
    doc["shapes"]["w1"] = [2, 2]
    p.write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        load_encoder(p)


def test_model_directory_layout(tmp_path):
    encs = [init_encoder(a, seed=i) for i, a in enumerate(ALL_ARCHS)]
    d = tmp_path / "models"
    save_models(d, encs)
    assert sorted(os.listdir(d)) == ["e1.json", "e2.json", "e3.json", "e4.json"]
    cfg = load_ensemble(d)
    assert tuple(e.arch for e in cfg.encoders) == ENSEMBLE_ARCHS
    assert all(e.arch != "holdout" for e in cfg.encoders)
    hold = load_holdout(d)
    assert hold.arch == "holdout"


def test_load_ensemble_missing_file(tmp_path):
    d = tmp_path / "models"
    save_models(d, [init_encoder("stat-pool", seed=0)])
    with pytest.raises(ValidationError):
        load_ensemble(d)


def test_load_holdout_arch_mismatch(tmp_path):
    d = tmp_path / "models"
    os.makedirs(d)
    save_encoder(init_encoder("stat-pool", seed=0),
                 d / ARCH_FILENAMES["holdout"])
    with pytest.raises(ValidationError):
        load_holdout(d)


def test_ensemble_embed_matches_embed(small_ensemble):
    w = _utt(31, 310)
    joint = ensemble_embed(small_ensemble, w)
    for e, enc in zip(joint, small_ensemble.encoders):
        assert np.array_equal(e, embed(enc, w))

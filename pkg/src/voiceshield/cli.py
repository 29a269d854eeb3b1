"""Command-line driver: corpus generation through protection and attacks.

Every artifact-producing subcommand writes its resolved configuration
and seeds next to (or inside) its output so any result can be replayed
from the files alone.  Error categories map to fixed exit codes: usage
2 (argparse), I/O 3, validation 4, numerical failure 5.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .audio import Waveform, load_wav, save_wav
from .encoders import (ALL_ARCHS, TrainConfig, load_ensemble, load_holdout,
                       save_models, train_encoder)
from .errors import (AudioIOError, NumericalError, ValidationError,
                     VoiceShieldError)
from .evaluation import (ThresholdPolicy, VerificationTrial, attack_transform,
                         calibrate_threshold, deconvolve, rejection_rate,
                         trial_score)
from .livemask import (LIVE_MASK_K, LIVE_MAX_ITERS, calibrate_profile,
                       load_profile, make_stream, save_profile, stream_process)
from .reverb import (ProtectConfig, RirOptConfig, RirSelectConfig,
                     prepare_rir_seeds, protect)
from .specmask import GreedyMaskConfig
from .styler import StyleTransferConfig
from .toyspeech import build_corpus, corpus_hash, load_corpus, save_corpus

log = logging.getLogger("voiceshield")

EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERICAL = 5

ATTACK_METHODS = ("quant", "resample", "lowpass", "melinv", "deconv")


@dataclass
class PipelineConfig:
    """Every tunable of the offline pipeline and LiveMask calibration."""

    k_mask: int = 12
    tau_p_rel: float = 0.01
    style_tau_rel: float = 0.08
    lambda_l: float = 0.01
    lambda_target: float = 0.5
    epsilon_rel: float = 0.3
    max_iters: int = 500
    k_c: int = 20
    livemask_k: int = LIVE_MASK_K
    seed: int = 0

    def validate(self):
        if self.k_mask < 0 or self.livemask_k < 0:
            raise ValidationError("mask sizes cannot be negative")
        if self.tau_p_rel <= 0 or self.style_tau_rel <= 0:
            raise ValidationError("thresholds tau_p_rel/style_tau_rel must be positive")
        if self.lambda_l < 0 or self.lambda_target < 0:
            raise ValidationError("penalty weights cannot be negative")
        if self.epsilon_rel <= 0:
            raise ValidationError("epsilon_rel must be positive")
        if self.max_iters < 0 or self.k_c < 1:
            raise ValidationError("bad iteration budget or patience")
        return self

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            with open(os.fspath(path)) as f:
                doc = json.load(f)
        except OSError as exc:
            raise AudioIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError("config root must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
        return cls(**doc).validate()

    def protect_config(self, protected_speaker=None) -> ProtectConfig:
        return ProtectConfig(
            mask=GreedyMaskConfig(k=self.k_mask, tau_p_rel=self.tau_p_rel),
            style=StyleTransferConfig(tau_rel=self.style_tau_rel),
            rir_select=RirSelectConfig(lambda_l=self.lambda_l),
            rir_opt=RirOptConfig(epsilon_rel=self.epsilon_rel,
                                 max_iters=self.max_iters, k_c=self.k_c,
                                 lambda_target=self.lambda_target,
                                 seed=self.seed),
            protected_speaker=protected_speaker,
        )


def _load_pipeline_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    return PipelineConfig.from_file(path)


def _write_json(path, doc) -> None:
    with open(os.fspath(path), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# --------------------------------------------------------- subcommands

def cmd_gen_corpus(args) -> int:
    corpus = build_corpus(args.speakers, args.utts, args.seconds, args.seed)
    save_corpus(corpus, args.out)
    _write_json(os.path.join(args.out, "generation.json"), {
        "speakers": args.speakers,
        "utts_per_speaker": args.utts,
        "seconds": args.seconds,
        "seed": args.seed,
        "corpus_hash": corpus_hash(corpus),
    })
    log.info("wrote %d utterances under %s", len(corpus.utterances), args.out)
    return 0


def cmd_train_encoders(args) -> int:
    corpus = load_corpus(args.corpus)
    report = {"seed": args.seed, "corpus_hash": corpus_hash(corpus),
              "encoders": {}}
    encoders = []
    for i, arch in enumerate(ALL_ARCHS):
        enc = train_encoder(arch, corpus, TrainConfig(seed=args.seed + i))
        encoders.append(enc)
        report["encoders"][arch] = {
            "holdout": arch == "holdout",
            "val_accuracy": enc.training["val_accuracy"],
            "final_train_loss": enc.training["final_train_loss"],
            "seed": args.seed + i,
        }
        log.info("trained %s: val accuracy %.3f", arch,
                 enc.training["val_accuracy"])
    save_models(args.out, encoders)
    _write_json(os.path.join(args.out, "training_report.json"), report)
    return 0


def cmd_protect(args) -> int:
    cfg = _load_pipeline_config(args.config)
    wave = load_wav(getattr(args, "in"))
    models = load_ensemble(args.models)
    seeds = prepare_rir_seeds(args.rirs)
    pool = load_corpus(args.pool)
    result = protect(wave, models, seeds, pool,
                     cfg.protect_config(args.protected_speaker))
    save_wav(args.out, result.protected)
    report = json.loads(result.report_json())
    report["config"] = asdict(cfg)
    report["input"] = os.fspath(getattr(args, "in"))
    metrics_path = args.metrics or args.out + ".metrics.json"
    _write_json(metrics_path, report)
    log.info("protected %s -> %s (metrics %s)", getattr(args, "in"),
             args.out, metrics_path)
    return 0


def cmd_livemask_calibrate(args) -> int:
    cfg = _load_pipeline_config(args.config)
    corpus = load_corpus(args.corpus)
    models = load_ensemble(args.models)
    seeds = prepare_rir_seeds(args.rirs)
    pool = load_corpus(args.pool)
    opt = RirOptConfig(epsilon_rel=cfg.epsilon_rel,
                       max_iters=args.max_iters, k_c=cfg.k_c,
                       lambda_target=cfg.lambda_target, seed=cfg.seed)
    profile = calibrate_profile(
        corpus, seeds, pool, models, k=cfg.livemask_k,
        tau_p_rel=cfg.tau_p_rel, opt=opt,
        select_cfg=RirSelectConfig(lambda_l=cfg.lambda_l))
    profile.meta["pipeline_config"] = asdict(cfg)
    save_profile(profile, args.out)
    log.info("calibrated profile with %d masked bins, %d taps -> %s",
             profile.k, len(profile.rir), args.out)
    return 0


def _stream_wav(profile, in_path, out_path, chunk) -> None:
    wave = load_wav(in_path)
    if wave.sample_rate != profile.sample_rate:
        raise ValidationError(
            f"profile expects {profile.sample_rate} Hz, file is "
            f"{wave.sample_rate} Hz")
    state = make_stream(profile)
    parts = [stream_process(state, wave.samples[i:i + chunk])
             for i in range(0, len(wave.samples), chunk)]
    save_wav(out_path, Waveform(np.concatenate(parts), profile.sample_rate))


def _stream_raw(profile, chunk) -> None:
    state = make_stream(profile)
    src = sys.stdin.buffer
    dst = sys.stdout.buffer
    while True:
        data = src.read(chunk * 4)
        if not data:
            break
        if len(data) % 4:
            raise AudioIOError("raw stream truncated mid-sample (float32 frames)")
        x = np.frombuffer(data, dtype=np.float32).astype(np.float64)
        dst.write(stream_process(state, x).astype(np.float32).tobytes())
    dst.flush()


def cmd_livemask_stream(args) -> int:
    if args.chunk < 1:
        raise ValidationError(f"chunk must be >= 1, got {args.chunk}")
    profile = load_profile(args.profile)
    in_path, out_path = getattr(args, "in"), args.out
    if (in_path == "-") != (out_path == "-"):
        raise ValidationError(
            "raw mode uses '-' for both input and output, WAV mode for neither")
    if in_path == "-":
        _stream_raw(profile, args.chunk)
    else:
        _stream_wav(profile, in_path, out_path, args.chunk)
    return 0


def _load_trials(manifest_path):
    try:
        with open(os.fspath(manifest_path)) as f:
            doc = json.load(f)
    except OSError as exc:
        raise AudioIOError(f"cannot read trials {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(
            f"trials {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("trials"), list):
        raise ValidationError("trial manifest needs a top-level 'trials' list")
    base = os.path.dirname(os.path.abspath(os.fspath(manifest_path)))
    trials = []
    for i, entry in enumerate(doc["trials"]):
        for key in ("enroll", "probe", "same_speaker"):
            if key not in entry:
                raise ValidationError(f"trial {i} is missing {key!r}")
        enroll = [load_wav(os.path.join(base, p)) for p in entry["enroll"]]
        probe = load_wav(os.path.join(base, entry["probe"]))
        trials.append(VerificationTrial(enroll, probe,
                                        bool(entry["same_speaker"])))
    if not trials:
        raise ValidationError("trial manifest holds no trials")
    return trials


def _parse_policy(text, trials, enc) -> ThresholdPolicy:
    if text == "eer":
        return calibrate_threshold(trials, enc)
    if text.startswith("fixed:"):
        try:
            return ThresholdPolicy("fixed", float(text.split(":", 1)[1]))
        except ValueError as exc:
            raise ValidationError(f"bad fixed threshold {text!r}") from exc
    raise ValidationError(
        f"threshold must be 'eer' or 'fixed:<value>', got {text!r}")


def cmd_evaluate(args) -> int:
    trials = _load_trials(args.trials)
    enc = load_holdout(args.models)
    scores = [trial_score(enc, t) for t in trials]
    policies = ([_parse_policy(args.threshold, trials, enc)]
                if args.threshold else
                [ThresholdPolicy(), calibrate_threshold(trials, enc)])
    report = {
        "n_trials": len(trials),
        "scores": [{"score": s, "same_speaker": t.same_speaker}
                   for s, t in zip(scores, trials)],
        "policies": [{
            "mode": p.mode,
            "value": p.value,
            "rejection_rate": rejection_rate(trials, enc, p),
        } for p in policies],
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_attack(args) -> int:
    wave = load_wav(getattr(args, "in"))
    params: dict = {}
    if args.method == "deconv":
        if not args.rir:
            raise ValidationError("deconv needs --rir with the candidate response")
        taps = load_wav(args.rir).samples
        out = deconvolve(wave, taps, beta=args.beta)
        params = {"rir": os.fspath(args.rir), "beta": args.beta}
    else:
        kind = {"quant": "quantize", "resample": "resample_downup",
                "lowpass": "lowpass", "melinv": "mel_invert"}[args.method]
        out = attack_transform(kind, wave)
        params = {"kind": kind}
    save_wav(args.out, out)
    _write_json(args.out + ".attack.json",
                {"method": args.method, "params": params,
                 "input": os.fspath(getattr(args, "in"))})
    return 0


# -------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voiceshield",
        description="Protect speech recordings against voice cloning.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a toy speech corpus")
    g.add_argument("--speakers", type=int, required=True)
    g.add_argument("--utts", type=int, required=True)
    g.add_argument("--seconds", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-encoders", help="train e1..e3 plus the holdout e4")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_encoders)

    pr = sub.add_parser("protect", help="run the full offline pipeline")
    pr.add_argument("--in", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--models", required=True)
    pr.add_argument("--rirs", required=True)
    pr.add_argument("--pool", required=True)
    pr.add_argument("--config")
    pr.add_argument("--metrics")
    pr.add_argument("--protected-speaker")
    pr.set_defaults(func=cmd_protect)

    lm = sub.add_parser("livemask", help="real-time mode")
    lmsub = lm.add_subparsers(dest="livemask_command", required=True)

    c = lmsub.add_parser("calibrate", help="build a universal profile")
    c.add_argument("--corpus", required=True)
    c.add_argument("--models", required=True)
    c.add_argument("--rirs", required=True)
    c.add_argument("--pool", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--config")
    c.add_argument("--max-iters", type=int, default=LIVE_MAX_ITERS)
    c.set_defaults(func=cmd_livemask_calibrate)

    s = lmsub.add_parser("stream", help="filter audio through a profile")
    s.add_argument("--profile", required=True)
    s.add_argument("--in", required=True,
                   help="WAV path, or '-' for raw float32 frames on stdin")
    s.add_argument("--out", required=True,
                   help="WAV path, or '-' for raw float32 frames on stdout")
    s.add_argument("--chunk", type=int, default=4096)
    s.set_defaults(func=cmd_livemask_stream)

    e = sub.add_parser("evaluate", help="score verification trials")
    e.add_argument("--trials", required=True)
    e.add_argument("--models", required=True)
    e.add_argument("--threshold",
                   help="'eer' or 'fixed:<value>'; default reports both")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attack", help="apply an adaptive-attacker transform")
    a.add_argument("--method", required=True, choices=ATTACK_METHODS)
    a.add_argument("--in", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--rir", help="candidate RIR WAV for deconv")
    a.add_argument("--beta", type=float, default=1e-3)
    a.set_defaults(func=cmd_attack)

    return p


def main(argv=None) -> int:
    level = os.environ.get("VOICESHIELD_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AudioIOError as exc:
        print(f"error (I/O): {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error (numerical): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"error (validation): {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except VoiceShieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

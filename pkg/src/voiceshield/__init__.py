"""voiceshield: protects recorded speech against voice-cloning misuse.

Offline path: spectrogram frequency masking, sensitivity-driven audio style
transfer, and an optimized short room impulse response, all tuned against an
ensemble of speaker encoders.  Streaming path: a pre-calibrated notch cascade
plus FIR reverb with zero algorithmic lookahead.
"""

__version__ = "0.1.0"

from .audio import (  # noqa: F401
    DEFAULT_SAMPLE_RATE,
    MelSpectrogram,
    Spectrogram,
    StftConfig,
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
from .errors import (  # noqa: F401
    AudioIOError,
    NumericalError,
    ValidationError,
    VoiceShieldError,
)
from .toyspeech import (  # noqa: F401
    Corpus,
    SpeakerProfile,
    Utterance,
    build_corpus,
    corpus_hash,
    gen_utterance,
    load_corpus,
    sample_speaker,
    save_corpus,
)
from .encoders import (  # noqa: F401
    ALL_ARCHS,
    ENSEMBLE_ARCHS,
    EnsembleConfig,
    GradReport,
    SpeakerEncoder,
    TrainConfig,
    embed,
    ensemble_embed,
    ensemble_loss,
    grad_check,
    init_encoder,
    load_ensemble,
    load_holdout,
    loss_grad_wrt_waveform,
    save_models,
    train_encoder,
)
from .specmask import (  # noqa: F401
    FrequencyMask,
    GreedyMaskConfig,
    apply_mask,
    compile_notch_cascade,
    greedy_select,
    power_candidates,
)
from .styler import (  # noqa: F401
    StyleTrace,
    StyleTransferConfig,
    StyleVector,
    apply_style,
    extract_style,
    optimize_style,
    optimize_style_traced,
)
from .reverb import (  # noqa: F401
    ProtectConfig,
    ProtectionResult,
    RirOptConfig,
    RirOptTrace,
    RirSeed,
    RirSelectConfig,
    optimize_rir,
    protect,
    select_rir,
    select_target,
)
from .livemask import (  # noqa: F401
    LiveMaskProfile,
    calibrate_profile,
    load_profile,
    make_stream,
    save_profile,
    stream_process,
)
from .evaluation import (  # noqa: F401
    ATTACK_KINDS,
    ThresholdPolicy,
    VerificationTrial,
    attack_transform,
    calibrate_threshold,
    deconvolve,
    distortion_metrics,
    eer_threshold,
    rejection_rate,
    trial_score,
)

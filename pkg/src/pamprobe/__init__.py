"""Few-shot probing, label amalgamation and mixture pretraining for passive acoustic monitoring."""

from .audio_io import Waveform, read_wav, resample, synth, write_wav
from .bench import BenchResult, bench_inference, real_time_factor
from .corpus import (
    DatasetRegistry,
    LabeledClip,
    SplitSpec,
    amalgamate_labels,
    filter_ambient,
    load_manifest,
    save_manifest,
    split_train_test,
)
from .dsp_frontend import (
    MelConfig,
    MelSpectrogram,
    PcenConfig,
    frontend,
    mel_project,
    pcen,
    stft_power,
    window_clip,
)
from .embedder import (
    CacheBackend,
    EmbedderSpec,
    EmbeddingCache,
    EmbeddingVector,
    MockBackend,
    cache_get,
    cache_put,
    embed_clip,
    mock_embed,
)
from .errors import ConfigError, PamProbeError
from .eval_protocol import (
    DregConfig,
    EvalRecord,
    EvalReport,
    FewshotConfig,
    SweepSpec,
    dreg,
    fewshot_eval,
    sweep,
)
from .mixture_pretrain import (
    AugmentConfig,
    MixtureConfig,
    MixtureSource,
    PretrainHparams,
    ToyEmbedderModel,
    augment_gain,
    build_heads,
    exclude_holdout_classes,
    mixup,
    multi_head_loss,
    pretrain_toy,
    sample_stream,
    strip_labeled,
)
from .probe import (
    ProbeHparams,
    ProbeModel,
    ScoredExample,
    auc_roc_macro,
    error_reduction,
    predict_scores,
    train_probe,
)
from .reports import emit_report, load_report
from .settings import HARNESS_VERSION

__version__ = HARNESS_VERSION

__all__ = [
    "HARNESS_VERSION",
    "AugmentConfig",
    "BenchResult",
    "CacheBackend",
    "ConfigError",
    "DatasetRegistry",
    "DregConfig",
    "EmbedderSpec",
    "EmbeddingCache",
    "EmbeddingVector",
    "EvalRecord",
    "EvalReport",
    "FewshotConfig",
    "LabeledClip",
    "MelConfig",
    "MelSpectrogram",
    "MixtureConfig",
    "MixtureSource",
    "MockBackend",
    "PamProbeError",
    "PcenConfig",
    "PretrainHparams",
    "ProbeHparams",
    "ProbeModel",
    "ScoredExample",
    "SplitSpec",
    "SweepSpec",
    "ToyEmbedderModel",
    "Waveform",
    "amalgamate_labels",
    "auc_roc_macro",
    "augment_gain",
    "bench_inference",
    "build_heads",
    "cache_get",
    "cache_put",
    "dreg",
    "embed_clip",
    "emit_report",
    "error_reduction",
    "exclude_holdout_classes",
    "fewshot_eval",
    "filter_ambient",
    "frontend",
    "load_manifest",
    "load_report",
    "mel_project",
    "mixup",
    "mock_embed",
    "multi_head_loss",
    "pcen",
    "predict_scores",
    "pretrain_toy",
    "read_wav",
    "real_time_factor",
    "resample",
    "sample_stream",
    "save_manifest",
    "split_train_test",
    "stft_power",
    "strip_labeled",
    "sweep",
    "synth",
    "train_probe",
    "window_clip",
    "write_wav",
]

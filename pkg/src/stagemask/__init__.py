"""Multi-stage spectral-mask speech enhancement toolkit."""

from .dsp import (
    AnalysisWindow,
    CoverageError,
    PhaseMatrix,
    Spectrogram,
    Waveform,
    hann_window,
    istft,
    stft,
)
from .blocks import receptive_field
from .model import ModelConfig, MultiStageModel, build_model, total_loss
from .train import (
    AdamState,
    FormatError,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    fit,
    load_checkpoint,
    pad_batch,
    save_checkpoint,
)
from .audio import (
    SynthConfig,
    ToyItem,
    WavFormatError,
    mix_at_snr,
    read_wav,
    synth_toy_dataset,
    write_wav,
)
from .metrics import MetricReport, evaluate_set, si_sdr, snr_db

__all__ = [
    "AnalysisWindow",
    "CoverageError",
    "PhaseMatrix",
    "Spectrogram",
    "Waveform",
    "hann_window",
    "istft",
    "stft",
    "receptive_field",
    "ModelConfig",
    "MultiStageModel",
    "build_model",
    "total_loss",
    "AdamState",
    "FormatError",
    "TrainConfig",
    "TrainingDivergedError",
    "adam_step",
    "fit",
    "load_checkpoint",
    "pad_batch",
    "save_checkpoint",
    "SynthConfig",
    "ToyItem",
    "WavFormatError",
    "mix_at_snr",
    "read_wav",
    "synth_toy_dataset",
    "write_wav",
    "MetricReport",
    "evaluate_set",
    "si_sdr",
    "snr_db",
]

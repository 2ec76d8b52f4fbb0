"""IConNet: a learnable windowed-FIR front end for raw-waveform heart sound classification.

Everything runs on numpy/scipy, including a small reverse-mode autodiff
engine used to train the network.
"""

from .audio_io import (
    DatasetManifest, Label, Waveform, generate_synthetic, load_physionet, read_wav, resample,
    segment, write_wav,
)
from .errors import (
    ConfigurationError, CorruptModelError, FoldError, IConNetError, IngestionError, NonFiniteError,
    ReferenceFormatError, ShapeError, TrainingError, UnsupportedCodecError, WavFormatError,
)
from .estimator import IConNetClassifier, MfccFeatures, MfccFfnClassifier
from .experiment import TrainConfig, cross_validate, stratified_kfold
from .interpret import analyze_filters, band_summary, high_band_suppression, passband_statistics
from .model import IConNet, IConNetConfig, MfccFfn, count_params, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "Label", "Waveform", "generate_synthetic", "load_physionet", "read_wav",
    "resample", "segment", "write_wav",
    "ConfigurationError", "CorruptModelError", "FoldError", "IConNetError", "IngestionError",
    "NonFiniteError", "ReferenceFormatError", "ShapeError", "TrainingError",
    "UnsupportedCodecError", "WavFormatError",
    "IConNetClassifier", "MfccFeatures", "MfccFfnClassifier",
    "TrainConfig", "cross_validate", "stratified_kfold",
    "analyze_filters", "band_summary", "high_band_suppression", "passband_statistics",
    "IConNet", "IConNetConfig", "MfccFfn", "count_params", "load_model", "save_model",
]

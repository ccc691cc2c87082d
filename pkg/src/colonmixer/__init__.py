"""Colon shape estimation from colonoscope kinematics."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    ColonFrame,
    ColonoscopeFrame,
    InsertionRecording,
    NormalizationStats,
    RecordingFormatError,
    WindowSample,
    compute_normalization_stats,
    load_recording,
    make_window_samples,
    save_recording,
)
from .model import (  # noqa: E402
    CheckpointError,
    ColonShapeMixer,
    EstimatedColonShape,
    MixerConfig,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import PhantomSpec, generate_recording, generate_suite  # noqa: E402
from .training import (  # noqa: E402
    TrainConfig,
    med,
    measure_latency,
    paired_t_test,
    run_loocv,
    train,
)

__all__ = [
    "CheckpointError",
    "ColonFrame",
    "ColonShapeMixer",
    "ColonoscopeFrame",
    "EstimatedColonShape",
    "InsertionRecording",
    "MixerConfig",
    "NormalizationStats",
    "PhantomSpec",
    "RecordingFormatError",
    "TrainConfig",
    "WindowSample",
    "compute_normalization_stats",
    "generate_recording",
    "generate_suite",
    "load_checkpoint",
    "load_recording",
    "make_window_samples",
    "measure_latency",
    "med",
    "paired_t_test",
    "run_loocv",
    "save_checkpoint",
    "save_recording",
    "train",
]

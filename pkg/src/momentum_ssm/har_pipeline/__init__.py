"""End-to-end sequence classification: windowing, model, training, tasks, IO."""

from .io import (
    DataFormatError,
    Recording,
    load_checkpoint,
    read_dataset_csv,
    read_stats_csv,
    save_checkpoint,
    write_dataset_csv,
    write_metrics_csv,
    write_stats_csv,
)
from .layers import (
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    cross_entropy,
    dropout_forward,
    layernorm_backward,
    layernorm_forward,
)
from .model import VARIANTS, Model, ModelConfig, init_params, momentum_param_names
from .tasks import class_patterns, grid_search, make_delayed_recall, make_recall_task
from .train import (
    Adam,
    DivergenceError,
    TaskData,
    TrainConfig,
    TrainResult,
    clip_by_global_norm,
    cosine_lr,
    train,
)
from .windowing import WindowConfig, channel_stats, window_stream, zscore

__all__ = [
    "Adam", "DataFormatError", "DivergenceError", "Model", "ModelConfig", "Recording",
    "TaskData", "TrainConfig", "TrainResult", "VARIANTS", "WindowConfig", "batchnorm_backward",
    "batchnorm_forward", "channel_stats", "class_patterns", "clip_by_global_norm",
    "conv1d_backward", "conv1d_forward", "cosine_lr", "cross_entropy", "dropout_forward",
    "grid_search", "init_params", "layernorm_backward", "layernorm_forward", "load_checkpoint",
    "make_delayed_recall", "make_recall_task", "momentum_param_names", "read_dataset_csv",
    "read_stats_csv", "save_checkpoint", "train", "window_stream", "write_dataset_csv",
    "write_metrics_csv", "write_stats_csv", "zscore",
]

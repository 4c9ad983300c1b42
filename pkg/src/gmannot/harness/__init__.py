"""Experiment harness: configs, run orchestration, dataset export,
downstream protocol, plots, and the CLI.
"""

from .config import (
    ConfigError,
    DownstreamSpec,
    EvalSpec,
    ExperimentConfig,
    LabeledSpec,
    SupervisedSpec,
    apply_overrides,
    config_from_dict,
    default_config_dict,
    load_config,
)
from .datasets import (
    AnnotatedDataset,
    DatasetError,
    DatasetManifest,
    export_dataset,
    export_labeled_set,
    label_with_annotator,
    load_dataset,
    params_hash,
    quantize_image,
)
from .downstream import make_test_samples, train_downstream
from .experiment import RUN_ROOT_ENV, ExperimentError, run_experiment, run_root
from .plots import PlotError, plot_curves, plot_metrics, read_metrics_jsonl

__all__ = [name for name in dir() if not name.startswith("_")]

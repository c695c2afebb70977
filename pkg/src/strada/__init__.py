"""Graph-aware probabilistic traffic forecasting with a decoder-only transformer.

The pipeline: tokenize each node's recent past together with its k-hop
neighborhood (lag features, calendar features, Laplacian positional
encoding), train a causal transformer to emit Student-t parameters per step,
forecast by sampling autoregressively across all nodes at once, and adapt to
new road networks with low-rank adapters or partial unfreezing.
"""

from .adapt import AdaptPlan, adapt_run, attach_lora, merge_lora, plan_trainables
from .data import (
    Checkpoint,
    DatasetBundle,
    Splits,
    SynthParams,
    chronological_split,
    load_checkpoint,
    load_dataset,
    load_dataset_dir,
    save_checkpoint,
    synth_generate,
    write_dataset_dir,
)
from .errors import (
    CompatibilityError,
    ConfigError,
    DataError,
    InputError,
    NumericError,
    StradaError,
)
from .evaluate import (
    MetricReport,
    NoiseSpec,
    coverage_check,
    evaluate_point_forecasts,
    export_embeddings,
    mae,
    mape,
    nll_comparison,
    persistence_baseline,
    perturbation_sweep,
    rmse,
)
from .features import DEFAULT_LAGS, FeaturizeConfig, LagSet, SampleBuilder, make_sample
from .forecast import (
    ForecastFan,
    RolloutConfig,
    point_forecast,
    quantiles,
    rollout,
)
from .graph import KHopSpec, RoadGraph, khop_neighborhood, laplacian_pe
from .model import (
    ModelConfig,
    ModelParams,
    StudentTParams,
    forward_batch,
    init_params,
    parameter_count_formula,
    student_t_nll,
)
from .training import TrainConfig, TrainReport, fit, pretrain

__version__ = "0.1.0"

__all__ = [
    "AdaptPlan",
    "Checkpoint",
    "CompatibilityError",
    "ConfigError",
    "DEFAULT_LAGS",
    "DataError",
    "DatasetBundle",
    "FeaturizeConfig",
    "ForecastFan",
    "InputError",
    "KHopSpec",
    "LagSet",
    "MetricReport",
    "ModelConfig",
    "ModelParams",
    "NoiseSpec",
    "NumericError",
    "RoadGraph",
    "RolloutConfig",
    "SampleBuilder",
    "Splits",
    "StradaError",
    "StudentTParams",
    "SynthParams",
    "TrainConfig",
    "TrainReport",
    "adapt_run",
    "attach_lora",
    "chronological_split",
    "coverage_check",
    "evaluate_point_forecasts",
    "export_embeddings",
    "fit",
    "forward_batch",
    "init_params",
    "khop_neighborhood",
    "laplacian_pe",
    "load_checkpoint",
    "load_dataset",
    "load_dataset_dir",
    "mae",
    "make_sample",
    "mape",
    "merge_lora",
    "nll_comparison",
    "parameter_count_formula",
    "persistence_baseline",
    "perturbation_sweep",
    "plan_trainables",
    "point_forecast",
    "pretrain",
    "quantiles",
    "rmse",
    "rollout",
    "save_checkpoint",
    "student_t_nll",
    "synth_generate",
    "write_dataset_dir",
    "__version__",
]

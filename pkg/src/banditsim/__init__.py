"""Contextual-bandit ad recommendation simulator: neural CTR models with six
posterior-approximation schemes, exploration policies, a continuous
self-training loop, and offline evaluation metrics."""

from .config import ExperimentConfig, load_experiment_config, model_label
from .env import Catalog, SynthSpec, load_catalog, random_policy_ctr, split_holdout, synth_generate
from .loop import Impression, LoopConfig, collect_greedy_dataset, run_experiment, warm_start_pretrain
from .metrics import MetricsReport, ctr_uplift, pr_auc, rce, roc_auc
from .nncore import NetworkConfig, NetworkParams, OptimizerState, init_network, make_optimizer
from .policy import PolicyConfig, confidence_level_to_k, empirical_quantile
from .posterior import Sampler, SamplerConfig, build_sampler, point_predict, retrain, sample_scores

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "ExperimentConfig",
    "Impression",
    "LoopConfig",
    "MetricsReport",
    "NetworkConfig",
    "NetworkParams",
    "OptimizerState",
    "PolicyConfig",
    "Sampler",
    "SamplerConfig",
    "SynthSpec",
    "build_sampler",
    "collect_greedy_dataset",
    "confidence_level_to_k",
    "ctr_uplift",
    "empirical_quantile",
    "init_network",
    "load_catalog",
    "load_experiment_config",
    "make_optimizer",
    "model_label",
    "point_predict",
    "pr_auc",
    "random_policy_ctr",
    "rce",
    "retrain",
    "roc_auc",
    "run_experiment",
    "sample_scores",
    "split_holdout",
    "synth_generate",
    "warm_start_pretrain",
]

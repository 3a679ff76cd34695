"""Declarative experiment description: one JSON document whose defaults are
the offline-recipe hyperparameters, so an empty config reproduces the
reference experiment. Unknown keys are rejected and every violated invariant
is reported in one pass."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .env import Catalog, SynthSpec, load_catalog, split_holdout, synth_generate
from .errors import ConfigurationError
from .nncore import NetworkConfig, OptimizerState, make_optimizer
from .policy import PolicyConfig
from .posterior import ENSEMBLE_KINDS, MULTIHEAD_KINDS, SAMPLER_KINDS, SamplerConfig
from .seeding import derive_seed

SAMPLER_LABELS = {
    "bootstrap": "Bootstrap",
    "multihead": "Multihead",
    "sgd_ensemble": "SGD",
    "multihead_sgd": "Multihead SGD",
    "mc_dropout": "Dropout",
    "hybrid": "Hybrid",
}

DEFAULT_CONFIG: dict = {
    "environment": {
        "kind": "synthetic",
        "users": 120,
        "ads": 300,
        "user_dim": 250,
        "ad_dim": 323,
        "base_rate": 0.2,
        "logit_gain": 2.5,
        "truth_hidden": [32],
        "seed": None,  # null derives a world from the run seed
        "users_csv": None,
        "ads_csv": None,
        "labels_csv": None,
        "label_threshold": 4.0,
        "holdout_ads": 5,
        "holdout_seed": None,
        "exclude_served": True,
        "resample_labels": False,
    },
    "sampler": {
        "kind": "hybrid",
        "member_count": 10,
        "mask_keep_prob": 0.5,
        "shared_mask_across_candidates": False,
        "seed": None,
        "layer_sizes": None,  # null: [100, 50], plus a 20-unit layer for hybrid
        "dropout_rate": None,  # null: 0.5 for dropout kinds, 0.0 otherwise
    },
    "policy": {
        "kind": "ucb",
        "slate_size": 7,
        "epsilon": 0.1,
        "ucb_order_k": 2,
        "ucb_samples": 10,
    },
    "loop": {
        "bootstrap_users": 20,
        "retrain_every_users": 20,
        "epochs_per_retrain": 100,
        "batch_size": 64,
        "buffer_mode": "window",
        "user_order": "round_robin_shuffled",
        "total_user_visits": 600,
    },
    "optimizer": {
        "kind": "rmsprop",
        "learning_rate": 0.1,
        "decay": 0.5,  # learning-rate schedule lr/(1 + decay*t)
        "rho": 0.9,  # RMSProp moving-average coefficient
        "epsilon_stability": 1e-8,
    },
    "warm_start": None,  # or {"collect_users": N, "pretrain_epochs": E}
    "seed": 0,
    "output_dir": None,
}


@dataclass(frozen=True)
class EnvironmentSection:
    kind: str
    users: int
    ads: int
    user_dim: int
    ad_dim: int
    base_rate: float
    logit_gain: float
    truth_hidden: tuple[int, ...]
    seed: int | None
    users_csv: str | None
    ads_csv: str | None
    labels_csv: str | None
    label_threshold: float
    holdout_ads: int
    holdout_seed: int | None
    exclude_served: bool
    resample_labels: bool


@dataclass(frozen=True)
class SamplerSection:
    kind: str
    member_count: int
    mask_keep_prob: float
    shared_mask_across_candidates: bool
    seed: int | None
    layer_sizes: tuple[int, ...] | None
    dropout_rate: float | None


@dataclass(frozen=True)
class OptimizerSection:
    kind: str
    learning_rate: float
    decay: float
    rho: float
    epsilon_stability: float


@dataclass(frozen=True)
class WarmStartSection:
    collect_users: int
    pretrain_epochs: int


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentSection
    sampler: SamplerSection
    policy: PolicyConfig
    loop: "LoopConfig"  # noqa: F821 (imported lazily to avoid a cycle)
    optimizer: OptimizerSection
    warm_start: WarmStartSection | None
    seed: int
    output_dir: str | None
    force_overwrite: bool = False

    def to_canonical_dict(self) -> dict:
        env = self.environment
        samp = self.sampler
        return {
            "environment": {
                "kind": env.kind, "users": env.users, "ads": env.ads,
                "user_dim": env.user_dim, "ad_dim": env.ad_dim,
                "base_rate": env.base_rate, "logit_gain": env.logit_gain,
                "truth_hidden": list(env.truth_hidden), "seed": env.seed,
                "users_csv": env.users_csv, "ads_csv": env.ads_csv,
                "labels_csv": env.labels_csv, "label_threshold": env.label_threshold,
                "holdout_ads": env.holdout_ads, "holdout_seed": env.holdout_seed,
                "exclude_served": env.exclude_served, "resample_labels": env.resample_labels,
            },
            "sampler": {
                "kind": samp.kind, "member_count": samp.member_count,
                "mask_keep_prob": samp.mask_keep_prob,
                "shared_mask_across_candidates": samp.shared_mask_across_candidates,
                "seed": samp.seed,
                "layer_sizes": None if samp.layer_sizes is None else list(samp.layer_sizes),
                "dropout_rate": samp.dropout_rate,
            },
            "policy": {
                "kind": self.policy.kind, "slate_size": self.policy.slate_size,
                "epsilon": self.policy.epsilon, "ucb_order_k": self.policy.ucb_order_k,
                "ucb_samples": self.policy.ucb_samples,
            },
            "loop": {
                "bootstrap_users": self.loop.bootstrap_users,
                "retrain_every_users": self.loop.retrain_every_users,
                "slate_size": self.loop.slate_size,
                "epochs_per_retrain": self.loop.epochs_per_retrain,
                "batch_size": self.loop.batch_size,
                "buffer_mode": self.loop.buffer_mode,
                "user_order": self.loop.user_order,
                "total_user_visits": self.loop.total_user_visits,
            },
            "optimizer": {
                "kind": self.optimizer.kind, "learning_rate": self.optimizer.learning_rate,
                "decay": self.optimizer.decay, "rho": self.optimizer.rho,
                "epsilon_stability": self.optimizer.epsilon_stability,
            },
            "warm_start": None if self.warm_start is None else {
                "collect_users": self.warm_start.collect_users,
                "pretrain_epochs": self.warm_start.pretrain_epochs,
            },
            "seed": self.seed,
        }


def _deep_merge(base: dict, override: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            problems.append(f"unknown config key {where!r}")
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where, problems)
        else:
            out[key] = value
    return out


def _set_dotted(data: dict, dotted: str, raw: str, problems: list[str]) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            problems.append(f"unknown config key {dotted!r}")
            return
        node = node[part]
    if parts[-1] not in node:
        problems.append(f"unknown config key {dotted!r}")
        return
    node[parts[-1]] = value


def default_layer_sizes(kind: str) -> tuple[int, ...]:
    """[100, 50] hidden units, plus the extra 20-unit layer the hybrid scheme
    puts its dropout masks on."""
    return (100, 50, 20) if kind == "hybrid" else (100, 50)


def default_dropout(kind: str) -> tuple[float, str]:
    if kind == "mc_dropout":
        return 0.5, "all_hidden"
    if kind == "hybrid":
        return 0.5, "second_to_last"
    return 0.0, "none"


def load_experiment_config(source=None, overrides: dict[str, str] | None = None,
                           cli_seed: int | None = None, cli_out: str | None = None,
                           force: bool = False) -> ExperimentConfig:
    """Merge defaults <- config file/dict <- dotted overrides <- CLI flags,
    then build and validate every section, reporting all problems at once."""
    from .loop import LoopConfig

    problems: list[str] = []
    if source is None:
        raw: dict = {}
    elif isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{source}: not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{source}: config root must be an object")

    merged = _deep_merge(DEFAULT_CONFIG, raw, "", problems)
    for dotted, value in (overrides or {}).items():
        _set_dotted(merged, dotted, value, problems)
    if cli_seed is not None:
        merged["seed"] = cli_seed
    if cli_out is not None:
        merged["output_dir"] = cli_out
    for name in ("environment", "sampler", "policy", "loop", "optimizer"):
        if not isinstance(merged[name], dict):
            problems.append(f"{name} must be an object, got {type(merged[name]).__name__}")
            merged[name] = dict(DEFAULT_CONFIG[name])
    if merged["warm_start"] is not None and not isinstance(merged["warm_start"], dict):
        problems.append(f"warm_start must be an object or null, got {type(merged['warm_start']).__name__}")
        merged["warm_start"] = None

    def section(cls, data, name):
        try:
            return cls(**data)
        except (ConfigurationError, TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
            return None

    env_data = dict(merged["environment"])
    env_data["truth_hidden"] = tuple(env_data.get("truth_hidden") or ())
    environment = section(EnvironmentSection, env_data, "environment")
    if environment is not None:
        if environment.kind not in ("synthetic", "catalog"):
            problems.append(f"environment.kind must be synthetic or catalog, got {environment.kind!r}")
        if environment.kind == "catalog":
            for key in ("users_csv", "ads_csv", "labels_csv"):
                if getattr(environment, key) is None:
                    problems.append(f"environment.{key} is required for catalog environments")
        if environment.kind == "synthetic":
            try:
                SynthSpec(users=environment.users, ads=environment.ads,
                          user_dim=environment.user_dim, ad_dim=environment.ad_dim,
                          base_rate=environment.base_rate, logit_gain=environment.logit_gain,
                          truth_hidden=environment.truth_hidden, seed=environment.seed or 0)
            except ConfigurationError as exc:
                problems.append(f"environment: {exc}")
            if environment.holdout_ads >= environment.ads:
                problems.append("environment.holdout_ads must be smaller than the ad count")

    samp_data = dict(merged["sampler"])
    if samp_data.get("layer_sizes") is not None:
        samp_data["layer_sizes"] = tuple(samp_data["layer_sizes"])
    sampler = section(SamplerSection, samp_data, "sampler")
    if sampler is not None:
        if sampler.kind not in SAMPLER_KINDS:
            problems.append(f"sampler.kind must be one of {SAMPLER_KINDS}, got {sampler.kind!r}")
        else:
            try:
                _materialize_sampler_config(sampler, input_dim=1, seed=0)
            except ConfigurationError as exc:
                problems.append(f"sampler: {exc}")

    policy_cfg = None
    try:
        policy_cfg = PolicyConfig(**merged["policy"])
    except (ConfigurationError, TypeError) as exc:
        problems.append(f"policy: {exc}")

    loop_data = dict(merged["loop"])
    loop_cfg = None
    try:
        loop_cfg = LoopConfig(slate_size=merged["policy"].get("slate_size", 7), **loop_data)
    except (ConfigurationError, TypeError) as exc:
        problems.append(f"loop: {exc}")

    optimizer = section(OptimizerSection, merged["optimizer"], "optimizer")
    if optimizer is not None:
        try:
            make_optimizer(optimizer.kind, optimizer.learning_rate, optimizer.decay,
                           optimizer.rho, optimizer.epsilon_stability)
        except ConfigurationError as exc:
            problems.append(f"optimizer: {exc}")

    warm = None
    if merged["warm_start"] is not None:
        warm = section(WarmStartSection, merged["warm_start"], "warm_start")
        if warm is not None:
            if warm.collect_users < 1:
                problems.append("warm_start.collect_users must be >= 1")
            if warm.pretrain_epochs < 0:
                problems.append("warm_start.pretrain_epochs must be >= 0")

    # cross-module invariants
    if sampler is not None and policy_cfg is not None and sampler.kind in SAMPLER_KINDS:
        if (policy_cfg.kind == "ucb"
                and sampler.kind in (*ENSEMBLE_KINDS, *MULTIHEAD_KINDS)
                and policy_cfg.ucb_samples > sampler.member_count):
            problems.append(
                f"policy.ucb_samples ({policy_cfg.ucb_samples}) cannot exceed "
                f"sampler.member_count ({sampler.member_count}) for {sampler.kind}"
            )
    if not isinstance(merged["seed"], int):
        problems.append(f"seed must be an integer, got {merged['seed']!r}")

    if problems:
        raise ConfigurationError("invalid experiment config:\n  - " + "\n  - ".join(problems))

    return ExperimentConfig(
        environment=environment,
        sampler=sampler,
        policy=policy_cfg,
        loop=loop_cfg,
        optimizer=optimizer,
        warm_start=warm,
        seed=merged["seed"],
        output_dir=merged["output_dir"],
        force_overwrite=force,
    )


def _materialize_sampler_config(section: SamplerSection, input_dim: int, seed: int) -> SamplerConfig:
    layer_sizes = section.layer_sizes or default_layer_sizes(section.kind)
    rate_default, placement = default_dropout(section.kind)
    rate = section.dropout_rate if section.dropout_rate is not None else rate_default
    head_count = section.member_count if section.kind in MULTIHEAD_KINDS else 1
    net = NetworkConfig(
        input_dim=input_dim,
        layer_sizes=layer_sizes,
        head_count=head_count,
        dropout_rate=rate,
        dropout_placement=placement,
    )
    return SamplerConfig(
        kind=section.kind,
        net_config=net,
        member_count=section.member_count,
        mask_keep_prob=section.mask_keep_prob,
        shared_mask_across_candidates=section.shared_mask_across_candidates,
        seed=section.seed if section.seed is not None else derive_seed(seed, "sampler"),
    )


def build_sampler_config(experiment: ExperimentConfig, input_dim: int) -> SamplerConfig:
    return _materialize_sampler_config(experiment.sampler, input_dim, experiment.seed)


def build_optimizer(experiment: ExperimentConfig) -> OptimizerState:
    opt = experiment.optimizer
    return make_optimizer(opt.kind, opt.learning_rate, opt.decay, opt.rho, opt.epsilon_stability)


def build_catalog(experiment: ExperimentConfig) -> Catalog:
    env = experiment.environment
    if env.kind == "catalog":
        catalog = load_catalog(env.users_csv, env.ads_csv, env.labels_csv,
                               label_threshold=env.label_threshold)
    else:
        spec = SynthSpec(
            users=env.users, ads=env.ads, user_dim=env.user_dim, ad_dim=env.ad_dim,
            base_rate=env.base_rate, logit_gain=env.logit_gain,
            truth_hidden=env.truth_hidden,
            seed=env.seed if env.seed is not None else derive_seed(experiment.seed, "environment"),
        )
        catalog = synth_generate(spec)
    holdout_seed = (env.holdout_seed if env.holdout_seed is not None
                    else derive_seed(experiment.seed, "holdout"))
    if env.holdout_ads > 0:
        catalog = split_holdout(catalog, env.holdout_ads, holdout_seed)
    return catalog


def model_label(experiment: ExperimentConfig) -> str:
    """Row label matching the reference comparison tables."""
    kind = experiment.policy.kind
    if kind == "greedy":
        return "Greedy"
    if kind == "epsilon_greedy":
        return "ϵ-greedy"
    suffix = "TS" if kind == "thompson" else "UCB"
    return f"{SAMPLER_LABELS[experiment.sampler.kind]} {suffix}"

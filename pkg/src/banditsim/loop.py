"""Continuous self-training loop: a random bootstrap phase, then a strictly
sequential serve-log-retrain cycle in which every model is fine-tuned only on
impressions its own policy lineage generated."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .config import (
    ExperimentConfig,
    build_catalog,
    build_optimizer,
    build_sampler_config,
    model_label,
)
from .env import (
    Catalog,
    context_matrix,
    eligible_ads,
    env_step,
    make_env_state,
    oracle_topk,
    random_policy_ctr,
)
from .errors import ConfigurationError, ContractViolation, UndefinedMetricError, UsageError
from .metrics import (
    MetricsReport,
    ctr_uplift,
    cumulative_ctr_series,
    log_loss,
    pr_auc,
    rce,
    regret,
    roc_auc,
)
from .nncore import NetworkConfig, OptimizerState
from .policy import (
    PolicyConfig,
    select_epsilon_greedy,
    select_greedy,
    select_thompson,
    select_ucb,
    ucb_scores,
)
from .posterior import Sampler, SamplerConfig, build_sampler, point_predict, retrain, sample_scores
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopConfig:
    bootstrap_users: int = 20
    retrain_every_users: int = 20
    slate_size: int = 7
    epochs_per_retrain: int = 100
    batch_size: int = 64
    buffer_mode: str = "window"  # window | cumulative
    user_order: str = "round_robin_shuffled"  # | uniform_random
    total_user_visits: int = 600

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("bootstrap_users", "retrain_every_users", "slate_size",
                     "batch_size", "total_user_visits"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs_per_retrain < 0:
            problems.append("epochs_per_retrain must be >= 0")
        if self.bootstrap_users > self.total_user_visits:
            problems.append("bootstrap_users cannot exceed total_user_visits")
        if self.buffer_mode not in ("window", "cumulative"):
            problems.append(f"buffer_mode must be window or cumulative, got {self.buffer_mode!r}")
        if self.user_order not in ("round_robin_shuffled", "uniform_random"):
            problems.append(f"unknown user_order {self.user_order!r}")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclass
class Impression:
    """One served ad with its revealed label; the self-training data unit."""

    round: int
    user_id: str
    ad_id: str
    served_score: float
    point_score: float
    label: int
    policy_tag: str
    impression_id: int
    run_id: str = ""


@dataclass
class LoopResult:
    impressions: list[Impression]
    labels_by_round: list[list[int]]
    checkpoint_paths: list[Path]
    retrain_visits: list[int]
    early_stop: str | None = None


@dataclass
class RunOutput:
    report: MetricsReport
    impressions: list[Impression]
    checkpoint_paths: list[Path]
    sampler: Sampler


def training_examples(catalog: Catalog, impressions) -> list[tuple[int, np.ndarray, int]]:
    """(impression_id, context vector, label) records for retraining."""
    out = []
    for imp in impressions:
        u = catalog.user_index(imp.user_id)
        a = catalog.ad_index(imp.ad_id)
        x = np.concatenate([catalog.user_features[u], catalog.ad_features[a]])
        out.append((imp.impression_id, x, imp.label))
    return out


class _UserRotation:
    """Shuffled round-robin passes (or uniform draws) over the active users;
    exhausted users drop out of the rotation."""

    def __init__(self, n_users: int, mode: str, rng: np.random.Generator):
        self.active = list(range(n_users))
        self.mode = mode
        self.rng = rng
        self._queue: list[int] = []

    def next_user(self) -> int | None:
        if not self.active:
            return None
        if self.mode == "uniform_random":
            return self.active[int(self.rng.integers(len(self.active)))]
        while True:
            if not self._queue:
                order = self.rng.permutation(len(self.active))
                self._queue = [self.active[i] for i in order]
            user = self._queue.pop(0)
            if user in self.active:
                return user

    def deactivate(self, user: int) -> None:
        if user in self.active:
            self.active.remove(user)


def _assert_purity(buffer, run_id: str) -> None:
    for imp in buffer:
        if imp.run_id != run_id:
            raise ContractViolation(
                f"impression {imp.impression_id} carries run id {imp.run_id!r}, "
                f"expected {run_id!r}: retraining on foreign data breaks the self-training loop"
            )


def run_serving_loop(catalog: Catalog, sampler: Sampler, policy: PolicyConfig,
                     loop_cfg: LoopConfig, optimizer: OptimizerState, seed: int,
                     run_id: str = "", exclude_served: bool = True,
                     resample_labels: bool = False,
                     checkpoint_dir: Path | None = None,
                     log_path: Path | None = None) -> LoopResult:
    """The serve-log-retrain cycle shared by experiments and dataset collection.

    With log_path given, the impression log is appended and flushed at every
    retrain boundary (and once more at the end of the run).
    """
    state = make_env_state(catalog, seed=derive_seed(seed, "env"),
                           exclude_served=exclude_served, resample_labels=resample_labels)
    rotation = _UserRotation(catalog.n_users, loop_cfg.user_order, derive_rng(seed, "user-order"))
    slate_rng = derive_rng(seed, "bootstrap-slates")
    policy_rng = derive_rng(seed, "policy")
    k = loop_cfg.slate_size

    impressions: list[Impression] = []
    labels_by_round: list[list[int]] = []
    checkpoints: list[Path] = []
    retrain_visits: list[int] = []
    buffer_start = 0
    flushed = 0
    early_stop = None
    visits = 0
    if log_path is not None:
        dataio.write_impressions([], log_path)

    while visits < loop_cfg.total_user_visits:
        user = rotation.next_user()
        if user is None:
            early_stop = "all users exhausted"
            break
        elig = eligible_ads(state, user)
        if elig.size < k:
            rotation.deactivate(user)
            continue

        visit_no = visits + 1
        contexts = context_matrix(catalog, user, elig)
        pos = {int(a): i for i, a in enumerate(elig)}

        if visit_no <= loop_cfg.bootstrap_users:
            slate = [int(a) for a in slate_rng.choice(elig, size=k, replace=False)]
            tag = "random"
            slate_points = point_predict(sampler, context_matrix(catalog, user, np.array(slate)))
            served = {ad: float(p) for ad, p in zip(slate, slate_points)}
            points = served
        else:
            tag = policy.kind
            if policy.kind in ("greedy", "epsilon_greedy"):
                point_vec = point_predict(sampler, contexts)
                full = np.full(catalog.n_ads, -np.inf)
                full[elig] = point_vec
                if policy.kind == "greedy":
                    slate = select_greedy(full, k, elig)
                else:
                    slate = select_epsilon_greedy(full, k, policy.epsilon, elig, policy_rng)
                served = {ad: float(point_vec[pos[ad]]) for ad in slate}
                points = served
            elif policy.kind == "thompson":
                samples = sample_scores(sampler, contexts, 1)
                slate = select_thompson(samples, k, elig)
                served = {ad: float(samples[pos[ad], 0]) for ad in slate}
                slate_points = point_predict(sampler, context_matrix(catalog, user, np.array(slate)))
                points = {ad: float(p) for ad, p in zip(slate, slate_points)}
            else:  # ucb
                samples = sample_scores(sampler, contexts, policy.ucb_samples)
                slate = select_ucb(samples, policy.ucb_order_k, k, elig)
                bounds = ucb_scores(samples, policy.ucb_order_k)
                served = {ad: float(bounds[pos[ad]]) for ad in slate}
                slate_points = point_predict(sampler, context_matrix(catalog, user, np.array(slate)))
                points = {ad: float(p) for ad, p in zip(slate, slate_points)}

        labels = env_step(state, user, slate)
        for ad, label in zip(slate, labels):
            impressions.append(Impression(
                round=visit_no,
                user_id=catalog.user_ids[user],
                ad_id=catalog.ad_ids[ad],
                served_score=served[ad],
                point_score=points[ad],
                label=int(label),
                policy_tag=tag,
                impression_id=len(impressions),
                run_id=run_id,
            ))
        labels_by_round.append([int(v) for v in labels])
        visits = visit_no

        at_boundary = visits == loop_cfg.bootstrap_users or (
            visits > loop_cfg.bootstrap_users
            and (visits - loop_cfg.bootstrap_users) % loop_cfg.retrain_every_users == 0
        )
        if at_boundary and loop_cfg.epochs_per_retrain > 0:
            buffer = impressions[buffer_start:] if loop_cfg.buffer_mode == "window" else impressions
            if buffer:
                _assert_purity(buffer, run_id)
                retrain(sampler, training_examples(catalog, buffer),
                        epochs=loop_cfg.epochs_per_retrain,
                        batch_size=loop_cfg.batch_size, optimizer=optimizer)
                retrain_visits.append(visits)
                logger.debug("retrain at visit %d on %d impressions", visits, len(buffer))
                if loop_cfg.buffer_mode == "window":
                    buffer_start = len(impressions)
                if log_path is not None:
                    dataio.append_impressions(impressions[flushed:], log_path)
                    flushed = len(impressions)
                if checkpoint_dir is not None:
                    path = Path(checkpoint_dir) / f"round_{visits}" / "sampler.ckpt"
                    dataio.save_checkpoint(sampler, path)
                    checkpoints.append(path)

    if log_path is not None and flushed < len(impressions):
        dataio.append_impressions(impressions[flushed:], log_path)
    if visits < loop_cfg.total_user_visits and early_stop is None:
        early_stop = "all users exhausted"
    return LoopResult(impressions=impressions, labels_by_round=labels_by_round,
                      checkpoint_paths=checkpoints, retrain_visits=retrain_visits,
                      early_stop=early_stop)


def _holdout_eval(catalog: Catalog, sampler: Sampler) -> dict:
    cells = np.argwhere(catalog.holdout)
    if cells.size == 0:
        return {"test_pr_auc": None, "roc_auc": None, "rce_pct": None, "log_loss": None}
    X = np.hstack([catalog.user_features[cells[:, 0]], catalog.ad_features[cells[:, 1]]])
    scores = point_predict(sampler, X)
    labels = catalog.labels[cells[:, 0], cells[:, 1]]
    out = {}
    for name, fn in (("test_pr_auc", pr_auc), ("roc_auc", roc_auc), ("rce_pct", rce),
                     ("log_loss", log_loss)):
        try:
            out[name] = fn(scores, labels)
        except UndefinedMetricError:
            out[name] = None
    return out


def _train_pr_auc(catalog: Catalog, sampler: Sampler, impressions) -> float | None:
    if not impressions:
        return None
    examples = training_examples(catalog, impressions)
    X = np.stack([x for _, x, _ in examples])
    y = np.asarray([label for _, _, label in examples])
    try:
        return pr_auc(point_predict(sampler, X), y)
    except UndefinedMetricError:
        return None


def run_experiment(experiment: ExperimentConfig, catalog: Catalog | None = None,
                   write_artifacts: bool = True) -> RunOutput:
    """Execute one full experiment: environment build, optional warm start,
    serving loop, metrics, and run artifacts under the output directory."""
    digest = dataio.canonical_config_digest(experiment)
    run_id = f"{digest[:12]}-{experiment.seed}"
    if catalog is None:
        catalog = build_catalog(experiment)
    sampler_cfg = build_sampler_config(experiment, catalog.context_dim)
    sampler = build_sampler(sampler_cfg)
    optimizer = build_optimizer(experiment)

    run_dir = None
    if write_artifacts and experiment.output_dir is not None:
        run_dir = dataio.prepare_run_dir(experiment.output_dir, force=experiment.force_overwrite)

    warm_train_pr_auc = None
    if experiment.warm_start is not None:
        ws = experiment.warm_start
        dataset = collect_greedy_dataset(
            catalog, sampler_cfg.net_config, ws.collect_users,
            seed=derive_seed(experiment.seed, "warm-start-collection"),
            loop_cfg=experiment.loop, optimizer=optimizer,
            exclude_served=experiment.environment.exclude_served,
        )
        sampler, warm_train_pr_auc = warm_start_pretrain(
            sampler, training_examples(catalog, dataset), ws.pretrain_epochs,
            batch_size=experiment.loop.batch_size, optimizer=optimizer,
        )
        logger.info("warm start on %d impressions for %d epochs: train PR-AUC %.4f",
                    len(dataset), ws.pretrain_epochs, warm_train_pr_auc)

    result = run_serving_loop(
        catalog, sampler, experiment.policy, experiment.loop, optimizer,
        seed=experiment.seed, run_id=run_id,
        exclude_served=experiment.environment.exclude_served,
        resample_labels=experiment.environment.resample_labels,
        checkpoint_dir=(run_dir / "checkpoints") if run_dir is not None else None,
        log_path=(run_dir / "impressions.log") if run_dir is not None else None,
    )

    total = sum(len(r) for r in result.labels_by_round)
    clicks = sum(sum(r) for r in result.labels_by_round)
    cumulative = clicks / total if total else 0.0
    baseline = random_policy_ctr(catalog)
    regret_series = None
    if catalog.ground_truth_ctr is not None and result.impressions:
        top = oracle_topk(catalog, experiment.loop.slate_size)
        per_round, _ = regret(result.impressions, catalog.ground_truth_ctr, top,
                              catalog.user_ids, catalog.ad_ids)
        regret_series = [float(v) for v in per_round]

    report = MetricsReport(
        cumulative_ctr=cumulative,
        ctr_uplift_pct=ctr_uplift(cumulative, baseline),
        random_policy_ctr=baseline,
        train_pr_auc=(warm_train_pr_auc if warm_train_pr_auc is not None
                      else _train_pr_auc(catalog, sampler, result.impressions)),
        ctr_series=[float(v) for v in cumulative_ctr_series(result.labels_by_round)],
        regret_series=regret_series,
        metadata={
            "model": model_label(experiment),
            "seed": experiment.seed,
            "config_digest": digest,
            "run_id": run_id,
            "user_visits": len(result.labels_by_round),
            "impressions": total,
            "retrain_visits": result.retrain_visits,
            "early_stop": result.early_stop,
            "warm_start_train_pr_auc": warm_train_pr_auc,
        },
        **_holdout_eval(catalog, sampler),
    )

    if run_dir is not None:
        dataio.write_report(report, run_dir / "report.json")
        dataio.write_series(report, run_dir / "series.csv")
        dataio.write_manifest(run_dir, digest)
    return RunOutput(report=report, impressions=result.impressions,
                     checkpoint_paths=result.checkpoint_paths, sampler=sampler)


def collect_greedy_dataset(catalog: Catalog, net_config: NetworkConfig, n_users: int,
                           seed: int, loop_cfg: LoopConfig | None = None,
                           optimizer: OptimizerState | None = None,
                           exclude_served: bool = True) -> list[Impression]:
    """Impression log of a single-network greedy self-training run over
    n_users visits (the warm-start data source)."""
    if n_users < 1:
        raise UsageError(f"n_users must be >= 1, got {n_users}")
    base = loop_cfg or LoopConfig()
    cfg = LoopConfig(
        bootstrap_users=min(base.bootstrap_users, n_users),
        retrain_every_users=base.retrain_every_users,
        slate_size=base.slate_size,
        epochs_per_retrain=base.epochs_per_retrain,
        batch_size=base.batch_size,
        buffer_mode=base.buffer_mode,
        user_order=base.user_order,
        total_user_visits=n_users,
    )
    net = NetworkConfig(
        input_dim=catalog.context_dim,
        layer_sizes=net_config.layer_sizes,
        head_count=1,
        dropout_rate=0.0,
        dropout_placement="none",
    )
    sampler = build_sampler(SamplerConfig(kind="sgd_ensemble", net_config=net,
                                          member_count=1, seed=derive_seed(seed, "sampler")))
    from .nncore import make_optimizer

    opt = optimizer or make_optimizer("rmsprop", 0.1, 0.5)
    policy = PolicyConfig(kind="greedy", slate_size=cfg.slate_size)
    result = run_serving_loop(catalog, sampler, policy, cfg, opt, seed=seed,
                              run_id=f"greedy-collect-{seed}", exclude_served=exclude_served)
    return result.impressions


def warm_start_pretrain(sampler: Sampler, examples, epochs: int, batch_size: int = 64,
                        optimizer: OptimizerState | None = None) -> tuple[Sampler, float]:
    """Train on a fixed dataset before the online loop starts; returns the
    sampler plus its training PR-AUC on that dataset."""
    examples = list(examples)
    if not examples:
        raise UsageError("warm start needs a nonempty dataset")
    if epochs > 0:
        from .nncore import make_optimizer

        opt = optimizer or make_optimizer("rmsprop", 0.1, 0.5)
        retrain(sampler, examples, epochs=epochs, batch_size=batch_size, optimizer=opt)
    X = np.stack([x for _, x, _ in examples])
    y = np.asarray([label for _, _, label in examples])
    return sampler, pr_auc(point_predict(sampler, X), y)

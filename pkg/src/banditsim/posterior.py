"""Posterior CTR samplers: one uniform interface over bootstrap ensembles,
multi-head networks, SGD ensembles, MC dropout and the hybrid scheme whose
second-to-last dropout layer doubles as implicit heads.

Every kind produces (candidates x S) score-sample matrices for the policy
layer plus a deterministic point prediction for evaluation, and retrains
warm-started on the impressions its own masks assign to each member.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UsageError
from .nncore import (
    PROB_CLIP,
    NetworkConfig,
    NetworkParams,
    OptimizerState,
    forward_logits_batch,
    head_logits,
    hidden_stack,
    init_network,
    make_optimizer,
    predict_proba_batch,
    sample_keep_masks,
    sigmoid,
    train_step,
)
from .seeding import derive_rng, derive_seed

SAMPLER_KINDS = ("bootstrap", "multihead", "sgd_ensemble", "multihead_sgd",
                 "mc_dropout", "hybrid")
ENSEMBLE_KINDS = ("bootstrap", "sgd_ensemble")
MULTIHEAD_KINDS = ("multihead", "multihead_sgd")
MC_KINDS = ("mc_dropout", "hybrid")
MASKED_DATA_KINDS = ("bootstrap", "multihead")


def _default_scheme(kind: str) -> str:
    return "bernoulli_mask" if kind in MASKED_DATA_KINDS else "full_data"


@dataclass(frozen=True)
class SamplerConfig:
    """Which approximation scheme to run and how its members are fed data."""

    kind: str
    net_config: NetworkConfig
    member_count: int = 10
    data_scheme: str | None = None  # inferred from kind when omitted
    mask_keep_prob: float = 0.5
    shared_mask_across_candidates: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.data_scheme is None:
            object.__setattr__(self, "data_scheme", _default_scheme(self.kind))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.kind not in SAMPLER_KINDS:
            problems.append(f"kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if self.member_count < 1:
            problems.append(f"member_count must be >= 1, got {self.member_count}")
        if not 0.0 < self.mask_keep_prob <= 1.0:
            problems.append(f"mask_keep_prob must be in (0, 1], got {self.mask_keep_prob}")
        if self.kind in MASKED_DATA_KINDS and self.data_scheme != "bernoulli_mask":
            problems.append(f"{self.kind} requires data_scheme bernoulli_mask")
        if self.kind in ("sgd_ensemble", "multihead_sgd", *MC_KINDS) and self.data_scheme != "full_data":
            problems.append(f"{self.kind} requires data_scheme full_data")
        net = self.net_config
        # rate-0 mc_dropout is the deterministic limit and stays legal;
        # a rate-0 hybrid has no implicit heads at all
        if self.kind == "hybrid" and net.dropout_rate <= 0.0:
            problems.append("hybrid requires net_config.dropout_rate > 0")
        if self.kind == "mc_dropout" and net.dropout_placement != "all_hidden":
            problems.append("mc_dropout requires dropout_placement all_hidden")
        if self.kind == "hybrid" and net.dropout_placement != "second_to_last":
            problems.append("hybrid requires dropout_placement second_to_last")
        if self.kind in (*ENSEMBLE_KINDS, *MC_KINDS) and net.head_count != 1:
            problems.append(f"{self.kind} members are single-output networks (head_count 1)")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def network_count(self) -> int:
        return self.member_count if self.kind in ENSEMBLE_KINDS else 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "net_config": self.net_config.to_dict(),
            "member_count": self.member_count,
            "data_scheme": self.data_scheme,
            "mask_keep_prob": self.mask_keep_prob,
            "shared_mask_across_candidates": self.shared_mask_across_candidates,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        return cls(
            kind=str(data["kind"]),
            net_config=NetworkConfig.from_dict(data["net_config"]),
            member_count=int(data["member_count"]),
            data_scheme=str(data["data_scheme"]),
            mask_keep_prob=float(data["mask_keep_prob"]),
            shared_mask_across_candidates=bool(data["shared_mask_across_candidates"]),
            seed=int(data["seed"]),
        )


class Sampler:
    """Live state of one posterior approximation: member networks, their
    optimizer states, and the run-deterministic rng streams."""

    def __init__(self, config: SamplerConfig, members: list[NetworkParams]):
        self.config = config
        self.members = members
        self.optimizer_states: list[OptimizerState] | None = None
        # per-context bottom-stack computations for the mc kinds; the hybrid
        # scheme's whole point is that this stays |contexts| regardless of S
        self.shared_forward_count = 0
        self._member_rngs = [derive_rng(config.seed, "member-train", b)
                             for b in range(len(members))]
        self._score_rng = derive_rng(config.seed, "score-sampling")

    @property
    def member_count(self) -> int:
        return self.config.member_count


def build_sampler(config: SamplerConfig) -> Sampler:
    """Initialize the member networks for the configured scheme."""
    config.validate()
    net = config.net_config
    if config.kind in ENSEMBLE_KINDS:
        members = [init_network(net, derive_seed(config.seed, "member-init", b))
                   for b in range(config.member_count)]
    elif config.kind in MULTIHEAD_KINDS:
        if net.head_count not in (1, config.member_count):
            raise ConfigurationError(
                f"multihead net head_count must be 1 (inferred) or member_count, got {net.head_count}"
            )
        net = dataclasses.replace(net, head_count=config.member_count)
        members = [init_network(net, derive_seed(config.seed, "member-init", 0))]
    else:  # mc kinds: one network, dropout masks act as the heads
        members = [init_network(net, derive_seed(config.seed, "member-init", 0))]
    return Sampler(config, members)


def assign_membership(sampler: Sampler, example_id: int) -> np.ndarray:
    """Per-member 0/1 inclusion mask for one training example.

    Pure function of (sampler seed, example_id). An all-zero Bernoulli draw
    is redrawn once, then forced to include one uniform member, so every
    example trains at least one member.
    """
    b = sampler.config.member_count
    if sampler.config.data_scheme == "full_data":
        return np.ones(b, dtype=np.int8)
    rng = derive_rng(sampler.config.seed, "membership", int(example_id))
    p = sampler.config.mask_keep_prob
    mask = rng.random(b) < p
    if not mask.any():
        mask = rng.random(b) < p
        if not mask.any():
            mask[rng.integers(b)] = True
    return mask.astype(np.int8)


def membership_matrix(sampler: Sampler, example_ids: Sequence[int]) -> np.ndarray:
    return np.stack([assign_membership(sampler, i) for i in example_ids])


def _clip(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def _last_hidden_keep_mask(net: NetworkConfig, rng: np.random.Generator, n: int,
                           shared: bool) -> np.ndarray:
    keep = 1.0 - net.dropout_rate
    shape = (1, net.last_hidden_width) if shared else (n, net.last_hidden_width)
    return (rng.random(shape) < keep).astype(np.float64)


def sample_scores(sampler: Sampler, contexts, s: int) -> np.ndarray:
    """(candidates x S) matrix of posterior CTR draws, entries in (0, 1).

    Ensemble and multihead kinds enumerate the first S members/heads in fixed
    order; mc kinds run one stochastic pass per sample with a fresh mask per
    (context, sample) pair. The hybrid kind computes the layers below its
    dropout layer once per context and replays only the dropout layer and head.
    """
    if s < 1:
        raise UsageError(f"sample count must be >= 1, got {s}")
    X = np.asarray(contexts, dtype=np.float64)
    if X.ndim != 2:
        raise UsageError(f"contexts must be a 2-D matrix, got shape {X.shape}")
    n = X.shape[0]
    cfg = sampler.config
    kind = cfg.kind

    if kind in ENSEMBLE_KINDS:
        if s > cfg.member_count:
            raise ConfigurationError(
                f"{kind} cannot draw {s} samples from {cfg.member_count} members without replacement"
            )
        cols = [predict_proba_batch(sampler.members[m], X)[:, 0] for m in range(s)]
        return np.stack(cols, axis=1)

    if kind in MULTIHEAD_KINDS:
        if s > cfg.member_count:
            raise ConfigurationError(
                f"{kind} cannot draw {s} samples from {cfg.member_count} heads without replacement"
            )
        return predict_proba_batch(sampler.members[0], X)[:, :s]

    net = sampler.members[0]
    shared_mask = cfg.shared_mask_across_candidates
    if kind == "mc_dropout":
        cols = []
        for _ in range(s):
            masks = sample_keep_masks(net.config, sampler._score_rng, n, shared_rows=shared_mask)
            cols.append(_clip(sigmoid(forward_logits_batch(net, X, masks)[:, 0])))
            sampler.shared_forward_count += n
        return np.stack(cols, axis=1)

    # hybrid: bottom layers once, dropout layer + head per sample
    shared = hidden_stack(net, X)
    sampler.shared_forward_count += n
    keep = 1.0 - net.config.dropout_rate
    cols = []
    for _ in range(s):
        mask = _last_hidden_keep_mask(net.config, sampler._score_rng, n, shared_mask)
        cols.append(_clip(sigmoid(head_logits(net, shared * mask / keep)[:, 0])))
    return np.stack(cols, axis=1)


def point_predict(sampler: Sampler, contexts) -> np.ndarray:
    """Deterministic per-candidate score: dropout disabled for mc kinds,
    arithmetic mean over members/heads otherwise."""
    X = np.asarray(contexts, dtype=np.float64)
    kind = sampler.config.kind
    if kind in ENSEMBLE_KINDS:
        preds = [predict_proba_batch(m, X)[:, 0] for m in sampler.members]
        return np.mean(preds, axis=0)
    if kind in MULTIHEAD_KINDS:
        return predict_proba_batch(sampler.members[0], X).mean(axis=1)
    return predict_proba_batch(sampler.members[0], X)[:, 0]


def _epoch_batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def _check_optimizer(sampler: Sampler, optimizer: OptimizerState) -> list[OptimizerState]:
    """Materialize per-member optimizer states on first retrain; later calls
    keep the accumulated state and must not change the settings."""
    if sampler.optimizer_states is None:
        sampler.optimizer_states = [
            make_optimizer(optimizer.kind, optimizer.learning_rate, optimizer.decay,
                           optimizer.rho, optimizer.epsilon_stability)
            for _ in sampler.members
        ]
    else:
        existing = sampler.optimizer_states[0]
        same = (existing.kind == optimizer.kind
                and existing.learning_rate == optimizer.learning_rate
                and existing.decay == optimizer.decay
                and existing.rho == optimizer.rho)
        if not same:
            raise ConfigurationError(
                "optimizer settings changed between retrains; state persists across retrains"
            )
    return sampler.optimizer_states


def retrain(sampler: Sampler, examples: Sequence[tuple[int, np.ndarray, int]],
            epochs: int, batch_size: int, optimizer: OptimizerState) -> Sampler:
    """Warm-started fine-tuning on (example_id, features, label) records.

    Members train only on examples their membership mask includes, in a
    run-deterministic per-member shuffle; optimizer state carries over from
    previous retrains.
    """
    examples = list(examples)
    if not examples:
        raise UsageError("retrain needs a nonempty example list")
    if epochs < 0 or batch_size < 1:
        raise UsageError(f"bad epochs/batch_size: {epochs}/{batch_size}")
    states = _check_optimizer(sampler, optimizer)
    if epochs == 0:
        return sampler

    ids = [int(e[0]) for e in examples]
    X = np.stack([np.asarray(e[1], dtype=np.float64) for e in examples])
    y = np.asarray([float(e[2]) for e in examples])
    membership = membership_matrix(sampler, ids)

    cfg = sampler.config
    if cfg.kind in ENSEMBLE_KINDS:
        for b in range(cfg.member_count):
            subset = np.flatnonzero(membership[:, b])
            if subset.size == 0:
                continue
            params, opt = sampler.members[b], states[b]
            rng = sampler._member_rngs[b]
            for _ in range(epochs):
                order = subset[rng.permutation(subset.size)]
                for batch in _epoch_batches(order, batch_size):
                    params, opt, _ = train_step(params, opt, (X[batch], y[batch]), rng=rng)
            sampler.members[b], states[b] = params, opt
    else:
        params, opt = sampler.members[0], states[0]
        rng = sampler._member_rngs[0]
        multihead = cfg.kind in MULTIHEAD_KINDS
        for _ in range(epochs):
            order = rng.permutation(len(examples))
            for batch in _epoch_batches(order, batch_size):
                head_masks = membership[batch] if multihead else None
                params, opt, _ = train_step(params, opt, (X[batch], y[batch]),
                                            head_masks=head_masks, rng=rng)
        sampler.members[0], states[0] = params, opt
    return sampler

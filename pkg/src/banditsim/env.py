"""Simulated ad-serving environment.

Backed either by a user-ad rating matrix loaded from CSV (binarized by a
star threshold) or by a synthetic catalog whose ground-truth CTR function is
a small random network, so the optimal slate is known exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigurationError,
    ContractViolation,
    IntegrityError,
    ParseError,
    UsageError,
)
from .nncore import NetworkConfig, forward_logits_batch, init_network, sigmoid
from .seeding import derive_rng, derive_seed


@dataclass
class Catalog:
    """Ground truth of the simulation: features, full label matrix, holdout mask."""

    user_ids: list[str]
    ad_ids: list[str]
    user_features: np.ndarray  # (U, d_u)
    ad_features: np.ndarray  # (A, d_a)
    labels: np.ndarray  # (U, A) int8
    holdout: np.ndarray  # (U, A) bool
    ground_truth_ctr: np.ndarray | None = None
    user_feature_names: list[str] = field(default_factory=list)
    ad_feature_names: list[str] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_ads(self) -> int:
        return len(self.ad_ids)

    @property
    def context_dim(self) -> int:
        return self.user_features.shape[1] + self.ad_features.shape[1]

    def user_index(self, user_id: str) -> int:
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise UsageError(f"unknown user id {user_id!r}") from None

    def ad_index(self, ad_id: str) -> int:
        try:
            return self.ad_ids.index(ad_id)
        except ValueError:
            raise UsageError(f"unknown ad id {ad_id!r}") from None

    def validate(self) -> None:
        u, a = self.n_users, self.n_ads
        if self.user_features.shape[0] != u or self.ad_features.shape[0] != a:
            raise IntegrityError("feature matrices do not match the id lists")
        if self.labels.shape != (u, a) or self.holdout.shape != (u, a):
            raise IntegrityError("label/holdout matrices must be users x ads")
        if not np.isin(self.labels, (0, 1)).all():
            raise IntegrityError("labels must be binary")
        if not (np.isfinite(self.user_features).all() and np.isfinite(self.ad_features).all()):
            raise IntegrityError("feature matrices contain non-finite values")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic catalog with known per-cell CTR."""

    users: int = 120
    ads: int = 300
    user_dim: int = 250
    ad_dim: int = 323
    base_rate: float = 0.2
    logit_gain: float = 2.5
    truth_hidden: tuple[int, ...] = (32,)
    seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        for name in ("users", "ads", "user_dim", "ad_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0.0 < self.base_rate < 1.0:
            problems.append(f"base_rate must be in (0, 1), got {self.base_rate}")
        if self.logit_gain < 0:
            problems.append("logit_gain must be >= 0")
        if problems:
            raise ConfigurationError("; ".join(problems))
        object.__setattr__(self, "truth_hidden", tuple(int(s) for s in self.truth_hidden))

    def to_dict(self) -> dict:
        return {
            "users": self.users,
            "ads": self.ads,
            "user_dim": self.user_dim,
            "ad_dim": self.ad_dim,
            "base_rate": self.base_rate,
            "logit_gain": self.logit_gain,
            "truth_hidden": list(self.truth_hidden),
            "seed": self.seed,
        }


# ---------------------------------------------------------------- loading


def _read_feature_csv(path, id_column: str) -> tuple[list[str], list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or header[0] != id_column:
            raise ParseError(f"{path}: first column must be {id_column!r}, got {header[:1]}")
        for col in header[1:]:
            if not (col.startswith("c_") or col.startswith("n_")):
                raise ParseError(f"{path}: feature column {col!r} must carry a c_ or n_ prefix")
        rows = []
        ids = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0])
            rows.append(row[1:])
    if len(set(ids)) != len(ids):
        raise IntegrityError(f"{path}: duplicate ids")
    return ids, header[1:], rows


def _encode_features(columns: list[str], rows: list[list[str]], path) -> tuple[np.ndarray, list[str]]:
    """One-hot expand c_ columns (categories sorted), min-max scale n_ columns."""
    n = len(rows)
    blocks: list[np.ndarray] = []
    names: list[str] = []
    for j, col in enumerate(columns):
        values = [row[j] for row in rows]
        if col.startswith("n_"):
            try:
                vec = np.asarray([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}: column {col!r}: {exc}") from None
            if not np.isfinite(vec).all():
                raise ParseError(f"{path}: column {col!r} contains non-finite values")
            lo, hi = vec.min(), vec.max()
            scaled = (vec - lo) / (hi - lo) if hi > lo else np.zeros(n)
            blocks.append(scaled[:, None])
            names.append(col)
        else:
            categories = sorted(set(values))
            onehot = np.zeros((n, len(categories)))
            index = {c: i for i, c in enumerate(categories)}
            for i, v in enumerate(values):
                onehot[i, index[v]] = 1.0
            blocks.append(onehot)
            names.extend(f"{col}={c}" for c in categories)
    return np.hstack(blocks) if blocks else np.zeros((n, 0)), names


def load_catalog(users_path, ads_path, labels_path, label_threshold: float = 4.0) -> Catalog:
    """Parse the three catalog CSVs into a fully dense binary label matrix.

    Ratings at or above label_threshold become clicks. Every (user, ad) cell
    must be present exactly once.
    """
    user_ids, user_cols, user_rows = _read_feature_csv(users_path, "user_id")
    ad_ids, ad_cols, ad_rows = _read_feature_csv(ads_path, "ad_id")
    user_features, user_names = _encode_features(user_cols, user_rows, users_path)
    ad_features, ad_names = _encode_features(ad_cols, ad_rows, ads_path)

    u_index = {u: i for i, u in enumerate(user_ids)}
    a_index = {a: i for i, a in enumerate(ad_ids)}
    labels = np.full((len(user_ids), len(ad_ids)), -1, dtype=np.int8)
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user_id", "ad_id", "rating"]:
            raise ParseError(f"{labels_path}: header must be user_id,ad_id,rating")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{labels_path}:{lineno}: expected 3 fields, got {len(row)}")
            uid, aid, rating_text = row
            if uid not in u_index:
                raise IntegrityError(f"{labels_path}:{lineno}: unknown user {uid!r}")
            if aid not in a_index:
                raise IntegrityError(f"{labels_path}:{lineno}: unknown ad {aid!r}")
            try:
                rating = float(rating_text)
            except ValueError:
                raise ParseError(f"{labels_path}:{lineno}: bad rating {rating_text!r}") from None
            ui, ai = u_index[uid], a_index[aid]
            if labels[ui, ai] != -1:
                raise IntegrityError(f"{labels_path}:{lineno}: duplicate cell ({uid}, {aid})")
            labels[ui, ai] = 1 if rating >= label_threshold else 0
    missing = int((labels == -1).sum())
    if missing:
        raise IntegrityError(f"{labels_path}: interaction matrix not full, {missing} cells missing")

    catalog = Catalog(
        user_ids=user_ids,
        ad_ids=ad_ids,
        user_features=user_features,
        ad_features=ad_features,
        labels=labels,
        holdout=np.zeros_like(labels, dtype=bool),
        user_feature_names=user_names,
        ad_feature_names=ad_names,
    )
    catalog.validate()
    return catalog


def split_holdout(catalog: Catalog, holdout_per_user: int, seed: int) -> Catalog:
    """Mark holdout_per_user uniformly chosen ads per user as test cells."""
    if holdout_per_user >= catalog.n_ads:
        raise ConfigurationError(
            f"holdout_per_user ({holdout_per_user}) must be < ad count ({catalog.n_ads})"
        )
    if holdout_per_user < 0:
        raise ConfigurationError("holdout_per_user must be >= 0")
    rng = derive_rng(seed, "holdout-split")
    mask = np.zeros((catalog.n_users, catalog.n_ads), dtype=bool)
    for u in range(catalog.n_users):
        if holdout_per_user:
            mask[u, rng.choice(catalog.n_ads, size=holdout_per_user, replace=False)] = True
    return replace(catalog, holdout=mask)


# ---------------------------------------------------------------- synthetic


def _calibration_shift(logits: np.ndarray, base_rate: float) -> float:
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if sigmoid(logits + mid).mean() < base_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def synth_generate(spec: SynthSpec) -> Catalog:
    """Sample a catalog whose CTR(u, a) is a calibrated random network of the
    concatenated features; labels are one frozen Bernoulli draw per cell.

    Features are uniform on [-0.5, 0.5]: zero-centered inputs keep relu units
    alive under aggressive training (all-positive features make nets collapse
    to constants far more often).
    """
    user_features = derive_rng(spec.seed, "user-features").random((spec.users, spec.user_dim)) - 0.5
    ad_features = derive_rng(spec.seed, "ad-features").random((spec.ads, spec.ad_dim)) - 0.5
    truth_cfg = NetworkConfig(input_dim=spec.user_dim + spec.ad_dim,
                              layer_sizes=spec.truth_hidden, head_count=1)
    truth = init_network(truth_cfg, derive_seed(spec.seed, "truth-net"))

    raw = np.empty((spec.users, spec.ads))
    for u in range(spec.users):
        X = np.hstack([np.tile(user_features[u], (spec.ads, 1)), ad_features])
        raw[u] = forward_logits_batch(truth, X)[:, 0]
    std = raw.std()
    z = (raw - raw.mean()) / std if std > 1e-12 else np.zeros_like(raw)
    logits = spec.logit_gain * z
    shift = _calibration_shift(logits, spec.base_rate)
    ctr = sigmoid(logits + shift)

    labels = (derive_rng(spec.seed, "labels").random(ctr.shape) < ctr).astype(np.int8)
    catalog = Catalog(
        user_ids=[f"u{i:04d}" for i in range(spec.users)],
        ad_ids=[f"a{i:04d}" for i in range(spec.ads)],
        user_features=user_features,
        ad_features=ad_features,
        labels=labels,
        holdout=np.zeros_like(labels, dtype=bool),
        ground_truth_ctr=ctr,
        user_feature_names=[f"n_f{j}" for j in range(spec.user_dim)],
        ad_feature_names=[f"n_f{j}" for j in range(spec.ad_dim)],
    )
    catalog.validate()
    return catalog


def oracle_topk(catalog: Catalog, k: int) -> np.ndarray:
    """Per-user indices of the k best non-holdout ads by ground-truth CTR."""
    if catalog.ground_truth_ctr is None:
        raise UsageError("oracle_topk requires a synthetic catalog with ground-truth CTRs")
    masked = np.where(catalog.holdout, -np.inf, catalog.ground_truth_ctr)
    # stable on ties: argsort of (-ctr, index)
    order = np.lexsort((np.tile(np.arange(catalog.n_ads), (catalog.n_users, 1)), -masked), axis=1)
    return order[:, :k]


# ---------------------------------------------------------------- serving state


@dataclass
class EnvState:
    """Mutable serving state owned by a single simulation loop."""

    catalog: Catalog
    exclude_served: bool = True
    resample_labels: bool = False
    rng: np.random.Generator = None  # type: ignore[assignment]
    shown: list[set[int]] = field(default_factory=list)
    round_count: int = 0


def make_env_state(catalog: Catalog, seed: int = 0, exclude_served: bool = True,
                   resample_labels: bool = False) -> EnvState:
    if resample_labels and catalog.ground_truth_ctr is None:
        raise ConfigurationError("resample_labels requires ground-truth CTRs")
    return EnvState(
        catalog=catalog,
        exclude_served=exclude_served,
        resample_labels=resample_labels,
        rng=derive_rng(seed, "env-resample"),
        shown=[set() for _ in range(catalog.n_users)],
    )


def context_features(catalog: Catalog, user: int, ad: int) -> np.ndarray:
    """Concatenated [user features; ad features] vector."""
    if not 0 <= user < catalog.n_users:
        raise UsageError(f"unknown user index {user}")
    if not 0 <= ad < catalog.n_ads:
        raise UsageError(f"unknown ad index {ad}")
    return np.concatenate([catalog.user_features[user], catalog.ad_features[ad]])


def context_matrix(catalog: Catalog, user: int, ads: np.ndarray) -> np.ndarray:
    """context_features for one user and many ads, stacked."""
    if not 0 <= user < catalog.n_users:
        raise UsageError(f"unknown user index {user}")
    ads = np.asarray(ads, dtype=np.int64)
    return np.hstack([
        np.tile(catalog.user_features[user], (ads.size, 1)),
        catalog.ad_features[ads],
    ])


def eligible_ads(state: EnvState, user: int) -> np.ndarray:
    """All ads minus the user's holdout cells minus (optionally) already-served
    ads; empty result signals exhaustion to the loop."""
    mask = ~state.catalog.holdout[user]
    if state.exclude_served and state.shown[user]:
        mask = mask.copy()
        mask[sorted(state.shown[user])] = False
    return np.flatnonzero(mask)


def env_step(state: EnvState, user: int, slate) -> np.ndarray:
    """Serve a slate, reveal its labels, and advance the serving state."""
    slate = [int(a) for a in slate]
    if len(set(slate)) != len(slate):
        raise ContractViolation(f"slate contains repeated ads: {slate}")
    ok = set(eligible_ads(state, user).tolist())
    bad = [a for a in slate if a not in ok]
    if bad:
        raise ContractViolation(f"ads {bad} are not eligible for user {user}")
    if state.resample_labels:
        ctr = state.catalog.ground_truth_ctr[user, slate]
        labels = (state.rng.random(len(slate)) < ctr).astype(np.int8)
    else:
        labels = state.catalog.labels[user, slate].copy()
    state.shown[user].update(slate)
    state.round_count += 1
    return labels


def random_policy_ctr(catalog: Catalog) -> float:
    """Exact expected CTR of uniform serving: mean label over non-holdout cells."""
    served = ~catalog.holdout
    return float(catalog.labels[served].mean())

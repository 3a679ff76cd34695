import numpy as np
import pytest

from banditsim.env import (
    Catalog,
    EnvState,
    SynthSpec,
    context_features,
    context_matrix,
    eligible_ads,
    env_step,
    load_catalog,
    make_env_state,
    oracle_topk,
    random_policy_ctr,
    split_holdout,
    synth_generate,
)
from banditsim.errors import (
    ConfigurationError,
    ContractViolation,
    IntegrityError,
    ParseError,
    UsageError,
)


def write_catalog_files(tmp_path, ratings, user_rows, ad_rows, user_header, ad_header):
    users = tmp_path / "users.csv"
    ads = tmp_path / "ads.csv"
    labels = tmp_path / "labels.csv"
    users.write_text("\n".join([user_header] + user_rows) + "\n")
    ads.write_text("\n".join([ad_header] + ad_rows) + "\n")
    labels.write_text("\n".join(["user_id,ad_id,rating"] + ratings) + "\n")
    return users, ads, labels


@pytest.fixture
def tiny_catalog_files(tmp_path):
    user_rows = ["u0,red,0.0", "u1,green,5.0", "u2,blue,10.0"]
    ad_rows = ["a0,1.0", "a1,3.0"]
    ratings = [
        "u0,a0,5", "u0,a1,1",
        "u1,a0,4", "u1,a1,2",
        "u2,a0,1", "u2,a1,5",
    ]
    return write_catalog_files(tmp_path, ratings, user_rows, ad_rows,
                               "user_id,c_color,n_age", "ad_id,n_price")


def test_load_catalog_one_hot_and_scaling(tiny_catalog_files):
    cat = load_catalog(*tiny_catalog_files)
    assert cat.n_users == 3 and cat.n_ads == 2
    # c_color -> 3 one-hot columns (sorted: blue, green, red) + n_age scaled
    assert cat.user_feature_names == ["c_color=blue", "c_color=green", "c_color=red", "n_age"]
    onehot = cat.user_features[:, :3]
    assert np.all(onehot.sum(axis=1) == 1.0)
    assert cat.user_features[:, 3].tolist() == [0.0, 0.5, 1.0]
    assert cat.ad_features[:, 0].tolist() == [0.0, 1.0]
    # rating >= 4 -> click
    assert cat.labels.tolist() == [[1, 0], [1, 0], [0, 1]]


def test_load_catalog_threshold_configurable(tiny_catalog_files):
    cat = load_catalog(*tiny_catalog_files, label_threshold=2.0)
    assert cat.labels.tolist() == [[1, 0], [1, 1], [0, 1]]


def test_load_catalog_missing_cell_rejected(tmp_path):
    files = write_catalog_files(
        tmp_path,
        ["u0,a0,5", "u0,a1,1", "u1,a0,4"],  # (u1, a1) missing
        ["u0,1.0", "u1,2.0"], ["a0,1.0", "a1,2.0"],
        "user_id,n_x", "ad_id,n_y",
    )
    with pytest.raises(IntegrityError, match="not full"):
        load_catalog(*files)


def test_load_catalog_unknown_ad_rejected(tmp_path):
    files = write_catalog_files(
        tmp_path,
        ["u0,a0,5", "u0,a9,1"],
        ["u0,1.0"], ["a0,1.0"],
        "user_id,n_x", "ad_id,n_y",
    )
    with pytest.raises(IntegrityError, match="unknown ad"):
        load_catalog(*files)


def test_load_catalog_duplicate_cell_rejected(tmp_path):
    files = write_catalog_files(
        tmp_path,
        ["u0,a0,5", "u0,a0,3"],
        ["u0,1.0"], ["a0,1.0"],
        "user_id,n_x", "ad_id,n_y",
    )
    with pytest.raises(IntegrityError, match="duplicate cell"):
        load_catalog(*files)


def test_load_catalog_bad_rating_reports_line(tmp_path):
    files = write_catalog_files(
        tmp_path,
        ["u0,a0,five"],
        ["u0,1.0"], ["a0,1.0"],
        "user_id,n_x", "ad_id,n_y",
    )
    with pytest.raises(ParseError, match=":2"):
        load_catalog(*files)


def test_load_catalog_rejects_unprefixed_columns(tmp_path):
    files = write_catalog_files(
        tmp_path, ["u0,a0,5"], ["u0,1.0"], ["a0,1.0"],
        "user_id,age", "ad_id,n_y",
    )
    with pytest.raises(ParseError, match="prefix"):
        load_catalog(*files)


# ---------------------------------------------------------------- holdout


def test_split_holdout_counts_and_determinism():
    cat = synth_generate(SynthSpec(users=10, ads=30, user_dim=4, ad_dim=5, seed=1))
    held = split_holdout(cat, 5, seed=9)
    assert held.holdout.sum(axis=1).tolist() == [5] * 10
    again = split_holdout(cat, 5, seed=9)
    assert np.array_equal(held.holdout, again.holdout)
    other = split_holdout(cat, 5, seed=10)
    assert not np.array_equal(held.holdout, other.holdout)


def test_split_holdout_zero_and_too_large():
    cat = synth_generate(SynthSpec(users=3, ads=4, user_dim=2, ad_dim=2, seed=1))
    assert split_holdout(cat, 0, seed=1).holdout.sum() == 0
    with pytest.raises(ConfigurationError):
        split_holdout(cat, 4, seed=1)


# ---------------------------------------------------------------- synthetic


def test_synth_generate_deterministic_and_calibrated():
    spec = SynthSpec(users=40, ads=50, user_dim=6, ad_dim=7, base_rate=0.25, seed=3)
    a = synth_generate(spec)
    b = synth_generate(spec)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.ground_truth_ctr, b.ground_truth_ctr)
    assert abs(a.ground_truth_ctr.mean() - 0.25) < 0.025  # within 10% of base rate
    assert np.all((a.ground_truth_ctr > 0) & (a.ground_truth_ctr < 1))


def test_synth_label_rate_matches_ctr_mean():
    spec = SynthSpec(users=120, ads=300, user_dim=10, ad_dim=10, base_rate=0.2, seed=5)
    cat = synth_generate(spec)
    n = cat.labels.size
    p = cat.ground_truth_ctr.mean()
    se = np.sqrt(p * (1 - p) / n)
    assert abs(cat.labels.mean() - p) < 3 * se


def test_synth_degenerate_truth_net_gives_flat_base_rate():
    # zero gain collapses every logit to the calibration shift
    spec = SynthSpec(users=5, ads=6, user_dim=3, ad_dim=3, base_rate=0.3,
                     logit_gain=0.0, seed=2)
    cat = synth_generate(spec)
    assert np.allclose(cat.ground_truth_ctr, 0.3, atol=1e-9)


# ---------------------------------------------------------------- contexts


def test_context_features_concatenation():
    cat = synth_generate(SynthSpec(users=4, ads=5, user_dim=3, ad_dim=2, seed=1))
    vec = context_features(cat, 1, 2)
    assert vec.shape == (5,)
    assert np.array_equal(vec[:3], cat.user_features[1])
    assert np.array_equal(vec[3:], cat.ad_features[2])
    assert np.array_equal(vec, context_features(cat, 1, 2))
    stacked = context_matrix(cat, 1, np.array([0, 2, 4]))
    assert stacked.shape == (3, 5)
    assert np.array_equal(stacked[1], vec)


def test_context_features_reference_dimensions():
    # 250 user features + 323 ad features concatenate to 573
    cat = synth_generate(SynthSpec(users=2, ads=2, user_dim=250, ad_dim=323, seed=0))
    assert context_features(cat, 0, 0).shape == (573,)
    assert cat.context_dim == 573


def test_context_features_unknown_ids():
    cat = synth_generate(SynthSpec(users=2, ads=2, user_dim=2, ad_dim=2, seed=1))
    with pytest.raises(UsageError):
        context_features(cat, 5, 0)
    with pytest.raises(UsageError):
        context_features(cat, 0, 9)


# ---------------------------------------------------------------- serving


def make_small_state(exclude=True, users=4, ads=20, holdout=3, seed=0):
    cat = synth_generate(SynthSpec(users=users, ads=ads, user_dim=2, ad_dim=2, seed=seed))
    cat = split_holdout(cat, holdout, seed=seed)
    return make_env_state(cat, seed=seed, exclude_served=exclude)


def test_eligible_ads_counts_and_exclusion():
    state = make_small_state()
    elig = eligible_ads(state, 0)
    assert elig.size == 17
    slate = elig[:7].tolist()
    env_step(state, 0, slate)
    assert eligible_ads(state, 0).size == 10
    assert not set(slate) & set(eligible_ads(state, 0).tolist())


def test_eligible_ads_without_exclusion():
    state = make_small_state(exclude=False)
    slate = eligible_ads(state, 0)[:7].tolist()
    env_step(state, 0, slate)
    assert eligible_ads(state, 0).size == 17


def test_env_step_returns_frozen_labels_and_counts():
    state = make_small_state()
    slate = eligible_ads(state, 0)[:7].tolist()
    labels = env_step(state, 0, slate)
    assert labels.shape == (7,)
    assert np.array_equal(labels, state.catalog.labels[0, slate])
    assert state.round_count == 1
    state2 = make_small_state()
    assert np.array_equal(env_step(state2, 0, slate), labels)


def test_env_step_rejects_holdout_and_repeats():
    state = make_small_state()
    held = np.flatnonzero(state.catalog.holdout[0])
    with pytest.raises(ContractViolation):
        env_step(state, 0, [int(held[0])])
    elig = eligible_ads(state, 0)
    with pytest.raises(ContractViolation):
        env_step(state, 0, [int(elig[0]), int(elig[0])])


def test_env_step_rejects_already_served():
    state = make_small_state()
    slate = eligible_ads(state, 0)[:3].tolist()
    env_step(state, 0, slate)
    with pytest.raises(ContractViolation):
        env_step(state, 0, slate[:1])


def test_resample_mode_draws_fresh_labels():
    cat = synth_generate(SynthSpec(users=2, ads=40, user_dim=2, ad_dim=2,
                                   base_rate=0.5, seed=4))
    state = make_env_state(cat, seed=1, resample_labels=True, exclude_served=False)
    slate = list(range(40))
    draws = [env_step(state, 0, slate) for _ in range(30)]
    assert any(not np.array_equal(draws[0], d) for d in draws[1:])


# ---------------------------------------------------------------- baselines


def test_random_policy_ctr_extremes():
    cat = synth_generate(SynthSpec(users=3, ads=6, user_dim=2, ad_dim=2, seed=1))
    cat.labels[...] = 1
    assert random_policy_ctr(cat) == 1.0
    cat.labels[...] = 0
    cat.labels[:, :3] = 1
    assert random_policy_ctr(cat) == 0.5


def test_random_policy_ctr_equals_enumeration_oracle():
    cat = synth_generate(SynthSpec(users=6, ads=9, user_dim=2, ad_dim=2, seed=7))
    cat = split_holdout(cat, 2, seed=7)
    # enumerate every possible uniform single-ad serve over non-holdout cells
    total, clicks = 0, 0
    for u in range(cat.n_users):
        for a in range(cat.n_ads):
            if not cat.holdout[u, a]:
                total += 1
                clicks += int(cat.labels[u, a])
    assert random_policy_ctr(cat) == clicks / total


def test_oracle_topk_orders_by_ground_truth():
    cat = synth_generate(SynthSpec(users=3, ads=10, user_dim=2, ad_dim=2, seed=2))
    cat = split_holdout(cat, 2, seed=2)
    top = oracle_topk(cat, 4)
    for u in range(3):
        masked = np.where(cat.holdout[u], -np.inf, cat.ground_truth_ctr[u])
        best = set(np.argsort(-masked)[:4].tolist())
        assert set(top[u].tolist()) == best
        assert not any(cat.holdout[u, top[u]])


def test_oracle_slate_maximizes_expected_ctr():
    # no slate of eligible ads can beat the oracle top-k sum in resample mode
    cat = synth_generate(SynthSpec(users=4, ads=20, user_dim=3, ad_dim=3, seed=9))
    cat = split_holdout(cat, 3, seed=9)
    top = oracle_topk(cat, 5)
    rng = np.random.default_rng(0)
    for u in range(4):
        allowed = np.flatnonzero(~cat.holdout[u])
        best = cat.ground_truth_ctr[u, top[u]].sum()
        for _ in range(200):
            slate = rng.choice(allowed, size=5, replace=False)
            assert cat.ground_truth_ctr[u, slate].sum() <= best + 1e-12


def test_oracle_topk_requires_ground_truth():
    cat = synth_generate(SynthSpec(users=2, ads=3, user_dim=2, ad_dim=2, seed=1))
    cat.ground_truth_ctr = None
    with pytest.raises(UsageError):
        oracle_topk(cat, 2)

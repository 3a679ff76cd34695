import json

import numpy as np
import pytest

from banditsim import dataio
from banditsim.cli import (
    build_sweep_run_config,
    derive_run_seed,
    main,
    run_sweep,
)
from banditsim.config import (
    build_catalog,
    build_sampler_config,
    load_experiment_config,
    model_label,
)
from banditsim.errors import ConfigurationError
from banditsim.loop import run_experiment

SMALL_ENV = {
    "environment": {"users": 10, "ads": 30, "user_dim": 3, "ad_dim": 3,
                    "holdout_ads": 3, "seed": 42},
    "sampler": {"kind": "sgd_ensemble", "member_count": 1},
    "policy": {"kind": "greedy", "slate_size": 3},
    "loop": {"bootstrap_users": 3, "retrain_every_users": 3,
             "epochs_per_retrain": 2, "batch_size": 16, "total_user_visits": 9},
}


# ---------------------------------------------------------------- config


def test_empty_config_reproduces_reference_recipe():
    exp = load_experiment_config(None)
    assert exp.optimizer.kind == "rmsprop"
    assert exp.optimizer.learning_rate == 0.1
    assert exp.optimizer.decay == 0.5
    assert exp.loop.batch_size == 64
    assert exp.loop.epochs_per_retrain == 100
    assert exp.loop.bootstrap_users == 20
    assert exp.loop.retrain_every_users == 20
    assert exp.loop.slate_size == 7
    assert exp.policy.epsilon == 0.1
    assert exp.policy.ucb_samples == 10
    assert exp.policy.ucb_order_k == 2
    assert exp.sampler.member_count == 10
    assert exp.environment.users == 120
    assert exp.environment.ads == 300
    assert exp.environment.holdout_ads == 5
    cfg = build_sampler_config(exp, input_dim=573)
    assert cfg.net_config.layer_sizes == (100, 50, 20)  # hybrid default
    assert cfg.net_config.dropout_rate == 0.5
    assert cfg.net_config.dropout_placement == "second_to_last"
    greedy = load_experiment_config({"sampler": {"kind": "sgd_ensemble"}})
    assert build_sampler_config(greedy, input_dim=573).net_config.layer_sizes == (100, 50)


def test_unknown_keys_rejected_all_listed():
    with pytest.raises(ConfigurationError) as err:
        load_experiment_config({"typo_section": {}, "loop": {"bad_key": 1},
                                "policy": {"epsilonn": 0.1}})
    message = str(err.value)
    assert "typo_section" in message
    assert "loop.bad_key" in message
    assert "policy.epsilonn" in message


def test_invalid_values_named():
    with pytest.raises(ConfigurationError, match="epsilon"):
        load_experiment_config({"policy": {"kind": "epsilon_greedy", "epsilon": 1.5}})
    with pytest.raises(ConfigurationError, match="ucb_samples"):
        load_experiment_config({"sampler": {"kind": "bootstrap", "member_count": 5},
                                "policy": {"kind": "ucb", "ucb_samples": 10,
                                           "ucb_order_k": 2}})
    with pytest.raises(ConfigurationError, match="hybrid"):
        load_experiment_config({"sampler": {"kind": "hybrid", "dropout_rate": 0.0}})


def test_validation_reports_multiple_problems_at_once():
    with pytest.raises(ConfigurationError) as err:
        load_experiment_config({
            "policy": {"kind": "epsilon_greedy", "epsilon": 2.0},
            "loop": {"retrain_every_users": 0},
            "environment": {"base_rate": 7.0},
        })
    message = str(err.value)
    assert "epsilon" in message
    assert "retrain_every_users" in message
    assert "base_rate" in message


def test_non_object_sections_rejected():
    for bad in ({"policy": "ucb"}, {"environment": 7},
                {"warm_start": "yes"}, {"loop": [1, 2]}):
        with pytest.raises(ConfigurationError, match="must be an object"):
            load_experiment_config(bad)


def test_model_labels_match_reference_table():
    def label(policy, sampler):
        return model_label(load_experiment_config(
            {"policy": {"kind": policy}, "sampler": {"kind": sampler}}))

    assert label("greedy", "sgd_ensemble") == "Greedy"
    assert label("epsilon_greedy", "sgd_ensemble") == "ϵ-greedy"
    assert label("thompson", "mc_dropout") == "Dropout TS"
    assert label("ucb", "bootstrap") == "Bootstrap UCB"
    assert label("ucb", "sgd_ensemble") == "SGD UCB"
    assert label("ucb", "multihead") == "Multihead UCB"
    assert label("ucb", "multihead_sgd") == "Multihead SGD UCB"
    assert label("ucb", "hybrid") == "Hybrid UCB"
    assert label("thompson", "hybrid") == "Hybrid TS"


def test_config_digest_ignores_key_order():
    a = load_experiment_config({"loop": {"batch_size": 32}, "seed": 5})
    b = load_experiment_config({"seed": 5, "loop": {"batch_size": 32}})
    assert dataio.canonical_config_digest(a) == dataio.canonical_config_digest(b)
    c = load_experiment_config({"loop": {"batch_size": 64}, "seed": 5})
    assert dataio.canonical_config_digest(a) != dataio.canonical_config_digest(c)


# ---------------------------------------------------------------- generate


def test_generate_writes_catalog(tmp_path, capsys):
    out = tmp_path / "cat"
    code = main(["generate", "--users", "8", "--ads", "12", "--user-dim", "3",
                 "--ad-dim", "3", "--seed", "7", "--out", str(out)])
    assert code == 0
    for name in ("users.csv", "ads.csv", "labels.csv", "ground_truth.csv"):
        assert (out / name).is_file()
    assert len((out / "users.csv").read_text().splitlines()) == 9


def test_generate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--users", "5", "--ads", "6", "--user-dim", "2",
                 "--ad-dim", "2", "--seed", "3", "--out", str(a)]) == 0
    assert main(["generate", "--users", "5", "--ads", "6", "--user-dim", "2",
                 "--ad-dim", "2", "--seed", "3", "--out", str(b)]) == 0
    for name in ("users.csv", "ads.csv", "labels.csv", "ground_truth.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_generate_refuses_existing_without_force(tmp_path):
    out = tmp_path / "cat"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    code = main(["generate", "--users", "3", "--ads", "4", "--user-dim", "2",
                 "--ad-dim", "2", "--out", str(out)])
    assert code == 2
    code = main(["generate", "--users", "3", "--ads", "4", "--user-dim", "2",
                 "--ad-dim", "2", "--out", str(out), "--force"])
    assert code == 0


# ---------------------------------------------------------------- simulate


def write_config(tmp_path, extra=None):
    cfg = json.loads(json.dumps(SMALL_ENV))
    if extra:
        cfg.update(extra)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def test_simulate_dry_run(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["simulate", str(path), "--dry-run"]) == 0
    assert "config ok" in capsys.readouterr().out


def test_simulate_prints_table_row(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["simulate", str(path), "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "Model" in out and "CTR (+%)" in out and "Greedy" in out


def test_simulate_invalid_config_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"policy": {"kind": "epsilon_greedy", "epsilon": 1.5}}))
    assert main(["simulate", str(path), "--dry-run"]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_simulate_catalog_environment(tmp_path, capsys):
    cat_dir = tmp_path / "cat"
    assert main(["generate", "--users", "10", "--ads", "30", "--user-dim", "3",
                 "--ad-dim", "3", "--seed", "5", "--out", str(cat_dir)]) == 0
    cfg = json.loads(json.dumps(SMALL_ENV))
    cfg["environment"] = {
        "kind": "catalog",
        "users_csv": str(cat_dir / "users.csv"),
        "ads_csv": str(cat_dir / "ads.csv"),
        "labels_csv": str(cat_dir / "labels.csv"),
        "holdout_ads": 3,
        "holdout_seed": 1,
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    assert main(["simulate", str(path), "--seed", "2"]) == 0


# ---------------------------------------------------------------- sweep


def test_sweep_cell_equals_standalone_run(tmp_path):
    base = json.loads(json.dumps(SMALL_ENV))
    cells = [("greedy", {"policy.kind": "greedy"})]
    rows, failures = run_sweep(base, cells, seeds=[0], master_seed=11, out_dir=None)
    assert not failures
    standalone = build_sweep_run_config(base, 0, {"policy.kind": "greedy"}, 0,
                                        master_seed=11, out_dir=None)
    assert standalone.seed == derive_run_seed(11, 0, 0)
    out = run_experiment(standalone, write_artifacts=False)
    assert out.report.cumulative_ctr == pytest.approx(rows[0]["cumulative_ctr_mean"])
    assert out.report.ctr_uplift_pct == pytest.approx(rows[0]["ctr_uplift_mean"])


def test_sweep_identical_seeds_zero_std(tmp_path):
    base = json.loads(json.dumps(SMALL_ENV))
    base["environment"]["seed"] = 13  # pin the world so seeds only move the run
    cells = [("greedy", {})]
    rows, failures = run_sweep(base, cells, seeds=[0, 0], master_seed=5, out_dir=None)
    assert not failures
    # identical derived seeds (same seed index twice would differ); emulate the
    # spec case by running one seed twice through the same derivation
    a = build_sweep_run_config(base, 0, {}, 0, master_seed=5, out_dir=None)
    b = build_sweep_run_config(base, 0, {}, 0, master_seed=5, out_dir=None)
    ra = run_experiment(a, write_artifacts=False).report.cumulative_ctr
    rb = run_experiment(b, write_artifacts=False).report.cumulative_ctr
    assert ra == rb


def test_sweep_pairs_worlds_across_cells():
    base = json.loads(json.dumps(SMALL_ENV))
    a = build_sweep_run_config(base, 0, {}, 2, master_seed=9, out_dir=None)
    b = build_sweep_run_config(base, 5, {}, 2, master_seed=9, out_dir=None)
    assert a.environment.seed == b.environment.seed  # same world per seed index
    assert a.seed != b.seed  # distinct run seeds per cell
    cat_a = build_catalog(a)
    cat_b = build_catalog(b)
    assert np.array_equal(cat_a.labels, cat_b.labels)


def test_sweep_cli_writes_outputs(tmp_path, capsys):
    path = write_config(tmp_path)
    cells = tmp_path / "cells.json"
    cells.write_text(json.dumps([
        {"name": "greedy", "overrides": {"policy.kind": "greedy"}},
        {"name": "eps", "overrides": {"policy.kind": "epsilon_greedy"}},
    ]))
    out_dir = tmp_path / "sweep"
    code = main(["sweep", str(path), "--cells", str(cells), "--seeds", "0,1",
                 "--seed", "3", "--out", str(out_dir)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "Random" in printed and "Greedy" in printed
    table = (out_dir / "sweep.csv").read_text().splitlines()
    assert table[0].startswith("cell,model,runs")
    assert len(table) == 4  # header + random + 2 cells
    assert (out_dir / "greedy" / "seed_0" / "impressions.log").is_file()


def test_sweep_without_out_ignores_base_output_dir(tmp_path):
    # runs must not all collide on the base config's output_dir
    base = json.loads(json.dumps(SMALL_ENV))
    base["output_dir"] = str(tmp_path / "shared")
    rows, failures = run_sweep(base, [("a", {}), ("b", {"policy.kind": "epsilon_greedy"})],
                               seeds=[0, 1], master_seed=4, out_dir=None)
    assert not failures
    assert len(rows) == 2
    assert not (tmp_path / "shared").exists()


def test_sweep_continues_after_failure(tmp_path, capsys):
    path = write_config(tmp_path)
    cells = tmp_path / "cells.json"
    # second cell's member_count conflicts with ucb_samples -> that run fails
    cells.write_text(json.dumps([
        {"name": "ok", "overrides": {"policy.kind": "greedy"}},
        {"name": "bad", "overrides": {"policy.kind": "ucb",
                                      "policy.ucb_samples": 10,
                                      "sampler.kind": "bootstrap",
                                      "sampler.member_count": 2}},
    ]))
    code = main(["sweep", str(path), "--cells", str(cells), "--seeds", "0", "--seed", "1"])
    assert code == 1
    err = capsys.readouterr().err
    assert "bad" in err and "failed" in err


# ---------------------------------------------------------------- evaluate


def test_evaluate_checkpoint(tmp_path, capsys):
    run_dir = tmp_path / "run"
    path = write_config(tmp_path, {"output_dir": str(run_dir), "seed": 4})
    assert main(["simulate", str(path)]) == 0
    capsys.readouterr()
    ckpts = sorted(run_dir.glob("checkpoints/*/sampler.ckpt"))
    assert ckpts
    assert main(["evaluate", "--checkpoint", str(ckpts[-1]),
                 "--config", str(path), "--split", "holdout"]) == 0
    values = json.loads(capsys.readouterr().out)
    assert values["cells"] == 10 * 3
    assert values["pr_auc"] is None or 0.0 <= values["pr_auc"] <= 1.0
    assert main(["evaluate", "--checkpoint", str(ckpts[-1]),
                 "--config", str(path), "--split", "all"]) == 0
    assert json.loads(capsys.readouterr().out)["cells"] == 10 * 30


def test_evaluate_dimension_mismatch(tmp_path, capsys):
    run_dir = tmp_path / "run"
    path = write_config(tmp_path, {"output_dir": str(run_dir), "seed": 4})
    assert main(["simulate", str(path)]) == 0
    ckpt = sorted(run_dir.glob("checkpoints/*/sampler.ckpt"))[-1]
    other = write_config(tmp_path, {"seed": 4})
    cfg = json.loads(other.read_text())
    cfg["environment"]["user_dim"] = 9
    other.write_text(json.dumps(cfg))
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(ckpt), "--config", str(other)]) == 1
    assert "CompatibilityError" in capsys.readouterr().err

import numpy as np
import pytest

from fedsim.config import ConfigError, algorithm_defaults, parse_config
from fedsim.harness import (RoundExecutionError, content_hash, emit_report,
                            load_report, prepare_context, run_centralized,
                            run_experiment)
from fedsim.params import load_params, save_params


def base_raw(alg, **alg_extra):
    return {
        "algorithm": {"id": alg, **alg_extra},
        "task": {"kind": "logistic_regression", "n_features": 6},
        "partition": {"mode": "iid", "clients": 4},
        "rounds": 8,
        "seed": 123,
    }


def final_params(report):
    for name in ("final_global", "best_global"):
        if name in report["_checkpoint_params"]:
            return report["_checkpoint_params"][name]
    raise KeyError("no global checkpoint in report")


class TestConfig:
    def test_unknown_algorithm(self):
        with pytest.raises(ConfigError):
            parse_config({"algorithm": "fedsgd"})

    def test_unknown_hyperparameter(self):
        with pytest.raises(ConfigError, match="unknown hyper"):
            parse_config(base_raw("fedavg_fixed_epochs", momentum=0.9))

    def test_out_of_range(self):
        with pytest.raises(ConfigError, match="outside"):
            parse_config(base_raw("fedavg_fixed_epochs", learning_rate=-1.0))

    def test_defaults_follow_selected_values(self):
        assert algorithm_defaults("fedavg_fixed_epochs")["learning_rate"] == 0.4
        assert algorithm_defaults("fednova")["learning_rate"] == 0.2
        assert algorithm_defaults("fedadam")["server_lr"] == 0.001
        assert algorithm_defaults("fedadam")["tau"] == 1e-8
        assert algorithm_defaults("qfedavg")["q"] == 1.0
        assert algorithm_defaults("qfedavg")["lr_decay_factor"] == 1.0
        assert algorithm_defaults("fedpidavg")["alpha"] == 0.45
        assert algorithm_defaults("fedpidavg")["gamma"] == 0.1
        assert algorithm_defaults("scaffold")["learning_rate"] == 0.4
        assert algorithm_defaults("ditto")["lambda"] == 0.01
        base = algorithm_defaults("centralized")
        assert base["batch_size"] == 4
        assert base["weight_decay"] == 1e-5
        assert base["lr_decay_factor"] == 0.995

    def test_finetuning_requires_checkpoint(self):
        with pytest.raises(ConfigError, match="source_checkpoint"):
            parse_config(base_raw("local_finetuning"))

    def test_fold_bounds(self):
        raw = base_raw("fedavg_fixed_epochs")
        raw["folds"] = {"fold": 7}
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_inline_profile_rows(self):
        raw = base_raw("fedavg_fixed_epochs")
        raw["partition"] = {"mode": "profile", "profile": [
            [1, 30, {"hgg": 20, "lgg": 10}],
            [2, 10, None],
        ]}
        rep = run_experiment(parse_config(raw))
        assert rep["partition_sizes"] == {"1": 30, "2": 10}

    def test_unknown_profile_name(self):
        raw = base_raw("fedavg_fixed_epochs")
        raw["partition"] = {"mode": "profile", "profile": "fets9999"}
        with pytest.raises(ConfigError, match="unknown profile"):
            parse_config(raw)


class TestDeterminism:
    def test_same_config_same_hash(self):
        cfg = parse_config(base_raw("fedavg_fixed_epochs"))
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert a["content_hash"] == b["content_hash"]
        assert a["curves"] == b["curves"]

    def test_worker_count_does_not_change_hash(self):
        cfg = parse_config(base_raw("scaffold"))
        a = run_experiment(cfg, workers=1)
        b = run_experiment(cfg, workers=4)
        assert a["content_hash"] == b["content_hash"]

    def test_seed_changes_hash(self):
        cfg_a = parse_config(base_raw("fedavg_fixed_epochs"))
        raw = base_raw("fedavg_fixed_epochs")
        raw["seed"] = 124
        cfg_b = parse_config(raw)
        assert run_experiment(cfg_a)["content_hash"] != \
            run_experiment(cfg_b)["content_hash"]

    def test_hash_matches_payload(self):
        cfg = parse_config(base_raw("fednova"))
        rep = run_experiment(cfg)
        assert rep["content_hash"] == content_hash(
            {k: v for k, v in rep.items() if not k.startswith("_")})


class TestReductions:
    def one_client_raw(self, alg):
        # reduction identities compare algorithms, so pin a common rate
        raw = base_raw(alg, learning_rate=0.2)
        raw["partition"] = {"mode": "iid", "clients": 1}
        raw["task"]["pool"] = {"size": 40}
        return raw

    def test_single_client_fedavg_equals_centralized(self):
        fed = run_experiment(parse_config(self.one_client_raw("fedavg_fixed_epochs")))
        cen = run_experiment(parse_config(self.one_client_raw("centralized")))
        wf = final_params(fed).values
        wc = final_params(cen).values
        np.testing.assert_allclose(wf, wc, rtol=1e-12, atol=1e-15)
        assert fed["selection"]["best_round"] == cen["selection"]["best_round"]

    def test_single_client_scaffold_and_fednova_match_fedavg(self):
        ref = final_params(run_experiment(
            parse_config(self.one_client_raw("fedavg_fixed_epochs")))).values
        for alg in ("scaffold", "fednova"):
            got = final_params(run_experiment(
                parse_config(self.one_client_raw(alg)))).values
            np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-15)

    def test_qfedavg_zero_matches_uniform_fedavg(self):
        shared = {"learning_rate": 0.3, "lr_decay_factor": 1.0}
        a = run_experiment(parse_config(base_raw("qfedavg", q=0.0, **shared)))
        b = run_experiment(parse_config(base_raw("fedavg_uniform", **shared)))
        np.testing.assert_allclose(final_params(a).values,
                                   final_params(b).values,
                                   rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(a["curves"]["global_val_loss"],
                                   b["curves"]["global_val_loss"],
                                   rtol=1e-12)

    def test_centralized_pooled_equals_local_training_when_single_client(self):
        cen = run_experiment(parse_config(self.one_client_raw("centralized")))
        loc = run_experiment(parse_config(self.one_client_raw("local_training")))
        wc = final_params(cen).values
        wl = loc["_checkpoint_params"]["client_1"].values
        # local training keeps its best checkpoint; compare best-round params
        cen_best = cen["_checkpoint_params"]["best_global"].values
        np.testing.assert_array_equal(wl, cen_best)

    def test_ditto_lambda_zero_equals_local_finetuning(self, tmp_path):
        src = run_experiment(parse_config(base_raw("fedavg_fixed_epochs")))
        ckpt = tmp_path / "global.params"
        save_params(ckpt, final_params(src))
        common = {"source_checkpoint": str(ckpt), "learning_rate": 0.05}
        raw_a = base_raw("ditto", **{"lambda": 0.0}, **common)
        raw_b = base_raw("local_finetuning", **common)
        for raw in (raw_a, raw_b):
            raw["rounds"] = 6
        a = run_experiment(parse_config(raw_a))
        b = run_experiment(parse_config(raw_b))
        for cid in (1, 2, 3, 4):
            np.testing.assert_array_equal(
                a["_checkpoint_params"][f"client_{cid}"].values,
                b["_checkpoint_params"][f"client_{cid}"].values)


class TestCentralizedBaseline:
    def test_reaches_closed_form_optimum(self):
        raw = {
            "algorithm": {"id": "centralized", "learning_rate": 0.05,
                          "weight_decay": 0.0, "lr_decay_factor": 0.99},
            "task": {"kind": "linear_regression", "n_features": 3,
                     "pool": {"size": 60, "noise": 0.05}},
            "partition": {"mode": "iid", "clients": 1},
            "rounds": 600,
            "seed": 11,
        }
        cfg = parse_config(raw)
        ctx = prepare_context(cfg)
        rep = run_experiment(cfg)
        X, Y = ctx.train[1].stacked
        w_star = np.linalg.lstsq(X, Y[:, 0], rcond=None)[0]
        best_loss = 0.5 * np.mean((X @ w_star - Y[:, 0]) ** 2)
        w_fin = final_params(rep).values
        got_loss = 0.5 * np.mean((X @ w_fin - Y[:, 0]) ** 2)
        assert got_loss - best_loss < 1e-6

    def test_run_centralized_wrapper(self):
        cfg = parse_config(base_raw("fedavg_fixed_epochs"))
        rep = run_centralized(cfg)
        assert rep["algorithm"] == "centralized"

    def test_default_task_300_epochs_under_a_minute(self):
        import time
        cfg = parse_config({"algorithm": "centralized", "rounds": 300,
                            "seed": 3})
        t0 = time.perf_counter()
        run_experiment(cfg)
        assert time.perf_counter() - t0 < 60.0


class TestSelection:
    def test_best_round_is_argmin_of_curve(self):
        cfg = parse_config(base_raw("fedavg_fixed_epochs"))
        rep = run_experiment(cfg)
        curve = rep["curves"]["global_val_loss"]
        assert rep["selection"]["best_round"] == int(np.argmin(curve))
        assert rep["selection"]["best_val_loss"] == min(curve)


class TestEmitReport:
    def test_files_and_round_trip(self, tmp_path):
        cfg = parse_config(base_raw("fedavg_fixed_epochs"))
        rep = run_experiment(cfg)
        emit_report(rep, tmp_path)
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "cost.csv").exists()
        assert (tmp_path / "curves.csv").exists()
        back = load_report(tmp_path)
        public = {k: v for k, v in rep.items() if not k.startswith("_")}
        assert back == public

    def test_curves_csv_has_rounds_rows_per_series(self, tmp_path):
        cfg = parse_config(base_raw("fedavg_fixed_epochs"))
        rep = run_experiment(cfg)
        emit_report(rep, tmp_path)
        lines = (tmp_path / "curves.csv").read_text().strip().splitlines()[1:]
        series: dict[str, int] = {}
        for line in lines:
            name = line.split(",")[1]
            series[name] = series.get(name, 0) + 1
        assert set(series.values()) == {rep["rounds"]}

    def test_checkpoints_reload(self, tmp_path):
        cfg = parse_config(base_raw("fedavg_fixed_epochs"))
        rep = run_experiment(cfg)
        emit_report(rep, tmp_path)
        best = load_params(tmp_path / "checkpoints" / "best_global.params")
        np.testing.assert_array_equal(
            best.values, rep["_checkpoint_params"]["best_global"].values)

    def test_personalized_checkpoint_naming(self, tmp_path):
        raw = base_raw("fedper")
        rep = run_experiment(parse_config(raw))
        emit_report(rep, tmp_path)
        for cid in (1, 2, 3, 4):
            assert (tmp_path / "checkpoints" /
                    f"client_{cid}_fedper.params").exists()


class TestErrorPaths:
    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_reports_round_and_client(self):
        raw = base_raw("fedavg_fixed_epochs", learning_rate=9.9)
        raw["task"] = {"kind": "linear_regression", "n_features": 4,
                       "pool": {"size": 60, "noise": 0.0}}
        raw["rounds"] = 300
        with pytest.raises(RoundExecutionError) as err:
            run_experiment(parse_config(raw))
        assert err.value.round_index >= 0
        assert err.value.client_id >= 1

    def test_prior_cfl_requires_assignment_coverage(self, tmp_path):
        src = run_experiment(parse_config(base_raw("fedavg_fixed_epochs")))
        ckpt = tmp_path / "g.params"
        save_params(ckpt, final_params(src))
        raw = base_raw("prior_cfl", source_checkpoint=str(ckpt),
                       prior_assignment={"1": "a", "2": "a"})
        with pytest.raises(ConfigError, match="misses"):
            run_experiment(parse_config(raw))


class TestClusteredRuns:
    def test_cfl_split_schedule_recorded(self):
        raw = base_raw("cfl", split_schedule={"4": [0]})
        raw["rounds"] = 6
        rep = run_experiment(parse_config(raw))
        history = rep["cluster_history"]
        assert len(history[0]["clusters"]) == 1
        assert len(history[-1]["clusters"]) == 2
        split = next(h for h in history if "split" in h)
        assert split["round"] == 4
        members = sorted(m for c in history[-1]["clusters"].values() for m in c)
        assert members == [1, 2, 3, 4]
        assert "max_cross_similarity" in split["split"]
        assert "norm_gap_statistic" in split["split"]

    def test_prior_cfl_single_label_matches_fedavg_from_checkpoint(self, tmp_path):
        src = run_experiment(parse_config(base_raw("fedavg_fixed_epochs")))
        ckpt = tmp_path / "g.params"
        save_params(ckpt, final_params(src))
        assignment = {str(c): "all" for c in (1, 2, 3, 4)}
        raw = base_raw("prior_cfl", source_checkpoint=str(ckpt),
                       prior_assignment=assignment, learning_rate=0.4)
        raw["rounds"] = 5
        rep = run_experiment(parse_config(raw))
        assert len(rep["cluster_history"][0]["clusters"]) == 1
        assert "cluster_0" in rep["_checkpoint_params"]

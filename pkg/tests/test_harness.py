import copy

import numpy as np
import pytest

from brql import cli
from brql.harness import (PRESETS, ConfigError, ExperimentConfig, RunResult, aggregate, build_env,
                          curves_csv, emit_outputs, raw_csv, read_curves, read_raw, run_experiment,
                          run_fixed_data_experiment)
from brql.mdp import state_values, value_iteration

SMALL = {
    "name": "small", "replications": 3, "seed": 7,
    "environment": {"kind": "coin-toss", "num_coins": 4, "head_probs": 0.5, "discount": 0.9},
    "schedule": {"horizon": 12, "batch_size": 1, "sweeps": 1, "initial_batch": 5, "n_min": 4},
    "algorithms": [{"kind": "BRQL-VaR", "alpha": 0.2}, {"kind": "BRQL-CVaR", "alpha": 0.2},
                   {"kind": "BRQL-mean"}, {"kind": "DRQL-KL", "delta": 0.1},
                   {"kind": "DRQL-Wass", "delta": 0.1}],
}

FIXED = {
    "name": "fixed-small", "replications": 2, "mode": "fixed-data-shift",
    "environment": {"kind": "inventory-poisson", "capacity": 3, "demand_mean": 1.5, "discount": 0.9},
    "schedule": {"horizon": 0, "initial_batch": 15},
    "algorithms": [{"kind": "BRQL-CVaR", "alpha": 0.2}, {"kind": "BRQL-mean"},
                   {"kind": "DRQL-Wass", "delta": 0.0}, {"kind": "DRQL-KL", "delta": 0.05}],
    "fixed": {"shift_means": [1.0, 1.5, 2.5], "n_big": 300, "oracle_rel_tol": 1e-6},
}


@pytest.fixture(scope="module")
def small_result():
    return run_experiment(ExperimentConfig.from_dict(SMALL))


class TestConfig:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_validate(self, name):
        cfg = ExperimentConfig.preset(name)
        assert cfg.replications == 100
        build_env(cfg.env)

    def test_preset_values(self):
        coin = ExperimentConfig.preset("coin-a04")
        assert [a.alpha for a in coin.algorithms[:2]] == [0.4, 0.4]
        assert coin.schedule["initial_batch"] == 10 and coin.schedule["n_min"] == 10
        inv = ExperimentConfig.preset("inventory-stream")
        assert (inv.schedule["horizon"], inv.schedule["batch_size"], inv.schedule["sweeps"]) == (60, 5, 5)
        assert inv.schedule["initial_batch"] == 20
        assert {a.delta for a in inv.algorithms if a.delta is not None} == {0.05}
        assert ExperimentConfig.preset("inventory-fixed").schedule["initial_batch"] == 30

    def test_every_problem_reported(self):
        bad = copy.deepcopy(SMALL)
        bad["replications"] = 0
        bad["environment"]["discount"] = 1.5
        bad["algorithms"][0]["alpha"] = 1.2
        bad["algorithms"].append({"kind": "DRQL-KL", "name": "DRQL-KL-2"})
        with pytest.raises(ConfigError) as err:
            ExperimentConfig.from_dict(bad)
        text = "\n".join(err.value.problems)
        assert len(err.value.problems) == 4
        for key in ("replications", "discount", "alpha", "delta"):
            assert key in text

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.preset("nope")

    def test_toml_round_trip(self, tmp_path):
        cfg = ExperimentConfig.from_dict(SMALL)
        path = tmp_path / "c.toml"
        path.write_text(cfg.to_toml())
        assert ExperimentConfig.from_toml(path).raw == cfg.raw

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("replications = [")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_toml(path)


class TestStreaming:
    def test_shapes_and_labels(self, small_result):
        assert small_result.algorithms == ["BRQL-VaR(0.2)", "BRQL-CVaR(0.2)", "BRQL-mean", "DRQL-KL",
                                           "DRQL-Wass"]
        for vals in small_result.values.values():
            assert vals.shape == (3, 13)

    def test_values_bounded(self, small_result):
        model = build_env(small_result.config.env)
        for vals in small_result.values.values():
            assert np.abs(vals).max() <= model.value_bound

    def test_streams_shared_and_distinct(self, small_result):
        hashes = small_result.stream_hashes
        assert len(hashes) == 3 and len(set(hashes)) == 3

    def test_deterministic_bytes(self, small_result):
        again = run_experiment(ExperimentConfig.from_dict(SMALL))
        assert raw_csv(again) == raw_csv(small_result)
        assert curves_csv(again) == curves_csv(small_result)

    def test_worker_count_irrelevant(self, small_result):
        par = run_experiment(ExperimentConfig.from_dict(SMALL), threads=2)
        assert raw_csv(par) == raw_csv(small_result)

    def test_single_replication_single_stage(self):
        cfg = ExperimentConfig.from_dict({**SMALL, "replications": 1,
                                          "schedule": {**SMALL["schedule"], "horizon": 1}})
        res = run_experiment(cfg)
        assert curves_csv(res).count("\n") == 1 + 2 * 5
        assert np.isnan(res.summary("BRQL-mean")[1]).all()

    def test_mean_learner_reaches_optimum(self):
        cfg = ExperimentConfig.from_dict({
            **SMALL, "replications": 4,
            "schedule": {**SMALL["schedule"], "horizon": 400, "stream": "covering"},
            "algorithms": [{"kind": "BRQL-mean"}]})
        res = run_experiment(cfg)
        model = build_env(cfg.env)
        best = state_values(model, value_iteration(model)).mean()
        assert res.summary("BRQL-mean")[0][-1] == pytest.approx(best, abs=0.05 * model.value_bound)


class TestFixed:
    def test_runs_and_shapes(self):
        res = run_fixed_data_experiment(ExperimentConfig.from_dict(FIXED))
        assert res.axis == "demand_mean" and res.points == [1.0, 1.5, 2.5]
        assert all(v.shape == (2, 3) for v in res.values.values())

    def test_nominal_only_grid_bounded_by_optimum(self):
        cfg = ExperimentConfig.from_dict({**FIXED, "fixed": {**FIXED["fixed"], "shift_means": [1.5]}})
        res = run_fixed_data_experiment(cfg)
        assert all(v.shape == (2, 1) for v in res.values.values())
        model = build_env(cfg.env)
        v_star = state_values(model, value_iteration(model)).mean()
        assert max(v.max() for v in res.values.values()) <= v_star + 1e-9

    def test_mode_checks(self):
        with pytest.raises(ConfigError):
            run_fixed_data_experiment(ExperimentConfig.from_dict(SMALL))
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**FIXED, "environment": SMALL["environment"]})


class TestOutputs:
    def test_files_and_round_trip(self, small_result, tmp_path):
        paths = emit_outputs(small_result, tmp_path / "out")
        assert set(paths) == {"curves.csv", "raw.csv", "curves.svg", "config.echo"}
        curves = read_curves(paths["curves.csv"].read_text())
        raw = read_raw(paths["raw.csv"].read_text())
        for alg, vals in small_result.values.items():
            mean, sd, hw = aggregate(vals)
            assert np.array_equal(curves[alg]["mean"], mean)
            assert np.array_equal(curves[alg]["sd"], sd)
            assert np.array_equal(curves[alg]["ci_half_width"], hw)
            assert np.array_equal(raw[alg], vals)
            m2, sd2, hw2 = aggregate(raw[alg])
            assert np.array_equal(m2, mean) and np.array_equal(sd2, sd)
        assert ExperimentConfig.from_toml(paths["config.echo"]).raw == small_result.config.raw
        assert paths["curves.svg"].read_text().lstrip().startswith("<?xml")

    def test_half_width_formula(self, small_result):
        vals = small_result.values["BRQL-mean"]
        _, sd, hw = aggregate(vals)
        assert np.allclose(hw, 1.96 * sd / np.sqrt(3), rtol=0, atol=0, equal_nan=True)

    def test_empty_result(self, tmp_path):
        res = RunResult("stage", [], {}, [], None)
        paths = emit_outputs(res, tmp_path)
        assert paths["curves.csv"].read_text() == "algorithm,stage,mean,sd,ci_half_width,replications\n"
        assert paths["raw.csv"].read_text().count("\n") == 1
        assert "<svg" in paths["curves.svg"].read_text()

    def test_one_algorithm_three_stages(self):
        res = RunResult("stage", [0, 1, 2], {"A": np.arange(6.0).reshape(2, 3)}, ["h0", "h1"], None)
        assert len(curves_csv(res).splitlines()) == 4

    def test_svg_deterministic(self, small_result, tmp_path):
        a = emit_outputs(small_result, tmp_path / "a")["curves.svg"].read_bytes()
        b = emit_outputs(small_result, tmp_path / "b")["curves.svg"].read_bytes()
        assert a == b

    def test_io_error_has_path(self, small_result, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_outputs(small_result, blocker / "sub")


class TestCli:
    def write(self, tmp_path, data):
        from brql.harness import tomli_w

        path = tmp_path / "cfg.toml"
        path.write_text(tomli_w.dumps(data))
        return path

    def test_run(self, tmp_path, capsys):
        cfg = self.write(tmp_path, {**SMALL, "replications": 2})
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
        assert (tmp_path / "o" / "curves.csv").exists()
        echo = ExperimentConfig.from_toml(tmp_path / "o" / "config.echo")
        assert echo.seed == 3

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg = self.write(tmp_path, {**SMALL, "replications": 0})
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "replications" in capsys.readouterr().err

    def test_replications_flag_validated(self, tmp_path):
        assert cli.main(["run", "--preset", "coin-a02", "--replications", "0", "--out", str(tmp_path)]) == 2

    def test_divergence_exit_code(self, tmp_path):
        code = cli.main(["solve", "--preset", "coin-a02", "--n-big", "10", "--max-iter", "2",
                         "--out", str(tmp_path / "q.txt")])
        assert code == 3

    def test_solve_dirac_matches_value_iteration(self, tmp_path):
        from brql.mdp import load_q

        out = tmp_path / "q.txt"
        assert cli.main(["solve", "--preset", "coin-a02", "--dirac", "--n-big", "5", "--out", str(out)]) == 0
        model = build_env(ExperimentConfig.preset("coin-a02").env)
        q = load_q(out.read_text(), (model.num_states, model.num_actions))
        assert np.abs(q - value_iteration(model)).max() <= 1e-6 * model.value_bound

    def test_bound(self, capsys):
        assert cli.main(["bound", "--o-min", "1000", "--states", "2", "--alpha", "0.2", "--r-bar", "1",
                         "--gamma", "0.9"]) == 0
        out = capsys.readouterr().out
        assert "316.22776" in out and "0.68377" in out
        assert cli.main(["bound", "--o-min", "5", "--states", "21", "--alpha", "0.2"]) == 0
        assert "vacuous" in capsys.readouterr().out

    def test_dump_env(self, tmp_path):
        out = tmp_path / "k.txt"
        assert cli.main(["dump-env", "--preset", "inventory-stream", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 176

    def test_fixed(self, tmp_path):
        cfg = self.write(tmp_path, FIXED)
        assert cli.main(["fixed", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
        assert read_curves((tmp_path / "f" / "curves.csv").read_text())["BRQL-mean"]["demand_mean"].size == 3

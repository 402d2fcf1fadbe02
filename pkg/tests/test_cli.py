import csv
import json

import numpy as np
import pytest

from qlvol.cli import (EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, PRESETS, build_model, load_checkpoint,
                       main, model_spec, resolve_sim_config, save_checkpoint)
from qlvol.errors import BadConfig
from qlvol.models import CIRModel, ConstantModel, NeuralNetModel, PolynomialModel, SeasonalCIR2DModel


def write_cfg(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    cfg = d / "sim.json"
    cfg.write_text(json.dumps({"preset": "tiny", "replications": 3}))
    assert main(["simulate", "--config", str(cfg), "--out", str(d / "data"), "--seed", "1"]) == EXIT_OK
    return d / "data"


class TestPresets:
    def test_standard_presets(self):
        p = PRESETS["cir1d-standard"]
        assert (p["T"], p["n"], p["rates"], p["noise_var"]) == (1.0, 5000, [1.0], [0.005])
        assert p["model"] == {"kind": "cir1d", "alpha1": 1.0, "alpha2": 1.0, "sigma": 1.0, "y0": 1.0}
        assert PRESETS["cir2d-standard"]["noise_var"] == [0.005, 0.005]
        assert PRESETS["tiny"]["n"] == 200

    def test_overrides(self):
        rc = resolve_sim_config({"preset": "cir1d-standard", "n": 100, "model": {"sigma": 0.5}})
        assert rc["n"] == 100 and rc["model"]["sigma"] == 0.5 and rc["model"]["alpha1"] == 1.0

    def test_missing_keys(self):
        with pytest.raises(BadConfig):
            resolve_sim_config({"T": 1.0})


class TestSimulate:
    def test_outputs(self, tiny_data):
        files = sorted(p.name for p in tiny_data.iterdir())
        assert "dataset_0000.csv" in files and "dataset_0002.csv.json" in files
        rc = json.loads((tiny_data / "resolved_config.json").read_text())
        assert rc["config"]["n"] == 200 and rc["seed"] == 1 and len(rc["config_hash"]) == 16
        meta = json.loads((tiny_data / "dataset_0001.csv.json").read_text())
        assert meta["replication"] == 1 and meta["config_hash"] == rc["config_hash"]

    def test_bit_reproducible(self, tiny_data, tmp_path):
        cfg = write_cfg(tmp_path, "sim.json", {"preset": "tiny", "replications": 3})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "again"), "--seed", "1",
                     "--threads", "2"]) == EXIT_OK
        for r in range(3):
            name = f"dataset_{r:04d}.csv"
            assert (tmp_path / "again" / name).read_text() == (tiny_data / name).read_text()


class TestModelSpecs:
    @pytest.mark.parametrize("model", [CIRModel(), SeasonalCIR2DModel(a=2.0), PolynomialModel(degree=2),
                                       ConstantModel(dim=2, input_dim=3), NeuralNetModel(input_dim=3, dim=2)])
    def test_round_trip(self, model):
        assert model_spec(build_model(model_spec(model))) == model_spec(model)

    def test_unknown(self):
        with pytest.raises(BadConfig):
            build_model({"family": "garch"})

    def test_checkpoint(self, tmp_path, rng):
        model = NeuralNetModel(hidden=(3,))
        theta = model.init_params(rng)
        save_checkpoint(tmp_path / "c.json", model, theta, {"epoch": 7})
        m2, th2, doc = load_checkpoint(tmp_path / "c.json")
        np.testing.assert_array_equal(th2, theta)
        assert doc["epoch"] == 7 and len(doc["weights"]) == 2


class TestFit:
    def test_parametric(self, tiny_data, tmp_path):
        cfg = write_cfg(tmp_path, "fit.json", {"model": {"family": "cir1d"}, "objective": "check",
                                               "dataset_glob": str(tiny_data / "dataset_*.csv")})
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "fit")]) == EXIT_OK
        reports = json.loads((tmp_path / "fit" / "fit_report.json").read_text())
        assert len(reports) == 3
        for rep in reports:
            assert 0.05 < rep["theta"][0] < 5.0
            assert set(rep["mse"]) == {"mse1", "mse2"}
            assert rep["objective"] == "check" and rep["config_hash"]
        assert (tmp_path / "fit" / "checkpoint_0002.json").exists()

    def test_deterministic(self, tiny_data, tmp_path):
        cfg = write_cfg(tmp_path, "fit.json", {"model": {"family": "cir1d"}, "objective": "dot",
                                               "datasets": [str(tiny_data / "dataset_0000.csv")]})
        main(["fit", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["fit", "--config", cfg, "--out", str(tmp_path / "b")])
        a = json.loads((tmp_path / "a" / "fit_report.json").read_text())[0]
        b = json.loads((tmp_path / "b" / "fit_report.json").read_text())[0]
        a.pop("timings"), b.pop("timings")
        assert a == b

    def test_network_two_stage(self, tiny_data, tmp_path):
        cfg = write_cfg(tmp_path, "nn.json", {
            "model": {"family": "nn", "dim": 1, "hidden": [4, 4]},
            "dataset_glob": str(tiny_data / "dataset_*.csv"),
            "stages": [{"objective": "dot", "epochs": 20}, {"objective": "H", "epochs": 10}],
            "checkpoints": [10, 30],
        })
        out = tmp_path / "nn"
        assert main(["fit", "--config", cfg, "--out", str(out), "--seed", "4"]) == EXIT_OK
        rep = json.loads((out / "fit_report.json").read_text())
        assert rep["objective"] == "dot+H" and len(rep["trace"]) == 30
        assert (out / "checkpoint_epoch00010.json").exists() and (out / "checkpoint_epoch00030.json").exists()
        _, theta, doc = load_checkpoint(out / "checkpoint.json")
        np.testing.assert_array_equal(theta, rep["theta"])
        assert doc["epoch"] == 30

        ev = write_cfg(tmp_path, "ev.json", {"checkpoints": [str(out / "checkpoint_epoch*.json")],
                                             "truth": {"kind": "cir1d"},
                                             "datasets": [str(tiny_data / "dataset_0000.csv")]})
        assert main(["evaluate", "--config", ev, "--out", str(tmp_path / "ev")]) == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "ev" / "mse_table.csv")))
        assert {(r["epoch"], r["grid"]) for r in rows} == {("10", "mse1"), ("10", "mse2"), ("30", "mse1"), ("30", "mse2")}
        curves = list(csv.DictReader(open(tmp_path / "ev" / "sqrt_sigma_quartiles.csv")))
        assert len(curves) == 21
        diffs = list(csv.DictReader(open(tmp_path / "ev" / "objective_diff.csv")))
        assert len(diffs) == 2
        for r in diffs:
            assert float(r["difference"]) == pytest.approx(float(r["reference"]) - float(r["value"]))


class TestEvaluate:
    def test_truth_gives_zero(self, tmp_path):
        save_checkpoint(tmp_path / "truth.json", CIRModel(), [1.0])
        ev = write_cfg(tmp_path, "ev.json", {"checkpoints": [str(tmp_path / "truth.json")],
                                             "truth": {"kind": "cir1d", "sigma": 1.0}})
        assert main(["evaluate", "--config", ev, "--out", str(tmp_path / "ev")]) == EXIT_OK
        for r in csv.DictReader(open(tmp_path / "ev" / "mse_table.csv")):
            assert float(r["median"]) == 0.0
        for r in csv.DictReader(open(tmp_path / "ev" / "sqrt_sigma_quartiles.csv")):
            assert float(r["median"]) == pytest.approx(float(r["truth"]), rel=1e-12)


class TestBench:
    def test_report(self, tiny_data, tmp_path):
        cfg = write_cfg(tmp_path, "b.json", {"dataset": str(tiny_data / "dataset_0000.csv"),
                                             "model": {"family": "cir1d"}, "repeats": 2})
        assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
        rep = json.loads((tmp_path / "b" / "bench.json").read_text())
        assert set(rep["timings"]) == {"H", "check", "dot"}
        assert rep["speedup_dot_vs_H"] == pytest.approx(rep["timings"]["H"] / rep["timings"]["dot"])


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_IO

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_preset(self, tmp_path):
        cfg = write_cfg(tmp_path, "c.json", {"preset": "nope"})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_invalid_model(self, tmp_path):
        cfg = write_cfg(tmp_path, "c.json", {"preset": "tiny", "model": {"alpha1": 0.1}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        cfg = write_cfg(tmp_path, "c.json", {"model": {"family": "cir1d"}, "datasets": [str(tmp_path / "x.csv")]})
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_IO

    def test_numerical_failure(self, tiny_data, tmp_path):
        cfg = write_cfg(tmp_path, "c.json", {"model": {"family": "constant"}, "bounds": [[0.0, 0.0]], "objective": "dot",
                                             "datasets": [str(tiny_data / "dataset_0000.csv")]})
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_NUMERIC

import json
import logging

import pandas as pd
import pytest

from bliplab.cli import main
from bliplab.exceptions import NumericalError


def tiny_config(out_dir, **model):
    return {
        "sim": {"n_steps": 5, "seed": 3},
        "model": {
            "architecture": "gnn",
            "n_layers": 1,
            "hidden_dim": 8,
            **model,
        },
        "train": {"epochs": 2, "batch_size": 3},
        "inference": {"n_samples": 4},
        "n_train": 6,
        "n_val": 3,
        "n_test": 3,
        "output_dir": str(out_dir),
    }


@pytest.fixture()
def write_config(tmp_path):
    def write(name="config", **model):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(tiny_config(tmp_path / name, **model)))
        return path

    return write


@pytest.fixture()
def generated(write_config):
    config = write_config()
    assert main(["generate", "--config", str(config)]) == 0
    return config, config.parent / "config"


@pytest.fixture()
def blip_run(write_config):
    config = write_config("blip", mode="blip", vad={"hidden_dim": 8})
    assert main(["generate", "--config", str(config)]) == 0
    assert main(["train", "--config", str(config)]) == 0
    return config, config.parent / "blip"


def read_json(path):
    return json.loads(path.read_text())


def test_generate_writes_splits_and_manifest(generated, tmp_path):
    config, out = generated
    for split, n in (("train", 6), ("val", 3), ("test", 3)):
        lines = (out / "data" / f"{split}.jsonl").read_text().splitlines()
        assert len(lines) == n
    manifest = read_json(out / "manifest.json")
    assert manifest["seed"] == 3
    assert manifest["data"]["train"]["n_records"] == 6

    again = tmp_path / "again"
    argv = ["generate", "--config", str(config), "--out", str(again)]
    assert main(argv) == 0
    repeated = read_json(again / "manifest.json")
    for split in ("train", "val", "test"):
        assert (
            repeated["data"][split]["sha256"]
            == manifest["data"][split]["sha256"]
        )


def test_missing_section_is_a_config_error(tmp_path, caplog):
    raw = tiny_config(tmp_path / "out")
    del raw["train"]
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(raw))
    with caplog.at_level(logging.ERROR):
        assert main(["train", "--config", str(path)]) == 3
    assert "train" in caplog.text


def test_deterministic_run_end_to_end(generated):
    config, out = generated
    assert main(["train", "--config", str(config)]) == 0
    assert (out / "checkpoints" / "model.ckpt").is_file()
    log = pd.read_csv(out / "logs" / "model_train.csv")
    assert list(log["epoch"]) == [1, 2]
    summary = read_json(out / "reports" / "train_summary.json")
    assert summary["mode"] == "deterministic"
    assert summary["models"][0]["best_epoch"] in (1, 2)

    assert main(["eval", "--config", str(config)]) == 0
    report = read_json(out / "reports" / "metrics_map.json")
    assert report["n"] == 3
    assert report["mse"] >= 0
    assert report["nll"] is None
    assert not (out / "reports" / "metrics_mc.json").exists()


def test_blip_eval_writes_map_and_mc_reports(blip_run):
    config, out = blip_run
    assert main(["eval", "--config", str(config)]) == 0
    map_report = read_json(out / "reports" / "metrics_map.json")
    mc_report = read_json(out / "reports" / "metrics_mc.json")
    assert map_report["nll"] is None
    assert mc_report["nll"] is not None
    assert 0.0 <= mc_report["ece"] <= 0.5
    assert (out / "reports" / "metrics_mc_calibration.csv").is_file()


def test_predictions_rescore_to_the_same_metrics(blip_run):
    config, out = blip_run
    assert main(["eval", "--config", str(config)]) == 0
    test_split = out / "data" / "test.jsonl"
    argv = ["predict", "--config", str(config), "--input", str(test_split)]
    assert main(argv) == 0
    dump = out / "reports" / "predictions.jsonl"
    assert len(dump.read_text().splitlines()) == 15

    argv = ["eval", "--config", str(config), "--predictions", str(dump)]
    assert main(argv) == 0
    direct = read_json(out / "reports" / "metrics_mc.json")
    rescored = read_json(out / "reports" / "metrics_predictions.json")
    assert rescored.keys() == direct.keys()
    for key, value in direct.items():
        if value is None:
            assert rescored[key] is None
        else:
            assert rescored[key] == pytest.approx(value, rel=1e-12)


@pytest.mark.parametrize(
    "extra, code",
    [
        (["--samples", "1"], 3),
        (["--jobs", "0"], 3),
        (["--members", "2"], 3),
        (["--p", "0.3"], 3),
        (["--mode", "mc_dropout"], 3),
        (["--mode", "laplace"], 2),
    ],
)
def test_bad_options_exit_codes(write_config, extra, code):
    config = write_config()
    assert main(["train", "--config", str(config), *extra]) == code


def test_usage_errors_exit_with_two():
    assert main(["frobnicate"]) == 2
    assert main(["train"]) == 2


def test_training_without_data_is_a_data_error(write_config):
    assert main(["train", "--config", str(write_config())]) == 4


def test_ensemble_run(generated):
    config, out = generated
    argv = ["--config", str(config), "--mode", "ensemble", "--members", "2"]
    assert main(["train", *argv]) == 0
    for k in range(2):
        assert (out / "checkpoints" / f"member_{k}.ckpt").is_file()
        assert (out / "logs" / f"member_{k}_train.csv").is_file()
    assert main(["eval", *argv]) == 0
    report = read_json(out / "reports" / "metrics_ensemble.json")
    assert report["nll"] is not None


def test_mc_dropout_run_reports_mc_only(generated):
    config, out = generated
    argv = ["--config", str(config), "--mode", "mc_dropout", "--p", "0.3"]
    assert main(["train", *argv]) == 0
    assert main(["eval", *argv]) == 0
    assert (out / "reports" / "metrics_mc.json").is_file()
    assert not (out / "reports" / "metrics_map.json").exists()


def test_training_is_bit_identical(generated):
    config, out = generated
    checkpoint = out / "checkpoints" / "model.ckpt"
    assert main(["train", "--config", str(config)]) == 0
    first = checkpoint.read_bytes()
    assert main(["train", "--config", str(config)]) == 0
    assert checkpoint.read_bytes() == first


def test_numerical_failure_exits_with_five(mocker, write_config, caplog):
    train = mocker.patch(
        "bliplab.cli.cmd_train",
        side_effect=NumericalError("Non-finite loss at epoch 1, batch 0"),
    )
    config = write_config()
    with caplog.at_level(logging.ERROR):
        assert main(["train", "--config", str(config), "--jobs", "2"]) == 5
    assert "Non-finite loss" in caplog.text
    assert train.call_args.kwargs == {"jobs": 2}


def test_command_options_reach_the_config(mocker, write_config):
    train = mocker.patch("bliplab.cli.cmd_train")
    config = write_config()
    argv = ["train", "--config", str(config), "--seed", "9"]
    assert main([*argv, "--mode", "mc_dropout", "--p", "0.4"]) == 0
    experiment = train.call_args.args[0]
    assert experiment.model.mode == "mc_dropout"
    assert experiment.model.dropout_p == 0.4
    assert experiment.train.seed == experiment.sim.seed == 9


def test_corrupt_checkpoint_is_a_data_error(generated):
    config, out = generated
    assert main(["train", "--config", str(config)]) == 0
    checkpoint = out / "checkpoints" / "model.ckpt"
    checkpoint.write_bytes(checkpoint.read_bytes()[:5])
    assert main(["eval", "--config", str(config)]) == 4

import os
import pickle

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from vbtta.benchcli import (
    aggregate, bin_labels, class_edges, emit_report, gaussianity_study, generate_synthetic, main,
    run_experiment, run_seed, split_dataset, stage, strategy_names,
)
from vbtta.config import ExperimentConfig, with_overrides
from vbtta.errors import ConfigurationError, StageError
from vbtta.mathstats import Rng
from vbtta.utils.serialization import load_model, load_weights

TINY = dict(
    dim=3, n_train=60, n_calibration=40, n_test=30, n_seeds=2, hidden=(8,), epochs=5,
    mc_samples=4, tta_samples=4, steps=5, checkpoints=(1, 5),
)

TINY_ENV = """\
DIM=3
N_TRAIN=60
N_CALIBRATION=40
N_TEST=30
N_SEEDS=2
HIDDEN=8
EPOCHS=5
MC_SAMPLES=4
TTA_SAMPLES=4
AUGMENTATIONS=gaussian_noise:0.05,mixup:0.5
STEPS=5
CHECKPOINTS=1,5
"""


@pytest.fixture
def tiny_config():
    return with_overrides(ExperimentConfig(), **TINY)


def test_generated_data_has_the_requested_noisy_fraction(tiny_config):
    config = with_overrides(tiny_config, noisy_fraction=0.25)
    data = generate_synthetic(config, Rng(0), n=103)
    assert len(data) == 103 and data.dim == 3
    assert sum(len(s) == 2 for s in data.labels) == 25
    assert all(len(s) in (1, 2) for s in data.labels)


def test_generation_is_seeded(tiny_config):
    a = generate_synthetic(tiny_config, Rng(4))
    b = generate_synthetic(tiny_config, Rng(4))
    assert np.array_equal(a.inputs, b.inputs)
    assert all(np.array_equal(x, y) for x, y in zip(a.labels, b.labels))


def test_gamma_inputs_are_positive(tiny_config):
    data = generate_synthetic(with_overrides(tiny_config, source="gamma"), Rng(1), n=50)
    assert np.all(data.inputs > 0)


def test_split_sizes(tiny_config):
    train, calibration, test = split_dataset(generate_synthetic(tiny_config, Rng(0)), tiny_config)
    assert (len(train), len(calibration), len(test)) == (60, 40, 30)
    with pytest.raises(ConfigurationError):
        split_dataset(generate_synthetic(tiny_config, Rng(0), n=10), tiny_config)


def test_binning_into_classes(tiny_config):
    data = generate_synthetic(tiny_config, Rng(0))
    assert class_edges(data.first_labels(), 2).tolist() == [0.0]
    edges = class_edges(data.first_labels(), 3)
    binned = bin_labels(data, edges, 3)
    counts = np.bincount(binned.first_labels(), minlength=3)
    assert binned.task == "classification"
    assert counts.min() >= 40


def test_stage_wraps_failures():
    with pytest.raises(StageError) as info:
        with stage("moments"):
            raise ValueError("boom")
    assert info.value.stage == "moments"
    assert isinstance(info.value.cause, ValueError)


def test_strategy_names():
    assert strategy_names(6) == ["ERM", "6-TTA", "6-VB-TTA"]


def test_run_seed_writes_artifacts(tiny_config, tmp_path):
    result = run_seed(tiny_config, 0, str(tmp_path))
    assert result.weight_trace.shape == (5, tiny_config.K)
    assert np.allclose(result.weight_trace[0], 1.0 / tiny_config.K)
    assert np.allclose(result.weight_trace.sum(axis=1), 1.0)
    assert result.objective_trace.shape == (5,)
    assert all(len(v) == 2 for v in result.strategies.values())
    model = load_model(tmp_path / "model_seed0.bin")
    assert model.sizes == (3, 8, 1)
    weights, hashes, _ = load_weights(tmp_path / "weights_seed0.txt")
    assert np.allclose(weights, result.final_weights)
    assert hashes == [spec.digest() for spec in tiny_config.augmentations]


def test_aggregate_report_shapes(tiny_config):
    results = [run_seed(tiny_config, s) for s in range(2)]
    report = aggregate(tiny_config, results)
    assert len(report.metrics) == 3 * len(tiny_config.checkpoints)
    assert (report.metrics["std"] >= 0).all()
    assert len(report.per_seed) == 2 * 3 * 2
    per_step = report.weights.groupby("step")["w_k"].sum()
    assert np.allclose(per_step, 1.0)
    assert len(report.elbo) == tiny_config.steps
    assert report.metric == "mse"


def test_runs_are_reproducible(tiny_config):
    first = run_experiment(tiny_config)
    second = run_experiment(tiny_config)
    pd.testing.assert_frame_equal(first.metrics, second.metrics)
    pd.testing.assert_frame_equal(first.weights, second.weights)


def test_advi_fit_method(tiny_config):
    config = with_overrides(tiny_config, fit_method="advi", advi_latents="weights", n_seeds=1)
    result = run_seed(config, 0)
    assert result.weight_trace.shape == (5, config.K)
    assert np.all(np.isfinite(result.objective_trace))



@pytest.mark.parametrize("method, latents", [("cavi", "all"), ("advi", "all"), ("advi", "weights")])
def test_first_step_mix_is_uniform_tta(tiny_config, method, latents):
    config = with_overrides(tiny_config, fit_method=method, advi_latents=latents, n_seeds=1)
    result = run_seed(config, 0)
    names = strategy_names(config.K)
    assert result.strategies[names[2]][0] == pytest.approx(result.strategies[names[1]][0], rel=1e-12)

def test_classification_run(tiny_config):
    config = with_overrides(tiny_config, task="classification", n_classes=3, n_seeds=1)
    report = run_experiment(config)
    assert report.metric == "accuracy"
    assert report.metrics["mean"].between(0.0, 1.0).all()


def test_classification_rejects_advi(tiny_config):
    config = with_overrides(tiny_config, task="classification", fit_method="advi")
    with pytest.raises(StageError) as info:
        run_seed(config, 0)
    assert info.value.stage == "fit"
    assert isinstance(info.value.cause, ConfigurationError)


def test_stage_error_survives_pickling():
    error = StageError("fit", ConfigurationError("advi needs a continuous task"))
    restored = pickle.loads(pickle.dumps(error))
    assert restored.stage == "fit"
    assert isinstance(restored.cause, ConfigurationError)
    assert str(restored) == str(error)


@pytest.mark.slow
def test_parallel_failure_reports_the_stage(tiny_config):
    config = with_overrides(tiny_config, task="classification", fit_method="advi", workers=2)
    with pytest.raises(StageError) as info:
        run_experiment(config)
    assert info.value.stage == "fit"
    assert isinstance(info.value.cause, ConfigurationError)


@pytest.mark.slow
def test_parallel_workers_match_serial_run(tiny_config):
    serial = run_experiment(tiny_config)
    parallel = run_experiment(with_overrides(tiny_config, workers=2))
    pd.testing.assert_frame_equal(serial.metrics, parallel.metrics)


def test_emit_report_files(tiny_config, tmp_path):
    report = run_experiment(with_overrides(tiny_config, n_seeds=1))
    paths = emit_report(report, str(tmp_path))
    for name in ("metrics.csv", "weights.csv", "elbo.csv", "metrics.svg", "weights.svg", "elbo.svg"):
        assert os.path.isfile(tmp_path / name)
    assert len(paths) == 6
    lines = open(tmp_path / "metrics.csv").read().splitlines()
    assert lines[0] == "strategy,step,mean,std"
    assert len(lines) == 1 + 3 * 2


def test_gaussianity_study_rows():
    frame, clouds = gaussianity_study("gamma", 0.5, (0.0, 2.0), 500, Rng(0))
    assert len(frame) == 4
    assert set(frame["augmentation"]) == {"mixup(0.5)", "cutmix(0.5)"}
    assert frame["skewness_p"].between(0.0, 1.0).all()
    assert all(cloud.shape == (500, 2) for entries in clouds.values() for _, cloud in entries)
    with pytest.raises(ConfigurationError):
        gaussianity_study("laplace", 0.5, (0.0,), 100, Rng(0))


def test_cli_run_and_report(tmp_path):
    config_path = tmp_path / "tiny.env"
    config_path.write_text(TINY_ENV)
    out = tmp_path / "out"
    runner = CliRunner()
    result = runner.invoke(main, ["run", "--config", str(config_path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "metrics.csv").is_file() and (out / "weights_seed1.txt").is_file()
    (out / "weights.svg").unlink()
    result = runner.invoke(main, ["report", "--in", str(out)])
    assert result.exit_code == 0, result.output
    first = (out / "weights.svg").read_bytes()
    assert first.startswith(b"<?xml")
    runner.invoke(main, ["report", "--in", str(out)])
    assert (out / "weights.svg").read_bytes() == first


def test_cli_gen(tmp_path):
    config_path = tmp_path / "tiny.env"
    config_path.write_text(TINY_ENV)
    result = CliRunner().invoke(main, ["gen", "--config", str(config_path), "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(tmp_path / "dataset.csv")
    assert len(frame) == 130
    assert list(frame.columns) == ["split", "x0", "x1", "x2", "labels"]


def test_cli_configuration_errors_exit_with_code_2(tmp_path):
    config_path = tmp_path / "bad.env"
    config_path.write_text("DIM=3\nCOLOUR=red\n")
    result = CliRunner().invoke(main, ["run", "--config", str(config_path), "--out", str(tmp_path)])
    assert result.exit_code == 2
    result = CliRunner().invoke(main, ["run", "--config", str(tmp_path / "missing.env")])
    assert result.exit_code == 2


def test_cli_report_on_missing_directory_exits_with_code_3(tmp_path):
    result = CliRunner().invoke(main, ["report", "--in", str(tmp_path / "nowhere")])
    assert result.exit_code == 3


def test_cli_study(tmp_path):
    result = CliRunner().invoke(main, ["study", "--source", "gaussian", "--out", str(tmp_path), "--samples", "300"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "gaussianity.csv").is_file()
    assert (tmp_path / "study_mixup_0p5.svg").is_file()


def test_entry_points_share_one_bootstrap(monkeypatch):
    import cli
    from vbtta import __main__ as package_main

    assert cli.run is package_main.run
    monkeypatch.setattr("sys.argv", ["vbtta", "--help"])
    with pytest.raises(SystemExit) as info:
        package_main.run()
    assert info.value.code == 0

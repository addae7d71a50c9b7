import pytest

from vbtta.config import ExperimentConfig, config_from_mapping, load_config, with_overrides
from vbtta.errors import ConfigurationError


def test_defaults():
    config = ExperimentConfig()
    assert config.K == 6
    assert config.checkpoints == (1, 50, 100, 200, 300)
    assert config.fit_method == "cavi"


def test_load_config_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text(
        "# small run\n"
        "SOURCE=gamma\n"
        "DIM=5\n"
        "AUGMENTATIONS=gaussian_noise:0.05, mixup:0.5\n"
        "STEPS=20\n"
        "CHECKPOINTS=20,1,10\n"
        "HIDDEN=8\n"
    )
    config = load_config(str(path), environ={})
    assert config.source == "gamma" and config.dim == 5
    assert [spec.kind for spec in config.augmentations] == ["gaussian_noise", "mixup"]
    assert config.checkpoints == (1, 10, 20)
    assert config.hidden == (8,)


def test_seed_override_from_environment():
    config = config_from_mapping({"SEED": "3"}, environ={"VBTTA_SEED": "42"})
    assert config.seed == 42
    with pytest.raises(ConfigurationError):
        config_from_mapping({}, environ={"VBTTA_SEED": "forty"})


@pytest.mark.parametrize("values", [
    {"UNKNOWN_KEY": "1"},
    {"DIM": "ten"},
    {"SOURCE": "laplace"},
    {"NOISY_FRACTION": "1.5"},
    {"STEPS": "10", "CHECKPOINTS": "5,20"},
    {"AUGMENTATIONS": "blur:1"},
    {"SIGMA_EPS": "0"},
])
def test_invalid_values(values):
    with pytest.raises(ConfigurationError):
        config_from_mapping(values, environ={})


def test_missing_file():
    with pytest.raises(ConfigurationError):
        load_config("/nonexistent/run.env", environ={})


def test_overrides():
    config = with_overrides(ExperimentConfig(), n_seeds=2, steps=5, checkpoints=(5,))
    assert config.n_seeds == 2
    with pytest.raises(ConfigurationError):
        with_overrides(config, colour="red")
    with pytest.raises(ConfigurationError):
        with_overrides(config, steps=2)

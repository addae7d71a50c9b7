"""
Experiment configuration: flat KEY=value files read with python-dotenv.
"""

import logging
import os
from dataclasses import dataclass, fields, replace

from dotenv import dotenv_values

from vbtta.augment import parse_augmentation
from vbtta.errors import ConfigurationError

logger = logging.getLogger(__name__)

SEED_ENV = "VBTTA_SEED"

DEFAULT_AUGMENTATIONS = "mixup:0.1:minor,mixup:0.5:minor,mixup:0.9:minor,cutmix:0.1:minor,cutmix:0.5:minor,cutmix:0.9:minor"


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _choice(*options):
    def parse(text):
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return value
    return parse


def _augmentations(text):
    return tuple(parse_augmentation(item) for item in text.split(",") if item.strip())


# key -> (field name, parser)
KEYS = {
    "SOURCE": ("source", _choice("gaussian", "gamma")),
    "DIM": ("dim", int),
    "GAMMA_SHAPE": ("gamma_shape", float),
    "GAMMA_RATE": ("gamma_rate", float),
    "TASK": ("task", _choice("regression", "classification")),
    "N_CLASSES": ("n_classes", int),
    "N_TRAIN": ("n_train", int),
    "N_CALIBRATION": ("n_calibration", int),
    "N_TEST": ("n_test", int),
    "NOISY_FRACTION": ("noisy_fraction", float),
    "NOISE_SCALE": ("noise_scale", float),
    "LABEL_NOISE": ("label_noise", float),
    "SEED": ("seed", int),
    "N_SEEDS": ("n_seeds", int),
    "AUGMENTATIONS": ("augmentations", _augmentations),
    "HIDDEN": ("hidden", _ints),
    "LEARNING_RATE": ("learning_rate", float),
    "EPOCHS": ("epochs", int),
    "BATCH_SIZE": ("batch_size", int),
    "MOMENT_METHOD": ("moment_method", _choice("monte_carlo", "delta")),
    "MC_SAMPLES": ("mc_samples", int),
    "N_AUG": ("n_aug", int),
    "SIGMA_EPS": ("sigma_eps", float),
    "PRIOR_BETA": ("prior_beta", float),
    "PRIOR_NU": ("prior_nu", float),
    "PRIOR_V": ("prior_v", float),
    "FIT_METHOD": ("fit_method", _choice("cavi", "advi")),
    "STEPS": ("steps", int),
    "CHECKPOINTS": ("checkpoints", _ints),
    "REL_TOL": ("rel_tol", float),
    "TTA_SAMPLES": ("tta_samples", int),
    "ADVI_LATENTS": ("advi_latents", _choice("all", "weights")),
    "ADVI_LEARNING_RATE": ("advi_learning_rate", float),
    "ADVI_MC": ("advi_mc", int),
    "WORKERS": ("workers", int),
    "OUTPUT_DIR": ("output_dir", str),
}


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = "gaussian"
    dim: int = 40
    gamma_shape: float = 2.0
    gamma_rate: float = 2.0
    task: str = "regression"
    n_classes: int = 2
    n_train: int = 1000
    n_calibration: int = 1000
    n_test: int = 500
    noisy_fraction: float = 0.3
    noise_scale: float = 1.0
    label_noise: float = 0.1
    seed: int = 0
    n_seeds: int = 10
    augmentations: tuple = _augmentations(DEFAULT_AUGMENTATIONS)
    hidden: tuple = (64, 64)
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 32
    moment_method: str = "monte_carlo"
    mc_samples: int = 64
    n_aug: int = 1
    sigma_eps: float = 0.01
    prior_beta: float = 1e-4
    prior_nu: float = 1.0
    prior_v: float = 1.0
    fit_method: str = "cavi"
    steps: int = 300
    checkpoints: tuple = (1, 50, 100, 200, 300)
    rel_tol: float = 1e-8
    tta_samples: int = 32
    advi_latents: str = "all"
    advi_learning_rate: float = 0.05
    advi_mc: int = 2
    workers: int = 1
    output_dir: str = "results"

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.noisy_fraction <= 1.0:
            problems.append(f"NOISY_FRACTION must lie in [0, 1], got {self.noisy_fraction}")
        for name in ("dim", "n_train", "n_calibration", "n_test", "n_seeds", "epochs", "batch_size",
                     "steps", "n_aug", "advi_mc", "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name.upper()} must be at least 1, got {getattr(self, name)}")
        if self.mc_samples < 2 or self.tta_samples < 1:
            problems.append("MC_SAMPLES must be at least 2 and TTA_SAMPLES at least 1")
        if not self.augmentations:
            problems.append("AUGMENTATIONS must name at least one augmentation")
        if not self.checkpoints or any(not 1 <= s <= self.steps for s in self.checkpoints):
            problems.append(f"CHECKPOINTS must lie in [1, {self.steps}], got {self.checkpoints}")
        if self.task == "classification" and self.n_classes < 2:
            problems.append(f"N_CLASSES must be at least 2, got {self.n_classes}")
        if any(v <= 0 for v in (self.sigma_eps, self.prior_beta, self.prior_v, self.gamma_shape, self.gamma_rate)):
            problems.append("SIGMA_EPS, PRIOR_BETA, PRIOR_V, GAMMA_SHAPE and GAMMA_RATE must be positive")
        if problems:
            raise ConfigurationError("; ".join(problems))
        object.__setattr__(self, "checkpoints", tuple(sorted(set(self.checkpoints))))

    @property
    def K(self):
        return len(self.augmentations)


def config_from_mapping(values, environ=None):
    """Typed config from raw string values; VBTTA_SEED in environ overrides SEED"""
    parsed = {}
    for key, raw in values.items():
        key = key.strip().upper()
        if key not in KEYS:
            raise ConfigurationError(f"unknown configuration key '{key}'")
        if raw is None:
            raise ConfigurationError(f"configuration key '{key}' has no value")
        name, parse = KEYS[key]
        try:
            parsed[name] = parse(str(raw).strip())
        except (ValueError, ConfigurationError) as e:
            raise ConfigurationError(f"bad value for {key}: {str(e)}")
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        try:
            parsed["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got '{environ[SEED_ENV]}'")
        logger.info(f"Seed overridden from {SEED_ENV}: {parsed['seed']}")
    return ExperimentConfig(**parsed)


def load_config(path, environ=None):
    if not os.path.isfile(path):
        raise ConfigurationError(f"configuration file not found: {path}")
    values = dotenv_values(path)
    logger.info(f"Loaded {len(values)} configuration keys from {path}")
    return config_from_mapping(values, environ)


def with_overrides(config, **changes):
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = set(changes) - names
    if unknown:
        raise ConfigurationError(f"unknown configuration fields {sorted(unknown)}")
    return replace(config, **changes)

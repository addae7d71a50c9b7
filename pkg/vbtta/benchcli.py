"""
Benchmark orchestration and the `vbtta` command line.

A run generates the synthetic task, trains the predictor, computes component
moments on the calibration split, fits augmentation weights and evaluates ERM,
uniform K-TTA and K-VB-TTA on the test split at every checkpoint, for each seed.
"""

import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import click
import numpy as np
import pandas as pd

from vbtta.advi import advi_fit, offsets_at_mean, vbtta_log_joint, weights_at_mean
from vbtta.augment import AugmentationSpec, ReferencePool, induced_distribution_sample, normality_statistics
from vbtta.config import ExperimentConfig, load_config
from vbtta.errors import ConfigurationError, StageError, VbttaError
from vbtta.mathstats import DistSpec, Rng, sample
from vbtta.moments import NoiseConfig, moments_table
from vbtta.optim import AdamConfig
from vbtta.predictor import Dataset, TrainConfig, init_mlp, metrics, predict_labels, train
from vbtta.utils.report import read_csvs, render_scatter, render_svgs, write_csv, write_csvs
from vbtta.utils.serialization import save_advi, save_model, save_weights
from vbtta.vbcore import (
    FitConfig, PriorConfig, SimplexWeights, augmented_predictions, combine_predictions,
    component_class_probabilities, fit_categorical, fit_continuous,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
POLY_DEGREE = 3
STUDY_POOL_SIZE = 10_000


@contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Error in stage {name}: {str(e)}")
        raise StageError(name, e) from e


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------

def generate_synthetic(config, rng, n=None):
    """
    Inputs from N(0, I_d) or i.i.d. Gamma, labels from a random cubic in a random
    one-dimensional projection. Exactly floor(fraction·n) instances get a second,
    noisier label.
    """
    n = config.n_train + config.n_calibration + config.n_test if n is None else n
    gen = rng.generator
    d = config.dim
    u = gen.standard_normal(d)
    u /= np.linalg.norm(u)
    coefficients = gen.standard_normal(POLY_DEGREE)
    if config.source == "gaussian":
        X = sample(DistSpec.gaussian(np.zeros(d), np.eye(d)), rng.split(0), size=n)
    else:
        X = sample(DistSpec.gamma(config.gamma_shape, config.gamma_rate), rng.split(0), size=(n, d))
    X = np.asarray(X, dtype=float).reshape(n, d)
    t = X @ u
    y = sum(a * t ** (p + 1) for p, a in enumerate(coefficients))
    y = y + config.label_noise * gen.standard_normal(n)

    n_noisy = int(math.floor(config.noisy_fraction * n))
    noisy = np.zeros(n, dtype=bool)
    noisy[gen.permutation(n)[:n_noisy]] = True
    extra = y + config.noise_scale * gen.standard_normal(n)
    labels = tuple(np.array([y[i], extra[i]]) if noisy[i] else np.array([y[i]]) for i in range(n))
    logger.info(f"Generated {n} instances of dimension {d} from {config.source}, {n_noisy} with noisy labels")
    return Dataset(X, labels, "regression")


def split_dataset(dataset, config):
    a = config.n_train
    b = a + config.n_calibration
    c = b + config.n_test
    if len(dataset) < c:
        raise ConfigurationError(f"dataset of {len(dataset)} instances is smaller than the {c} requested")
    return (dataset.subset(np.arange(0, a)), dataset.subset(np.arange(a, b)), dataset.subset(np.arange(b, c)))


def class_edges(train_values, n_classes):
    """Bin edges for labelling: sign for two classes, training quantiles otherwise"""
    if n_classes == 2:
        return np.array([0.0])
    return np.quantile(np.asarray(train_values, dtype=float), np.arange(1, n_classes) / n_classes)


def bin_labels(dataset, edges, n_classes):
    labels = tuple(np.searchsorted(edges, s, side="right") for s in dataset.labels)
    return Dataset(dataset.inputs, labels, "classification", n_classes)


# ----------------------------------------------------------------------------
# Runs
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class SeedResult:
    seed_index: int
    strategies: dict
    weight_trace: np.ndarray
    objective_trace: np.ndarray
    final_weights: np.ndarray


@dataclass(eq=False)
class RunReport:
    metric: str = "mse"
    checkpoints: tuple = ()
    metrics: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["strategy", "step", "mean", "std"]))
    weights: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["step", "k", "w_k"]))
    elbo: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["step", "negative_elbo"]))
    per_seed: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["seed", "strategy", "step", "value"]))
    augmentations: tuple = ()


def strategy_names(K):
    return ["ERM", f"{K}-TTA", f"{K}-VB-TTA"]


def _pad(trace, length):
    trace = list(trace)
    if not trace:
        return trace
    return trace[:length] + [trace[-1]] * max(0, length - len(trace))


def _score(predictions, labels, metric):
    return metrics(predictions, labels)[metric]


def _fit_weights(config, calibration, means, variances, rng):
    """
    Returns (final weights, weights at the start of each step, final offsets,
    offsets at the start of each step, objective trace to minimise, ADVI q).

    Offsets are None for fits that carry no residual offsets.
    """
    specs = config.augmentations
    K = len(specs)
    fit_config = FitConfig(max_steps=config.steps, rel_tol=config.rel_tol)
    if config.task == "classification":
        if config.fit_method == "advi":
            raise ConfigurationError("FIT_METHOD=advi is only available for regression")
        probs = component_class_probabilities(means, variances)
        result = fit_categorical(calibration.labels, probs, fit_config)
        return result.weights.w, result.weight_trace, None, None, [-v for v in result.trace], None

    prior = PriorConfig(beta=config.prior_beta, nu=config.prior_nu, V=np.eye(1) * config.prior_v)
    if config.fit_method == "cavi" or K == 1:
        result = fit_continuous(calibration.labels, means, variances, prior, fit_config)
        return (result.weights.w, result.weight_trace, result.state.offsets, result.offset_trace,
                [-v for v in result.trace], None)

    transform, log_joint, init = vbtta_log_joint(calibration.labels, means, variances, prior, config.advi_latents)
    weight_trace, offset_trace, trace = [], [], []

    def record(step, q):
        weight_trace.append(weights_at_mean(q, transform).w)
        offset_trace.append(offsets_at_mean(q, transform))

    q = advi_fit(log_joint, transform, init, AdamConfig(learning_rate=config.advi_learning_rate),
                 config.steps, n_mc=config.advi_mc, rng=rng, trace=trace, callback=record)
    offsets = offsets_at_mean(q, transform)
    return (weights_at_mean(q, transform).w, weight_trace, offsets,
            offset_trace if offsets is not None else None, [-v for v in trace], q)


def run_seed(config, seed_index, output_dir=None):
    rng = Rng(config.seed).split(seed_index)
    specs = list(config.augmentations)
    K = len(specs)
    metric = "accuracy" if config.task == "classification" else "mse"
    logger.info(f"Seed {seed_index}: {K} augmentations, task {config.task}")

    with stage("generate"):
        data = generate_synthetic(config, rng.split(0))
        train_set, calibration, test = split_dataset(data, config)
        if config.task == "classification":
            edges = class_edges(train_set.first_labels(), config.n_classes)
            train_set, calibration, test = (bin_labels(ds, edges, config.n_classes)
                                            for ds in (train_set, calibration, test))

    with stage("train"):
        head = "scores" if config.task == "classification" else "linear"
        out_dim = config.n_classes if config.task == "classification" else 1
        sizes = (config.dim,) + tuple(config.hidden) + (out_dim,)
        train_seed = int(rng.split(1).generator.integers(2 ** 32))
        model = train(train_set, init_mlp(sizes, rng.split(2), head),
                      TrainConfig(learning_rate=config.learning_rate, epochs=config.epochs,
                                  batch_size=config.batch_size, seed=train_seed))
        pool = ReferencePool(train_set.inputs)

    with stage("moments"):
        noise = NoiseConfig(sigma_eps=config.sigma_eps, n_aug=config.n_aug)
        means, variances = moments_table(model, calibration.inputs, specs, noise, config.moment_method,
                                         rng.split(3), pool=pool, n_samples=config.mc_samples)

    with stage("fit"):
        final, weight_trace, final_offsets, offset_trace, objective, q = _fit_weights(
            config, calibration, means, variances, rng.split(4))
        weight_trace = np.array(_pad(list(weight_trace) + [final], config.steps))
        if final_offsets is not None:
            offset_trace = np.array(_pad(list(offset_trace) + [final_offsets], config.steps))
        objective = np.array(_pad(objective, config.steps))

    with stage("evaluate"):
        truth = test.first_labels()
        table = augmented_predictions(model, test.inputs, specs, config.tta_samples, rng.split(5), pool=pool)
        erm = _score(predict_labels(model, test.inputs), truth, metric)
        uniform = _score(combine_predictions(table, SimplexWeights.uniform(K), model.head), truth, metric)
        fitted = [_score(combine_predictions(table, weight_trace[s - 1], model.head,
                                             None if offset_trace is None else offset_trace[s - 1]), truth, metric)
                  for s in config.checkpoints]
        names = strategy_names(K)
        strategies = {
            names[0]: [erm] * len(config.checkpoints),
            names[1]: [uniform] * len(config.checkpoints),
            names[2]: fitted,
        }
        logger.info(f"Seed {seed_index}: ERM {erm:.4g}, {names[1]} {uniform:.4g}, {names[2]} {fitted[-1]:.4g}")

    if output_dir:
        with stage("save"):
            os.makedirs(output_dir, exist_ok=True)
            save_model(model, os.path.join(output_dir, f"model_seed{seed_index}.bin"))
            save_weights(os.path.join(output_dir, f"weights_seed{seed_index}.txt"), final, specs, -objective)
            if q is not None:
                save_advi(os.path.join(output_dir, f"advi_seed{seed_index}.txt"), q)

    return SeedResult(seed_index, strategies, weight_trace, objective, np.asarray(final))


def _run_seed_job(args):
    config, seed_index, output_dir = args
    return run_seed(config, seed_index, output_dir)


def aggregate(config, results):
    results = sorted(results, key=lambda r: r.seed_index)
    metric = "accuracy" if config.task == "classification" else "mse"
    if not results:
        return RunReport(metric=metric, checkpoints=tuple(config.checkpoints))
    ddof = 1 if len(results) > 1 else 0
    names = strategy_names(config.K)

    per_seed = pd.DataFrame([
        {"seed": r.seed_index, "strategy": name, "step": step, "value": r.strategies[name][c]}
        for r in results for name in names for c, step in enumerate(config.checkpoints)
    ])
    metric_rows = []
    for name in names:
        for c, step in enumerate(config.checkpoints):
            values = np.array([r.strategies[name][c] for r in results])
            metric_rows.append({"strategy": name, "step": step,
                                "mean": float(values.mean()), "std": float(values.std(ddof=ddof))})

    weight_mean = np.mean([r.weight_trace for r in results], axis=0)
    weight_mean = weight_mean / weight_mean.sum(axis=1, keepdims=True)
    weight_rows = [{"step": s + 1, "k": k, "w_k": float(weight_mean[s, k])}
                   for s in range(weight_mean.shape[0]) for k in range(weight_mean.shape[1])]
    objective = np.mean([r.objective_trace for r in results], axis=0)
    elbo_rows = [{"step": s + 1, "negative_elbo": float(v)} for s, v in enumerate(objective)]

    return RunReport(
        metric=metric,
        checkpoints=tuple(config.checkpoints),
        metrics=pd.DataFrame(metric_rows),
        weights=pd.DataFrame(weight_rows),
        elbo=pd.DataFrame(elbo_rows),
        per_seed=per_seed,
        augmentations=tuple(spec.canonical() for spec in config.augmentations),
    )


def run_experiment(config, output_dir=None):
    """All seeds, in parallel when WORKERS > 1; aggregation is ordered by seed"""
    jobs = [(config, s, output_dir) for s in range(config.n_seeds)]
    logger.info(f"Running {config.n_seeds} seeds with {config.workers} workers")
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as executor:
            results = list(executor.map(_run_seed_job, jobs))
    else:
        results = [_run_seed_job(job) for job in jobs]
    return aggregate(config, results)


def emit_report(report, directory):
    paths = write_csvs(report.metrics, report.weights, report.elbo, directory)
    paths.update({f"{name}_svg": path for name, path in render_svgs(
        {"metrics": report.metrics, "weights": report.weights, "elbo": report.elbo}, directory,
        metric=report.metric).items()})
    return paths


# ----------------------------------------------------------------------------
# Gaussianity study
# ----------------------------------------------------------------------------

def gaussianity_study(source, alpha, points, n, rng):
    """
    Mardia statistics of mixup and cutmix induced samples at query points placed
    `points` pool standard deviations from the pool mean along the diagonal.
    """
    d = 2
    if source == "gaussian":
        pool_x = sample(DistSpec.gaussian(np.zeros(d), np.eye(d)), rng.split(0), size=STUDY_POOL_SIZE)
    elif source == "gamma":
        pool_x = sample(DistSpec.gamma(2.0, 2.0), rng.split(0), size=(STUDY_POOL_SIZE, d))
    else:
        raise ConfigurationError(f"unknown study source '{source}'")
    pool = ReferencePool(pool_x)
    centre = pool.instances.mean(axis=0)
    spread = pool.instances.std(axis=0)
    direction = np.ones(d) / math.sqrt(d)
    rows, clouds = [], {}
    for a, spec in enumerate((AugmentationSpec.mixup(alpha), AugmentationSpec.cutmix(alpha))):
        for p, distance in enumerate(points):
            x = centre + distance * spread * direction
            samples = induced_distribution_sample(spec, x, n, rng.split(1 + a).split(p), pool=pool)
            result = normality_statistics(samples)
            clouds.setdefault(spec.canonical(), []).append((x, samples))
            rows.append({
                "augmentation": spec.canonical(), "distance": float(distance),
                "x0": float(x[0]), "x1": float(x[1]),
                "skewness": result.skewness.statistic, "skewness_p": result.skewness.p_value,
                "kurtosis": result.kurtosis.statistic, "kurtosis_p": result.kurtosis.p_value,
            })
    return pd.DataFrame(rows), clouds


# ----------------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------------

def _fail(e):
    if isinstance(e, StageError) and isinstance(e.cause, ConfigurationError):
        e = e.cause
    code = EXIT_CONFIG if isinstance(e, ConfigurationError) else EXIT_RUNTIME
    logger.error(f"Error: {str(e)}")
    click.echo(f"error: {str(e)}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Variational Bayes weighting of test-time augmentations"""


@main.command()
@click.option("--config", "config_path", required=True, help="experiment configuration file")
@click.option("--out", "out_dir", default=None, help="output directory (defaults to OUTPUT_DIR)")
def gen(config_path, out_dir):
    """Generate the synthetic dataset and write it as CSV"""
    try:
        config = load_config(config_path)
        data = generate_synthetic(config, Rng(config.seed).split(0).split(0))
        out_dir = out_dir or config.output_dir
        os.makedirs(out_dir, exist_ok=True)
        splits = (["train"] * config.n_train + ["calibration"] * config.n_calibration + ["test"] * config.n_test)
        frame = pd.DataFrame(data.inputs, columns=[f"x{j}" for j in range(data.dim)])
        frame.insert(0, "split", splits)
        frame["labels"] = [";".join(f"{v:.12g}" for v in s) for s in data.labels]
        write_csv(frame, os.path.join(out_dir, "dataset.csv"))
    except (VbttaError, OSError) as e:
        _fail(e)


@main.command()
@click.option("--config", "config_path", required=True, help="experiment configuration file")
@click.option("--out", "out_dir", default=None, help="output directory (defaults to OUTPUT_DIR)")
def run(config_path, out_dir):
    """Run the benchmark and write CSV and SVG reports"""
    try:
        config = load_config(config_path)
        out_dir = out_dir or config.output_dir
        report = run_experiment(config, output_dir=out_dir)
        for path in emit_report(report, out_dir).values():
            click.echo(path)
    except (VbttaError, OSError) as e:
        _fail(e)


@main.command()
@click.option("--in", "in_dir", required=True, help="directory holding metrics.csv, weights.csv, elbo.csv")
def report(in_dir):
    """Re-render the SVG plots from existing CSVs"""
    try:
        for path in render_svgs(read_csvs(in_dir), in_dir).values():
            click.echo(path)
    except (VbttaError, OSError) as e:
        _fail(e)


@main.command()
@click.option("--source", type=click.Choice(["gaussian", "gamma"]), default="gaussian")
@click.option("--out", "out_dir", required=True)
@click.option("--alpha", type=float, default=0.5)
@click.option("--samples", type=int, default=10_000)
@click.option("--seed", type=int, default=0)
def study(source, out_dir, alpha, samples, seed):
    """Normality diagnostics of mixup and cutmix induced distributions"""
    try:
        frame, clouds = gaussianity_study(source, alpha, (0.0, 1.0, 2.0, 3.0, 4.0), samples, Rng(seed))
        os.makedirs(out_dir, exist_ok=True)
        write_csv(frame, os.path.join(out_dir, "gaussianity.csv"))
        for name, entries in clouds.items():
            points = np.array([x for x, _ in entries])
            shown = [(f"d={i}", cloud[:2000]) for i, (_, cloud) in enumerate(entries)]
            safe = name.replace("(", "_").replace(")", "").replace(".", "p")
            render_scatter(shown, points, os.path.join(out_dir, f"study_{safe}.svg"), f"{name} induced samples")
    except (VbttaError, OSError) as e:
        _fail(e)

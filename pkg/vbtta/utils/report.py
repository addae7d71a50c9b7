"""
CSV and SVG rendering of benchmark reports.
"""

import logging
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["strategy", "step", "mean", "std"]
WEIGHTS_COLUMNS = ["step", "k", "w_k"]
ELBO_COLUMNS = ["step", "negative_elbo"]
CSV_FILES = {"metrics": "metrics.csv", "weights": "weights.csv", "elbo": "elbo.csv"}
METRIC_LABELS = {"mse": "test MSE (mean over seeds)", "accuracy": "test accuracy (mean over seeds)"}
# SVG user units are points, 72 per inch
SVG_SIZE = (640, 480)
FIGSIZE = (SVG_SIZE[0] / 72.0, SVG_SIZE[1] / 72.0)

plt.rcParams["svg.hashsalt"] = "vbtta"
plt.rcParams["svg.fonttype"] = "none"


def _frame(frame, columns):
    if frame is None or len(frame) == 0:
        return pd.DataFrame(columns=columns)
    return frame[columns]


def write_csv(frame, path):
    try:
        frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def write_csvs(metrics, weights, elbo, directory):
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for name, frame, columns in (("metrics", metrics, METRICS_COLUMNS),
                                 ("weights", weights, WEIGHTS_COLUMNS),
                                 ("elbo", elbo, ELBO_COLUMNS)):
        path = os.path.join(directory, CSV_FILES[name])
        write_csv(_frame(frame, columns), path)
        paths[name] = path
    return paths


def read_csvs(directory):
    frames = {}
    for name, filename in CSV_FILES.items():
        path = os.path.join(directory, filename)
        try:
            frames[name] = pd.read_csv(path)
        except OSError as e:
            raise OSError(f"cannot read {path}: {e}") from e
    return frames


def _save(fig, path):
    try:
        fig.savefig(path, format="svg", dpi=100, metadata={"Date": None})
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.info(f"Wrote {path}")


def _line_plot(frame, group, x, y, ylabel, title, path, label_format="{}"):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    if len(frame):
        for key, part in frame.groupby(group, sort=True):
            part = part.sort_values(x)
            ax.plot(part[x].to_numpy(), part[y].to_numpy(), marker="o", markersize=3,
                    label=label_format.format(key))
        ax.legend(fontsize=8)
    ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def render_svgs(frames, directory, metric=None):
    """metrics.svg, weights.svg and elbo.svg; metric names the y axis of the metrics plot when known"""
    os.makedirs(directory, exist_ok=True)
    metrics = _frame(frames.get("metrics"), METRICS_COLUMNS)
    weights = _frame(frames.get("weights"), WEIGHTS_COLUMNS)
    elbo = _frame(frames.get("elbo"), ELBO_COLUMNS)
    paths = {
        "metrics": os.path.join(directory, "metrics.svg"),
        "weights": os.path.join(directory, "weights.svg"),
        "elbo": os.path.join(directory, "elbo.svg"),
    }
    _line_plot(metrics, "strategy", "step", "mean", METRIC_LABELS.get(metric, "test metric (mean over seeds)"),
               "Test metric per checkpoint", paths["metrics"])
    _line_plot(weights, "k", "step", "w_k", "weight", "Augmentation weights", paths["weights"],
               label_format="k={}")
    elbo_fig, ax = plt.subplots(figsize=FIGSIZE)
    if len(elbo):
        ax.plot(elbo["step"].to_numpy(), elbo["negative_elbo"].to_numpy())
    ax.set_xlabel("step")
    ax.set_ylabel("negative ELBO")
    ax.set_title("Negative ELBO")
    elbo_fig.tight_layout()
    _save(elbo_fig, paths["elbo"])
    return paths


def render_scatter(samples, points, path, title):
    """Induced samples (first two coordinates) with the query points marked"""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, cloud in samples:
        ax.scatter(cloud[:, 0], cloud[:, 1], s=1, alpha=0.3, rasterized=False, label=label)
    ax.scatter(points[:, 0], points[:, 1], marker="x", color="black", label="query points")
    ax.set_title(title)
    ax.legend(fontsize=7, markerscale=4)
    fig.tight_layout()
    _save(fig, path)
    return path

from xml.etree import ElementTree

import numpy as np
import pandas as pd

from vbtta.utils.report import read_csvs, render_scatter, render_svgs, write_csvs


def _frames():
    metrics = pd.DataFrame({
        "strategy": ["ERM", "ERM", "2-VB-TTA", "2-VB-TTA"],
        "step": [1, 5, 1, 5],
        "mean": [1.0, 1.0, 0.9, 0.7],
        "std": [0.1, 0.1, 0.05, 0.02],
    })
    weights = pd.DataFrame({"step": [1, 1, 5, 5], "k": [0, 1, 0, 1], "w_k": [0.5, 0.5, 0.8, 0.2]})
    elbo = pd.DataFrame({"step": [1, 2, 3], "negative_elbo": [10.0, 8.0, 7.5]})
    return metrics, weights, elbo


def test_csvs_are_written_with_fixed_columns(tmp_path):
    metrics, weights, elbo = _frames()
    paths = write_csvs(metrics, weights, elbo, tmp_path)
    assert open(paths["metrics"]).readline().strip() == "strategy,step,mean,std"
    assert open(paths["weights"]).readline().strip() == "step,k,w_k"
    assert open(paths["elbo"]).readline().strip() == "step,negative_elbo"
    frames = read_csvs(tmp_path)
    assert np.allclose(frames["metrics"]["mean"], metrics["mean"])
    assert frames["elbo"]["negative_elbo"].tolist() == [10.0, 8.0, 7.5]


def test_svgs_are_byte_identical_across_renders(tmp_path):
    metrics, weights, elbo = _frames()
    first = render_svgs({"metrics": metrics, "weights": weights, "elbo": elbo}, tmp_path / "a")
    second = render_svgs({"metrics": metrics, "weights": weights, "elbo": elbo}, tmp_path / "b")
    for name in ("metrics", "weights", "elbo"):
        content = open(first[name], "rb").read()
        assert content.startswith(b"<?xml")
        assert content == open(second[name], "rb").read()


def test_empty_frames_still_render(tmp_path):
    paths = render_svgs({}, tmp_path)
    assert all(open(p, "rb").read() for p in paths.values())


def test_scatter(tmp_path):
    cloud = np.random.default_rng(0).standard_normal((200, 2))
    path = render_scatter([("mixup(0.5)", cloud)], np.zeros((1, 2)), tmp_path / "scatter.svg", "Induced samples")
    assert open(path, "rb").read().startswith(b"<?xml")


def test_svg_canvas_is_640_by_480(tmp_path):
    metrics, weights, elbo = _frames()
    paths = render_svgs({"metrics": metrics, "weights": weights, "elbo": elbo}, tmp_path)
    for path in paths.values():
        root = ElementTree.parse(path).getroot()
        assert root.get("viewBox").split()[2:] == ["640", "480"]


def test_metrics_axis_names_the_metric(tmp_path):
    metrics, weights, elbo = _frames()
    accuracy = open(render_svgs({"metrics": metrics}, tmp_path / "acc", metric="accuracy")["metrics"]).read()
    mse = open(render_svgs({"metrics": metrics}, tmp_path / "mse", metric="mse")["metrics"]).read()
    assert "test accuracy" in accuracy and "error" not in accuracy
    assert "test MSE" in mse

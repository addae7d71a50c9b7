import numpy as np
import pytest

from vbtta.advi import FullRankGaussian
from vbtta.augment import AugmentationSpec
from vbtta.errors import ConfigurationError
from vbtta.utils.serialization import load_advi, load_model, load_weights, save_advi, save_model, save_weights
from vbtta.vbcore import SimplexWeights


def test_model_file_preserves_parameters_bit_for_bit(tiny_model, tmp_path):
    path = tmp_path / "model.bin"
    save_model(tiny_model, path)
    loaded = load_model(path)
    assert loaded.sizes == tiny_model.sizes and loaded.head == tiny_model.head
    for a, b in zip(tiny_model.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    assert path.read_bytes().startswith(b"VBTTA-MLP v1 sizes=3,6,5,1 head=linear\n")


def test_model_file_rejects_corruption(tiny_model, tmp_path):
    path = tmp_path / "model.bin"
    save_model(tiny_model, path)
    raw = path.read_bytes()
    (tmp_path / "truncated.bin").write_bytes(raw[:-3])
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "truncated.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "short.bin")
    (tmp_path / "future.bin").write_bytes(raw.replace(b" v1 ", b" v9 ", 1))
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "future.bin")
    (tmp_path / "other.bin").write_bytes(b"NOT-A-MODEL v1\n")
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "other.bin")


def test_weights_file(tmp_path):
    specs = [AugmentationSpec.mixup(0.5), AugmentationSpec.cutmix(0.1)]
    weights = SimplexWeights([0.1234567890123456789, 1.0 - 0.1234567890123456789])
    path = tmp_path / "weights.txt"
    save_weights(path, weights, specs, [-10.5, -3.25])
    w, hashes, trace = load_weights(path)
    assert np.array_equal(w, weights.w)
    assert hashes == [spec.digest() for spec in specs]
    assert trace == [-10.5, -3.25]


def test_weights_file_with_wrong_count(tmp_path):
    path = tmp_path / "weights.txt"
    path.write_text("VBTTA-WEIGHTS v1 K=3 specs=\nweights 0.5 0.5\ntrace\n")
    with pytest.raises(ConfigurationError):
        load_weights(path)


def test_advi_file(tmp_path):
    q = FullRankGaussian(np.array([0.1, -2.0]), np.array([[0.3, 0.0], [1.0 / 3.0, 0.2]]))
    path = tmp_path / "advi.txt"
    save_advi(path, q)
    loaded = load_advi(path)
    assert np.array_equal(loaded.mean, q.mean)
    assert np.array_equal(loaded.chol, q.chol)

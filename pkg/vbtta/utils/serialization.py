"""
Versioned flat-file formats for trained predictors, fitted weights and ADVI
posteriors.
"""

import logging

import numpy as np

from vbtta.advi import FullRankGaussian
from vbtta.errors import ConfigurationError
from vbtta.predictor import MlpModel

logger = logging.getLogger(__name__)

MODEL_MAGIC = "VBTTA-MLP"
WEIGHTS_MAGIC = "VBTTA-WEIGHTS"
ADVI_MAGIC = "VBTTA-ADVI"
VERSION = "v1"


def _fmt(values):
    return " ".join(f"{float(v):.17g}" for v in np.ravel(values))


def _header_fields(line, magic, path):
    parts = line.split()
    if len(parts) < 2 or parts[0] != magic:
        raise ConfigurationError(f"{path} is not a {magic} file")
    if parts[1] != VERSION:
        raise ConfigurationError(f"{path} has unsupported version {parts[1]}")
    fields = {}
    for item in parts[2:]:
        key, _, value = item.partition("=")
        fields[key] = value
    return fields


def save_model(model, path):
    header = f"{MODEL_MAGIC} {VERSION} sizes={','.join(str(s) for s in model.sizes)} head={model.head}\n"
    payload = np.concatenate([p.ravel() for p in model.parameters()]).astype("<f8")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload.tobytes())
    logger.debug(f"Saved model {model.sizes} to {path}")


def load_model(path):
    with open(path, "rb") as f:
        raw = f.read()
    line, sep, body = raw.partition(b"\n")
    if not sep:
        raise ConfigurationError(f"{path} has no header line")
    fields = _header_fields(line.decode("ascii", errors="replace"), MODEL_MAGIC, path)
    try:
        sizes = tuple(int(s) for s in fields["sizes"].split(","))
        head = fields["head"]
    except (KeyError, ValueError):
        raise ConfigurationError(f"{path} has a malformed header")
    if len(body) % 8:
        raise ConfigurationError(f"{path} has a truncated parameter payload")
    values = np.frombuffer(body, dtype="<f8")
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if values.shape[0] != expected:
        raise ConfigurationError(f"{path} holds {values.shape[0]} parameters, expected {expected}")
    weights, biases, offset = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out).astype(float))
        offset += fan_in * fan_out
        biases.append(values[offset:offset + fan_out].astype(float))
        offset += fan_out
    return MlpModel(sizes, weights, biases, head)


def save_weights(path, weights, specs, trace):
    """Header with K and augmentation hashes, then the weight vector and the objective trace"""
    w = weights.w if hasattr(weights, "w") else np.asarray(weights, dtype=float)
    lines = [
        f"{WEIGHTS_MAGIC} {VERSION} K={w.shape[0]} specs={','.join(spec.digest() for spec in specs)}",
        f"weights {_fmt(w)}",
        f"trace {_fmt(trace)}".rstrip(),
    ]
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_weights(path):
    """Returns (weights, spec hashes, trace)"""
    with open(path) as f:
        lines = f.read().splitlines()
    if len(lines) < 3:
        raise ConfigurationError(f"{path} is truncated")
    fields = _header_fields(lines[0], WEIGHTS_MAGIC, path)
    body = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        body[key] = np.array([float(v) for v in rest.split()])
    K = int(fields.get("K", -1))
    if "weights" not in body or body["weights"].shape[0] != K:
        raise ConfigurationError(f"{path} does not hold {K} weights")
    hashes = [h for h in fields.get("specs", "").split(",") if h]
    return body["weights"], hashes, list(body.get("trace", []))


def save_advi(path, q):
    lines = [f"{ADVI_MAGIC} {VERSION} m={q.dim}", f"mean {_fmt(q.mean)}", f"chol {_fmt(q.chol)}"]
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_advi(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if len(lines) < 3:
        raise ConfigurationError(f"{path} is truncated")
    m = int(_header_fields(lines[0], ADVI_MAGIC, path).get("m", -1))
    body = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        body[key] = np.array([float(v) for v in rest.split()])
    if body.get("mean", np.empty(0)).shape[0] != m or body.get("chol", np.empty(0)).shape[0] != m * m:
        raise ConfigurationError(f"{path} does not match dimension {m}")
    return FullRankGaussian(body["mean"], body["chol"].reshape(m, m))
